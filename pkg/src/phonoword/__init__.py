"""Phoneme-level cross-lingual speech recognition on a numpy autodiff core.

Subpackages and modules:

* ``diffcore``: reverse-mode autodiff, layers, optimiser and gradient checks
* ``losses``: smooth-L1, CTC, cross-entropy and the pre-training objectives
* ``unidata2vec``: masked student / EMA teacher encoder
* ``transcoder``: phoneme-posterior to word translation model
* ``eval``: error rates and the clustering probe
* ``synthcorpus``: synthetic multi-language corpus
* ``cli``: pipeline driver
"""

__version__ = "0.1.0"
