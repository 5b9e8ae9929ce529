from __future__ import annotations

from typing import Iterable, Sequence

BLANK_SYMBOL = "<blank>"
WORD_SEP = "|"


class TokenVocab:
    """Ordered symbol table; index 0 is the CTC blank."""

    def __init__(self, symbols: Sequence[str], kind: str):
        symbols = list(symbols)
        if len(set(symbols)) != len(symbols):
            raise ValueError(f"{kind} vocabulary contains duplicates")
        self.symbols = symbols
        self.kind = kind
        self.index = {s: i for i, s in enumerate(symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, TokenVocab) and self.symbols == other.symbols and self.kind == other.kind

    def encode(self, tokens: Iterable[str]) -> list[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as exc:
            raise ValueError(f"symbol {exc.args[0]!r} not in {self.kind} vocabulary") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.symbols[i] for i in ids]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "symbols": self.symbols}

    @classmethod
    def from_dict(cls, d: dict) -> "TokenVocab":
        return cls(d["symbols"], d["kind"])


def phoneme_vocab(phonemes: Sequence[str]) -> TokenVocab:
    return TokenVocab([BLANK_SYMBOL, *phonemes], "phoneme")


def grapheme_vocab(letters: Iterable[str]) -> TokenVocab:
    return TokenVocab([BLANK_SYMBOL, WORD_SEP, *sorted(set(letters))], "grapheme")


def spell_targets(words: Sequence[str]) -> list[str]:
    """Grapheme target for a word sequence: letters with ``|`` between words."""
    out: list[str] = []
    for i, w in enumerate(words):
        if i:
            out.append(WORD_SEP)
        out.extend(w)
    return out


def graphemes_to_words(symbols: Sequence[str]) -> list[str]:
    text = "".join(symbols)
    return [w for w in text.split(WORD_SEP) if w]
