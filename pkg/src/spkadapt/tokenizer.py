"""Token inventory: character mode by default, BPE-style piece lists accepted."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

BLANK = "<blank>"
UNK = "<unk>"
SPACE = "<space>"
SOS_EOS = "<sos/eos>"
WORD_START = "▁"


class Tokenizer:
    """Maps text to ids over ``<blank>, <unk>, ..., <sos/eos>``.

    In ``char`` mode every character is a token and spaces become
    ``<space>``. In ``bpe`` mode each word gets a leading ``▁`` and is
    split by greedy longest match over the pieces in the inventory.
    """

    def __init__(self, tokens: Sequence[str], mode: str = "char"):
        if mode not in ("char", "bpe"):
            raise ValueError(f"tokenizer mode must be char or bpe, got {mode!r}")
        tokens = list(tokens)
        if tokens[:2] != [BLANK, UNK] or tokens[-1] != SOS_EOS:
            raise ValueError("inventory must start with <blank>, <unk> and end with <sos/eos>")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in inventory")
        self.tokens = tokens
        self.mode = mode
        self.index = {t: i for i, t in enumerate(tokens)}
        self._max_piece = max(len(t) for t in tokens)

    blank = 0
    unk = 1

    @property
    def sos(self) -> int:
        return len(self.tokens) - 1

    eos = sos

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Tokenizer":
        chars = sorted({c for t in texts for c in t if c != " "})
        return cls([BLANK, UNK, SPACE, *chars, SOS_EOS], "char")

    @classmethod
    def from_file(cls, path: str | Path, mode: str | None = None) -> "Tokenizer":
        lines = [ln.split()[0] for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
        if mode is None:
            mode = "bpe" if any(WORD_START in t for t in lines) else "char"
        return cls(lines, mode)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    def encode(self, text: str) -> list[int]:
        if self.mode == "char":
            return [self.index[SPACE] if c == " " else self.index.get(c, self.unk) for c in text]
        ids: list[int] = []
        for word in text.split():
            piece = WORD_START + word
            i = 0
            while i < len(piece):
                for j in range(min(len(piece), i + self._max_piece), i, -1):
                    if piece[i:j] in self.index:
                        ids.append(self.index[piece[i:j]])
                        i = j
                        break
                else:
                    ids.append(self.unk)
                    i += 1
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        special = {self.blank, self.sos}
        pieces = [self.tokens[i] for i in ids if i not in special]
        if self.mode == "char":
            return "".join(" " if p == SPACE else p for p in pieces)
        return "".join(pieces).replace(WORD_START, " ").strip()
