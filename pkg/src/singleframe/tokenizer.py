"""Whitespace word-level tokenizer over a closed corpus vocabulary."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import torch

from .errors import InputError

PAD, CLS, SEP, MASK = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]")


@dataclass
class TokenSequence:
    ids: torch.Tensor  # (L,) or (B, L) long
    mask: torch.Tensor  # same shape, bool; True on real tokens

    def __len__(self):
        return self.ids.shape[-1]


class WordTokenizer:
    def __init__(self, words: Sequence[str]):
        self.itos = list(SPECIAL_TOKENS) + [w for w in words if w not in SPECIAL_TOKENS]
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate words in vocabulary")

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "WordTokenizer":
        seen: dict[str, None] = {}
        for t in texts:
            for w in t.lower().split():
                seen.setdefault(w, None)
        return cls(sorted(seen))

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    def words(self, text: str) -> list[int]:
        out = []
        for w in text.lower().split():
            if w == "[sep]":
                out.append(SEP)
                continue
            if w not in self.stoi:
                raise InputError(f"word {w!r} not in vocabulary")
            out.append(self.stoi[w])
        return out

    def encode(self, text: str, max_len: int) -> TokenSequence:
        """[CLS] w_1 ... w_k [SEP] followed by right padding; truncates to max_len."""
        body = self.words(text)[: max_len - 2]
        ids = [CLS] + body + [SEP]
        n = len(ids)
        ids = ids + [PAD] * (max_len - n)
        mask = [True] * n + [False] * (max_len - n)
        return TokenSequence(torch.tensor(ids, dtype=torch.long), torch.tensor(mask))

    def encode_batch(self, texts: Sequence[str], max_len: int) -> TokenSequence:
        seqs = [self.encode(t, max_len) for t in texts]
        return TokenSequence(torch.stack([s.ids for s in seqs]), torch.stack([s.mask for s in seqs]))

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.itos[int(i)] for i in ids if int(i) not in (PAD, CLS, SEP, MASK))

    def to_list(self) -> list[str]:
        return list(self.itos[len(SPECIAL_TOKENS):])
