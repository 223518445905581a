"""Tokenization, vocab, the two text encoders, and token masking.

The input encoder and the candidate encoder are independent instances of
the same architecture and never share parameters. Tokenization is
lowercase whitespace/punctuation splitting over a corpus-built vocab; the
special tokens and the keep-the-last-elements truncation rule are the
interface that matters.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, parameter
from .errors import ContractError, DataError
from .fusion import SelfAttentionStack
from .layers import INIT_STD, Module
from .rng import SeededRng

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIALS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def split_words(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation boundaries."""
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    """Dense token ids with the five specials pinned at 0..4."""

    def __init__(self, tokens: list[str]):
        if tokens[: len(SPECIALS)] != SPECIALS:
            tokens = SPECIALS + [t for t in tokens if t not in SPECIALS]
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ContractError("Vocab: duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[: len(SPECIALS)] != SPECIALS:
            raise DataError(f"vocab file {path}: specials missing or out of order")
        return cls(lines)


def build_vocab(corpus: list[str], min_count: int = 1) -> Vocab:
    """Corpus vocabulary: count >= min_count, sorted count-desc then lexicographic."""
    if not corpus:
        raise DataError("build_vocab: empty corpus")
    counts: dict[str, int] = {}
    for text in corpus:
        for tok in split_words(text):
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted(
        (t for t, c in counts.items() if c >= min_count),
        key=lambda t: (-counts[t], t),
    )
    return Vocab(SPECIALS + kept)


@dataclass
class TokenSequence:
    """Fixed-length id buffer: [CLS] body [SEP] then padding."""

    ids: list[int]
    n_real: int  # real tokens including [CLS]/[SEP]
    mask: list[bool] = field(repr=False, default_factory=list)

    @property
    def real_ids(self) -> list[int]:
        return self.ids[: self.n_real]

    def copy(self) -> "TokenSequence":
        return TokenSequence(list(self.ids), self.n_real, list(self.mask))


def tokenize(text: str, vocab: Vocab, max_len: int) -> TokenSequence:
    """Wrap as [CLS] body [SEP]; over-long bodies drop tokens from the front."""
    if max_len < 3:
        raise ContractError(f"tokenize: max_len {max_len} leaves no room for a token")
    body = [vocab.id_of(t) for t in split_words(text)]
    keep = max_len - 2
    if len(body) > keep:
        body = body[-keep:]
    ids = [CLS] + body + [SEP]
    n_real = len(ids)
    ids = ids + [PAD] * (max_len - n_real)
    return TokenSequence(ids, n_real, [i < n_real for i in range(max_len)])


class TextEncoder(Module):
    """Token + learned position embeddings, then a self-attention TRM stack.

    encode() returns one contextual embedding per real position; padding is
    never seen by the stack, which is equivalent to masking it out.
    """

    def __init__(self, vocab_size: int, dim: int, n_heads: int, depth: int,
                 max_len: int, ffn_dim: int, rng: SeededRng):
        self.token_emb = parameter(rng.normal(0.0, INIT_STD, (vocab_size, dim)))
        self.pos_emb = parameter(rng.normal(0.0, INIT_STD, (max_len, dim)))
        self.stack = SelfAttentionStack(depth, dim, n_heads, ffn_dim, rng)
        self.vocab_size = vocab_size
        self.max_len = max_len

    def embed(self, seq: TokenSequence) -> Tensor:
        ids = seq.real_ids
        if any(i < 0 or i >= self.vocab_size for i in ids):
            raise ContractError("encode_text: token id out of vocab range")
        if len(ids) > self.max_len:
            raise ContractError(f"encode_text: sequence longer than max_len {self.max_len}")
        tok = ad.gather_rows(self.token_emb, ids)
        pos = ad.gather_rows(self.pos_emb, list(range(len(ids))))
        return ad.add(tok, pos)

    def encode(self, seq: TokenSequence) -> Tensor:
        return self.stack(self.embed(seq))


def encode_text(seq: TokenSequence, encoder: TextEncoder) -> Tensor:
    return encoder.encode(seq)


def encode_candidate(utterance: str, vocab: Vocab, encoder: TextEncoder,
                     max_len: int) -> Tensor:
    """Candidate embedding: the [CLS]-position output of the candidate encoder."""
    seq = tokenize(utterance, vocab, max_len)
    return ad.gather_rows(encoder.encode(seq), [0])


@dataclass
class MaskingPlan:
    """Positions selected for prediction, their originals, and the rewrite."""

    positions: list[int]
    original_ids: list[int]
    actions: list[str]  # "mask" | "random" | "keep"

    def __len__(self) -> int:
        return len(self.positions)


def apply_mlm_mask(
    seq: TokenSequence,
    rng: SeededRng,
    vocab_size: int,
    select_p: float = 0.15,
    mask_p: float = 0.8,
    random_p: float = 0.1,
) -> tuple[TokenSequence, MaskingPlan]:
    """Independently select real body tokens and rewrite per the 80/10/10 rule.

    [CLS], [SEP] and padding are never candidates. Sequences with no
    maskable token return an empty plan.
    """
    maskable = list(range(1, seq.n_real - 1))
    out = seq.copy()
    plan = MaskingPlan([], [], [])
    if not maskable or select_p <= 0.0:
        return out, plan
    draws = rng.random(len(maskable))
    for pos, u in zip(maskable, draws):
        if u >= select_p:
            continue
        original = seq.ids[pos]
        b = rng.random()
        if b < mask_p:
            out.ids[pos] = MASK
            action = "mask"
        elif b < mask_p + random_p:
            lo = len(SPECIALS)
            out.ids[pos] = int(rng.integers(lo, vocab_size)) if vocab_size > lo else original
            action = "random"
        else:
            action = "keep"
        plan.positions.append(pos)
        plan.original_ids.append(original)
        plan.actions.append(action)
    return out, plan
