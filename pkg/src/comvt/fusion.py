"""Two-stream co-attentional fusion.

A TRM block contextualizes a query set against a key/value set; a co-attn
block runs one cross-modal TRM followed by one self TRM per stream (four
TRMs total), with both cross steps reading the block's *input* sets. The
stack repeats that block S times with per-block parameters.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .layers import LayerNorm, Linear, Module, TwoLayerMlp
from .rng import SeededRng


class TrmBlock(Module):
    """Pre-norm residual transformer block over row sets.

    out = q + proj(MHA(norm1(q), norm1(kv))); out = out + FFN(norm2(out)).
    """

    def __init__(self, dim: int, n_heads: int, ffn_dim: int, rng: SeededRng):
        if dim % n_heads != 0:
            raise ContractError(f"TrmBlock: {n_heads} heads do not divide dim {dim}")
        self.n_heads = n_heads
        self.norm1 = LayerNorm(dim)
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = TwoLayerMlp(dim, ffn_dim, dim, rng)

    def __call__(self, q_set: Tensor, kv_set: Tensor,
                 key_mask: Optional[np.ndarray] = None) -> Tensor:
        qn = self.norm1(q_set)
        kvn = qn if kv_set is q_set else self.norm1(kv_set)
        attended = ad.attention(
            self.q_proj(qn), self.k_proj(kvn), self.v_proj(kvn),
            n_heads=self.n_heads, key_mask=key_mask,
        )
        x = ad.add(q_set, self.out_proj(attended))
        return ad.add(x, self.ffn(self.norm2(x)))


def trm(q_set: Tensor, kv_set: Tensor, params: TrmBlock,
        key_mask: Optional[np.ndarray] = None) -> Tensor:
    """Functional form of a TRM block application."""
    return params(q_set, kv_set, key_mask)


class CoTrmBlock(Module):
    """One co-attentional block: cross + self TRM per modality stream."""

    def __init__(self, dim: int, n_heads: int, ffn_dim: int, rng: SeededRng):
        self.visual_cross = TrmBlock(dim, n_heads, ffn_dim, rng)
        self.visual_self = TrmBlock(dim, n_heads, ffn_dim, rng)
        self.text_cross = TrmBlock(dim, n_heads, ffn_dim, rng)
        self.text_self = TrmBlock(dim, n_heads, ffn_dim, rng)

    def __call__(self, visual: Tensor, text: Tensor,
                 visual_mask: Optional[np.ndarray] = None,
                 text_mask: Optional[np.ndarray] = None) -> tuple[Tensor, Tensor]:
        if visual.data.shape[0] == 0 or text.data.shape[0] == 0:
            raise ContractError("cotrm_block requires nonempty visual and text sets")
        # Both cross steps attend to this block's input counterpart set.
        v_hat = self.visual_cross(visual, text, key_mask=text_mask)
        e_hat = self.text_cross(text, visual, key_mask=visual_mask)
        v_out = self.visual_self(v_hat, v_hat, key_mask=None)
        e_out = self.text_self(e_hat, e_hat, key_mask=None)
        return v_out, e_out


def cotrm_block(visual: Tensor, text: Tensor, params: CoTrmBlock,
                visual_mask=None, text_mask=None) -> tuple[Tensor, Tensor]:
    return params(visual, text, visual_mask, text_mask)


class CoTrmStack(Module):
    """S co-attentional blocks with distinct parameters per block.

    depth 0 is accepted for identity-composition tests only; real configs
    use depth >= 1.
    """

    def __init__(self, depth: int, dim: int, n_heads: int, ffn_dim: int, rng: SeededRng):
        if depth < 0:
            raise ContractError(f"CoTrmStack: negative depth {depth}")
        self.blocks = [CoTrmBlock(dim, n_heads, ffn_dim, rng) for _ in range(depth)]

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def __call__(self, visual: Tensor, text: Tensor,
                 visual_mask=None, text_mask=None) -> tuple[Tensor, Tensor]:
        for block in self.blocks:
            visual, text = block(visual, text, visual_mask, text_mask)
        return visual, text


def cotrm_stack(visual: Tensor, text: Tensor, params: CoTrmStack,
                visual_mask=None, text_mask=None) -> tuple[Tensor, Tensor]:
    """Run the full stack; returns (V_final, E_final); E_final row 0 is the
    pooled multimodal embedding when row 0 of the text set is the start
    token."""
    return params(visual, text, visual_mask, text_mask)


class SelfAttentionStack(Module):
    """Plain self-attention TRM stack (text encoder / single-stream model)."""

    def __init__(self, depth: int, dim: int, n_heads: int, ffn_dim: int, rng: SeededRng):
        if depth < 0:
            raise ContractError(f"SelfAttentionStack: negative depth {depth}")
        self.blocks = [TrmBlock(dim, n_heads, ffn_dim, rng) for _ in range(depth)]

    def __call__(self, x: Tensor, key_mask: Optional[np.ndarray] = None) -> Tensor:
        for block in self.blocks:
            x = block(x, x, key_mask=key_mask)
        return x
