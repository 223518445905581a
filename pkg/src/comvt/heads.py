"""Task heads, losses, and the model-variant registry.

Candidate ranking scores the pooled multimodal embedding against each
candidate's encoder output by an unscaled dot product, softmax-normalized;
training uses in-batch pools (the batch's own true utterances). MLM, the
next-step classifier, and answer-pool QA ranking share the same encoders.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, parameter
from .errors import ConfigError, ContractError
from .fusion import CoTrmStack, SelfAttentionStack
from .layers import INIT_STD, Linear, Module
from .rng import SeededRng
from .text import (
    CLS,
    SEP,
    MaskingPlan,
    TextEncoder,
    TokenSequence,
    Vocab,
    encode_candidate,
)
from .visual import ClipFeatures, VisualParams, combine_grid, compact_extract, sinusoidal_encoding

VARIANTS = ("comvt", "comvt-scene-only", "text-only", "vision-only", "single-stream")


@dataclass
class ModelConfig:
    """Shape hyperparameters shared by every variant."""

    vocab_size: int
    model_dim: int = 64
    n_heads: int = 4
    text_layers: int = 2
    ffn_dim: Optional[int] = None          # default 4 * model_dim
    fusion_blocks: int = 2                 # S
    scene_dim: int = 32
    object_dim: int = 32
    objects_per_frame: int = 4             # L
    max_text_tokens: int = 128             # N_w
    max_frames: int = 30                   # N_f'
    anchor: str | int = "last"
    nsp_classes: Optional[int] = None
    nsp_hidden: Optional[int] = None
    single_stream_layers: Optional[int] = None

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.model_dim
        if self.nsp_hidden is None:
            self.nsp_hidden = self.model_dim
        if self.single_stream_layers is None:
            self.single_stream_layers = self.text_layers + self.fusion_blocks
        if self.model_dim % self.n_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by {self.n_heads} heads"
            )
        if self.fusion_blocks < 1:
            raise ConfigError(f"fusion_blocks must be >= 1, got {self.fusion_blocks}")


@dataclass
class LossBundle:
    nup_loss: Tensor
    mlm_loss: Tensor
    total: Tensor
    w_nup: float = 1.0
    w_mlm: float = 1.0


def make_loss_bundle(nup: Tensor, mlm: Tensor, w_nup: float = 1.0,
                     w_mlm: float = 1.0) -> LossBundle:
    total = ad.add(ad.scale(nup, w_nup), ad.scale(mlm, w_mlm))
    return LossBundle(nup, mlm, total, w_nup, w_mlm)


# ---------------------------------------------------------------------------
# losses / heads
# ---------------------------------------------------------------------------


def nup_scores_from_embeddings(pooled: Tensor, cand_rows: Tensor) -> Tensor:
    """Softmax over plain dot products; pooled (1,d), cand_rows (M,d) -> (M,)."""
    if cand_rows.data.shape[0] == 0:
        raise ContractError("nup_scores: empty candidate set")
    if pooled.data.shape != (1, cand_rows.data.shape[1]):
        raise ContractError(
            f"nup_scores: pooled {pooled.data.shape} vs candidates {cand_rows.data.shape}"
        )
    dots = ad.matmul(pooled, ad.transpose(cand_rows))
    return ad.reshape(ad.softmax(dots, axis=-1), (cand_rows.data.shape[0],))


def nup_scores(pooled: Tensor, candidates, vocab: Vocab,
               candidate_encoder: TextEncoder, max_len: int) -> Tensor:
    """Embed each candidate utterance and normalize the dot products."""
    if len(candidates.utterances) == 0:
        raise ContractError("nup_scores: empty candidate set")
    rows = ad.concat_rows([
        encode_candidate(u, vocab, candidate_encoder, max_len)
        for u in candidates.utterances
    ])
    return nup_scores_from_embeddings(pooled, rows)


def nup_loss(scores: Tensor, true_index: int) -> Tensor:
    """-log P(true); the probability is floor-clamped at 1e-30."""
    m = scores.data.reshape(-1).shape[0]
    if not (0 <= true_index < m):
        raise ContractError(f"nup_loss: true index {true_index} outside 0..{m - 1}")
    flat = ad.reshape(scores, (m,))
    return ad.neg_log(ad.gather_rows(flat, [true_index]))


def in_batch_nup_loss(pooled_rows: Tensor, cand_rows: Tensor) -> Tensor:
    """Mean diagonal NLL of the B x B score matrix (in-batch negatives)."""
    b = pooled_rows.data.shape[0]
    if cand_rows.data.shape[0] != b:
        raise ContractError("in_batch_nup_loss: pooled/candidate counts differ")
    logits = ad.matmul(pooled_rows, ad.transpose(cand_rows))
    return ad.cross_entropy_logits(logits, np.arange(b))


def mlm_loss(text_states: Tensor, plan: MaskingPlan, head: Linear) -> Tensor:
    """Mean cross-entropy of the vocab projection at the predicted positions."""
    if len(plan) == 0:
        return ad.tensor(0.0)
    rows = ad.gather_rows(text_states, plan.positions)
    return ad.cross_entropy_logits(head(rows), plan.original_ids)


def mlm_loss_batch(states_and_plans, head: Linear) -> Tensor:
    """MLM over a batch: mean across every predicted position in the batch."""
    rows, targets = [], []
    for states, plan in states_and_plans:
        if len(plan) == 0:
            continue
        rows.append(ad.gather_rows(states, plan.positions))
        targets.extend(plan.original_ids)
    if not rows:
        return ad.tensor(0.0)
    return ad.cross_entropy_logits(head(ad.concat_rows(rows)), targets)


class NspHead(Module):
    """Two-layer step classifier; always freshly initialized."""

    def __init__(self, model_dim: int, hidden: int, n_classes: int, rng: SeededRng):
        if n_classes < 2:
            raise ConfigError(f"NspHead: need >= 2 classes, got {n_classes}")
        self.fc1 = Linear(model_dim, hidden, rng)
        self.fc2 = Linear(hidden, n_classes, rng)
        self.n_classes = n_classes

    def __call__(self, pooled: Tensor) -> Tensor:
        return ad.reshape(self.fc2(ad.gelu(self.fc1(pooled))), (self.n_classes,))


def nsp_logits(pooled: Tensor, head: NspHead) -> Tensor:
    return head(pooled)


def dedupe_answers(answers: list[str]) -> list[str]:
    seen = set()
    out = []
    for a in answers:
        if a not in seen:
            seen.add(a)
            out.append(a)
    return out


def qa_rank(pooled: Tensor, answer_pool: list[str], vocab: Vocab,
            candidate_encoder: TextEncoder, max_len: int) -> list[tuple[int, str, float]]:
    """Score each pool answer Eq-11 style and sort descending (index breaks ties).

    Returns (pool_index, answer, score) triples, best first. The pool is
    deduplicated by exact string, keeping first occurrences.
    """
    pool = dedupe_answers(answer_pool)
    if not pool:
        raise ContractError("qa_rank: empty answer pool")
    with ad.no_grad():
        rows = ad.concat_rows([
            encode_candidate(a, vocab, candidate_encoder, max_len) for a in pool
        ])
        dots = (pooled.data @ rows.data.T).reshape(-1)
    order = sorted(range(len(pool)), key=lambda i: (-dots[i], i))
    return [(i, pool[i], float(dots[i])) for i in order]


def qa_text(transcript: str, question: str) -> str:
    """Single textual input: question appended to the transcript, or the
    question alone when there is no speech."""
    transcript = transcript.strip()
    return f"{transcript} {question}" if transcript else question


# ---------------------------------------------------------------------------
# model variants
# ---------------------------------------------------------------------------


def _resolve_anchor(policy, n_frames: int) -> int:
    if policy == "last":
        return n_frames
    t = int(policy)
    if not (1 <= t <= n_frames):
        raise ContractError(f"anchor {t} outside 1..{n_frames}")
    return t


class ComvtModel(Module):
    """Two-stream model: text encoder + visual pipeline + co-attn fusion.

    scene_only drops the object pipeline and feeds projected per-second
    scene vectors (with temporal sinusoid) as the visual set; dummy_text
    replaces the transcript with the fixed [CLS][SEP] input.
    """

    uses_visual = True

    def __init__(self, cfg: ModelConfig, rng: SeededRng,
                 scene_only: bool = False, dummy_text: bool = False):
        d = cfg.model_dim
        self.text_encoder = TextEncoder(
            cfg.vocab_size, d, cfg.n_heads, cfg.text_layers,
            cfg.max_text_tokens, cfg.ffn_dim, rng,
        )
        self.candidate_encoder = TextEncoder(
            cfg.vocab_size, d, cfg.n_heads, cfg.text_layers,
            cfg.max_text_tokens, cfg.ffn_dim, rng,
        )
        if scene_only:
            self.scene_proj = Linear(cfg.scene_dim, d, rng)
        else:
            self.visual = VisualParams(cfg.scene_dim, cfg.object_dim, d, rng)
        self.fusion = CoTrmStack(cfg.fusion_blocks, d, cfg.n_heads, cfg.ffn_dim, rng)
        self.mlm_head = Linear(d, cfg.vocab_size, rng)
        self.cfg = cfg
        self.scene_only = scene_only
        self.dummy_text = dummy_text

    @property
    def uses_text(self) -> bool:
        return not self.dummy_text

    def dummy_tokens(self) -> TokenSequence:
        ids = [CLS, SEP] + [0] * (self.cfg.max_text_tokens - 2)
        return TokenSequence(ids, 2, [i < 2 for i in range(self.cfg.max_text_tokens)])

    def visual_set(self, clip: ClipFeatures) -> Tensor:
        clip = clip.truncated(self.cfg.max_frames)
        if self.scene_only:
            sin = np.stack([
                sinusoidal_encoding(float(i), self.cfg.model_dim)
                for i in clip.frame_indices
            ])
            return ad.add(self.scene_proj(ad.tensor(clip.scene)), ad.tensor(sin))
        grid = combine_grid(clip.scene, clip.objects, clip.boxes,
                            clip.frame_indices, self.visual)
        anchor = _resolve_anchor(self.cfg.anchor, clip.n_frames)
        return compact_extract(grid, clip.n_frames, clip.objects.shape[1],
                               anchor, self.visual)

    def forward_clip(self, tokens: TokenSequence,
                     clip: ClipFeatures) -> tuple[Tensor, Tensor]:
        if self.dummy_text:
            tokens = self.dummy_tokens()
        text0 = self.text_encoder.encode(tokens)
        visual0 = self.visual_set(clip)
        _v_final, text_final = self.fusion(visual0, text0)
        return ad.gather_rows(text_final, [0]), text_final

    def encode_candidates(self, utterances: list[str], vocab: Vocab) -> Tensor:
        return ad.concat_rows([
            encode_candidate(u, vocab, self.candidate_encoder, self.cfg.max_text_tokens)
            for u in utterances
        ])


class TextOnlyModel(Module):
    """Input text encoder + ranking head; never touches feature files."""

    uses_visual = False
    uses_text = True

    def __init__(self, cfg: ModelConfig, rng: SeededRng):
        d = cfg.model_dim
        self.text_encoder = TextEncoder(
            cfg.vocab_size, d, cfg.n_heads, cfg.text_layers,
            cfg.max_text_tokens, cfg.ffn_dim, rng,
        )
        self.candidate_encoder = TextEncoder(
            cfg.vocab_size, d, cfg.n_heads, cfg.text_layers,
            cfg.max_text_tokens, cfg.ffn_dim, rng,
        )
        self.mlm_head = Linear(d, cfg.vocab_size, rng)
        self.cfg = cfg

    def forward_clip(self, tokens: TokenSequence,
                     clip: Optional[ClipFeatures]) -> tuple[Tensor, Tensor]:
        states = self.text_encoder.encode(tokens)
        return ad.gather_rows(states, [0]), states

    def encode_candidates(self, utterances: list[str], vocab: Vocab) -> Tensor:
        return ad.concat_rows([
            encode_candidate(u, vocab, self.candidate_encoder, self.cfg.max_text_tokens)
            for u in utterances
        ])


class SingleStreamModel(Module):
    """One self-attention stack over [text tokens; visual tokens] with
    modality-type embeddings; the multimodal comparison baseline."""

    uses_visual = True
    uses_text = True

    def __init__(self, cfg: ModelConfig, rng: SeededRng):
        d = cfg.model_dim
        # depth-0 encoder supplies token + position embeddings only
        self.embedder = TextEncoder(
            cfg.vocab_size, d, cfg.n_heads, 0, cfg.max_text_tokens, cfg.ffn_dim, rng,
        )
        self.candidate_encoder = TextEncoder(
            cfg.vocab_size, d, cfg.n_heads, cfg.text_layers,
            cfg.max_text_tokens, cfg.ffn_dim, rng,
        )
        self.visual = VisualParams(cfg.scene_dim, cfg.object_dim, d, rng)
        self.type_emb = parameter(rng.normal(0.0, INIT_STD, (2, d)))
        self.stack = SelfAttentionStack(
            cfg.single_stream_layers, d, cfg.n_heads, cfg.ffn_dim, rng
        )
        self.mlm_head = Linear(d, cfg.vocab_size, rng)
        self.cfg = cfg

    def forward_clip(self, tokens: TokenSequence,
                     clip: ClipFeatures) -> tuple[Tensor, Tensor]:
        clip = clip.truncated(self.cfg.max_frames)
        text = self.embedder.embed(tokens)
        n_text = text.data.shape[0]
        grid = combine_grid(clip.scene, clip.objects, clip.boxes,
                            clip.frame_indices, self.visual)
        anchor = _resolve_anchor(self.cfg.anchor, clip.n_frames)
        vis = compact_extract(grid, clip.n_frames, clip.objects.shape[1],
                              anchor, self.visual)
        text = ad.add(text, ad.gather_rows(self.type_emb, [0] * n_text))
        vis = ad.add(vis, ad.gather_rows(self.type_emb, [1] * vis.data.shape[0]))
        out = self.stack(ad.concat_rows([text, vis]))
        states = ad.gather_rows(out, list(range(n_text)))
        return ad.gather_rows(out, [0]), states

    def encode_candidates(self, utterances: list[str], vocab: Vocab) -> Tensor:
        return ad.concat_rows([
            encode_candidate(u, vocab, self.candidate_encoder, self.cfg.max_text_tokens)
            for u in utterances
        ])


def build_model(variant: str, cfg: ModelConfig, rng: SeededRng):
    if variant == "comvt":
        return ComvtModel(cfg, rng)
    if variant == "comvt-scene-only":
        return ComvtModel(cfg, rng, scene_only=True)
    if variant == "vision-only":
        return ComvtModel(cfg, rng, dummy_text=True)
    if variant == "text-only":
        return TextOnlyModel(cfg, rng)
    if variant == "single-stream":
        return SingleStreamModel(cfg, rng)
    raise ConfigError(f"unknown model variant {variant!r}; expected one of {VARIANTS}")
