"""Run configuration, training/evaluation loops, cost model, checkpoints.

The training loop is a single seeded optimizer stream: batch assembly,
forward, combined ranking+masking loss, backward, Adam with the
warmup/decay schedule, periodic recall evaluation. Checkpoints use a tagged
little-endian binary format that round-trips float64 bitwise.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from .autodiff import finite_diff_check
from .errors import ConfigError, ContractError, DataError, NumericError
from .heads import (
    LossBundle,
    ModelConfig,
    build_model,
    in_batch_nup_loss,
    make_loss_bundle,
    mlm_loss_batch,
)
from .optim import LrSchedule, OptimizerState, adam_step, lr_at_step
from .report import MetricReport
from .rng import (
    STREAM_CHECK,
    STREAM_DATA,
    STREAM_INIT,
    STREAM_MASK,
    STREAM_SYNTH,
    SeededRng,
)
from .text import Vocab, apply_mlm_mask, build_vocab, tokenize
from .visual import ClipFeatures, load_features_file

CHECKPOINT_MAGIC = b"CMVT"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Flat, JSON-mirrored run description; unknown keys are rejected."""

    variant: str = "comvt"
    seed: int = 0
    # model shapes
    model_dim: int = 64
    n_heads: int = 4
    text_layers: int = 2
    ffn_dim: Optional[int] = None
    fusion_blocks: int = 2
    scene_dim: int = 32
    object_dim: int = 32
    objects_per_frame: int = 4
    max_text_tokens: int = 128
    max_frames: int = 30
    anchor: str | int = "last"
    nsp_classes: Optional[int] = None
    single_stream_layers: Optional[int] = None
    # training
    batch_size: int = 32
    steps: int = 2000
    base_lr: float = 1e-3
    warmup_steps: int = 50
    decay_interval: int = 1000
    decay_factor: float = 0.95
    w_nup: float = 1.0
    w_mlm: float = 1.0
    mlm_select_p: float = 0.15
    eval_every: int = 500
    early_stop_r1: Optional[float] = None
    min_count: int = 1
    # files
    train_examples: Optional[str] = None
    train_features: Optional[str] = None
    eval_examples: Optional[str] = None
    eval_features: Optional[str] = None
    eval_candidates: Optional[str] = None
    vocab: Optional[str] = None
    init_encoder_weights: Optional[str] = None

    def __post_init__(self):
        if self.variant not in ("comvt", "comvt-scene-only", "text-only",
                                "vision-only", "single-stream"):
            raise ConfigError(f"unknown model variant {self.variant!r}")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        if self.fusion_blocks < 1:
            raise ConfigError("fusion_blocks must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json_file(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            model_dim=self.model_dim,
            n_heads=self.n_heads,
            text_layers=self.text_layers,
            ffn_dim=self.ffn_dim,
            fusion_blocks=self.fusion_blocks,
            scene_dim=self.scene_dim,
            object_dim=self.object_dim,
            objects_per_frame=self.objects_per_frame,
            max_text_tokens=self.max_text_tokens,
            max_frames=self.max_frames,
            anchor=self.anchor,
            nsp_classes=self.nsp_classes,
            single_stream_layers=self.single_stream_layers,
        )

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.base_lr, self.warmup_steps,
                          self.decay_interval, self.decay_factor)


# ---------------------------------------------------------------------------
# metrics and cost model
# ---------------------------------------------------------------------------


def recall_at_k(scores, true_index: int, k: int) -> int:
    """1 iff the true candidate ranks in the top k (ties: lower index wins)."""
    s = np.asarray(scores, dtype=np.float64)
    m = s.shape[0]
    if not (0 <= true_index < m):
        raise ContractError(f"recall_at_k: true index {true_index} outside 0..{m - 1}")
    if not (1 <= k <= m):
        raise ContractError(f"recall_at_k: k={k} outside 1..{m}")
    return 1 if candidate_rank(s, true_index) <= k else 0


def candidate_rank(scores, true_index: int) -> int:
    """1-based descending rank of the true candidate, lower index first."""
    s = np.asarray(scores, dtype=np.float64)
    t = s[true_index]
    ahead = int((s > t).sum()) + int((s[:true_index] == t).sum())
    return ahead + 1


def _trm_macs(q: int, k: int, d: int, f: int) -> int:
    """Projections + attention + FFN multiply-accumulates for one TRM."""
    return (2 * q + 2 * k) * d * d + 2 * q * k * d + 2 * q * d * f


def estimate_flops(config: RunConfig, fusion_blocks: Optional[int] = None) -> dict:
    """Analytic per-example MAC counts for both visual-token layouts."""
    d = config.model_dim
    f = config.ffn_dim if config.ffn_dim is not None else 4 * d
    n_w = config.max_text_tokens
    n_f = config.max_frames
    ell = config.objects_per_frame
    s = config.fusion_blocks if fusion_blocks is None else fusion_blocks

    text_enc = config.text_layers * _trm_macs(n_w, n_w, d, f)
    combine = n_f * ell * ((config.object_dim + config.scene_dim) * d + d * d + 4 * d)
    targets = (n_f - 1) * ell
    if n_f > 1:
        compact = (2 * ell + 2 * targets) * d * d + 2 * ell * targets * d + 2 * ell * d * d
    else:
        compact = 2 * ell * d * d

    def fusion_macs(visual_tokens: int) -> int:
        per_block = (
            _trm_macs(visual_tokens, n_w, d, f)
            + _trm_macs(visual_tokens, visual_tokens, d, f)
            + _trm_macs(n_w, visual_tokens, d, f)
            + _trm_macs(n_w, n_w, d, f)
        )
        return s * per_block

    with_compact = {
        "text_encoder": text_enc,
        "combine": combine,
        "compact_extraction": compact,
        "fusion": fusion_macs(ell),
    }
    without_compact = {
        "text_encoder": text_enc,
        "combine": combine,
        "compact_extraction": 0,
        "fusion": fusion_macs(n_f * ell),
    }
    with_compact["total"] = sum(with_compact.values())
    without_compact["total"] = sum(without_compact.values())
    reduction = 1.0 - with_compact["total"] / without_compact["total"]
    return {
        "fusion_blocks": s,
        "visual_tokens": {"with_compact": ell, "without_compact": n_f * ell},
        "with_compact": with_compact,
        "without_compact": without_compact,
        "reduction_pct": 100.0 * reduction,
    }


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------


def save_checkpoint(path, named_arrays) -> None:
    """Tagged little-endian binary: magic, version, then per-parameter
    records (name, rank, extents, float64 row-major values)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, arr in named_arrays:
            arr = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from None
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"checkpoint {path}: bad magic, not a parameter file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"checkpoint {path}: unsupported format version {version}")
    ofs = 8
    out: dict[str, np.ndarray] = {}
    while ofs < len(blob):
        try:
            (nlen,) = struct.unpack_from("<I", blob, ofs)
            ofs += 4
            name = blob[ofs:ofs + nlen].decode("utf-8")
            ofs += nlen
            (rank,) = struct.unpack_from("<I", blob, ofs)
            ofs += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, ofs)
            ofs += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=ofs).copy()
            ofs += 8 * count
        except (struct.error, UnicodeDecodeError, ValueError) as e:
            raise DataError(f"checkpoint {path}: truncated or corrupt record: {e}") from None
        out[name] = arr.reshape(shape)
    return out


# ---------------------------------------------------------------------------
# data plumbing shared by train/evaluate
# ---------------------------------------------------------------------------


def _require(path: Optional[str], what: str) -> str:
    if path is None:
        raise ConfigError(f"config is missing the {what} path")
    if not Path(path).exists():
        raise DataError(f"{what} file not found: {path}")
    return path


def _corpus_of(examples) -> list[str]:
    corpus = []
    for ex in examples:
        corpus.append(ex.context_text)
        corpus.append(ex.future)
    return corpus


@dataclass
class EvalData:
    examples: list
    features: dict
    candidate_sets: dict


def _load_eval_data(config: RunConfig, needs_visual: bool) -> EvalData:
    examples = data_mod.read_examples(_require(config.eval_examples, "eval_examples"))
    candidates = data_mod.read_candidates(_require(config.eval_candidates, "eval_candidates"))
    features = {}
    if needs_visual:
        features = load_features_file(
            _require(config.eval_features, "eval_features"), config.objects_per_frame
        )
    missing = [ex.clip_id for ex in examples if ex.clip_id not in candidates]
    if missing:
        raise DataError(f"candidates missing for {len(missing)} clips, e.g. {missing[0]!r}")
    return EvalData(examples, features, candidates)


def evaluate_model(model, vocab: Vocab, eval_data: EvalData,
                   config: RunConfig) -> tuple[float, float, list[int]]:
    """Mean R@1/R@5 plus per-example ranks; deterministic and read-only."""
    r1_sum = 0
    r5_sum = 0
    ranks: list[int] = []
    cand_cache: dict[str, np.ndarray] = {}
    with ad.no_grad():
        for ex in eval_data.examples:
            tokens = tokenize(ex.context_text, vocab, config.max_text_tokens)
            clip = eval_data.features.get(ex.clip_id) if model.uses_visual else None
            if model.uses_visual and clip is None:
                raise DataError(f"features missing for clip {ex.clip_id!r}")
            pooled = model.forward_clip(tokens, clip)[0].data
            cs = eval_data.candidate_sets[ex.clip_id]
            vecs = []
            for u in cs.utterances:
                v = cand_cache.get(u)
                if v is None:
                    v = model.encode_candidates([u], vocab).data[0]
                    cand_cache[u] = v
                vecs.append(v)
            scores = np.asarray(vecs) @ pooled[0]
            m = len(cs.utterances)
            rank = candidate_rank(scores, cs.true_index)
            ranks.append(rank)
            r1_sum += recall_at_k(scores, cs.true_index, 1)
            r5_sum += recall_at_k(scores, cs.true_index, min(5, m))
    n = max(1, len(eval_data.examples))
    return r1_sum / n, r5_sum / n, ranks


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    report: MetricReport
    model: object
    vocab: Vocab
    losses: list = field(default_factory=list)  # per-step total, float64
    checkpoint_path: Optional[Path] = None
    vocab_path: Optional[Path] = None


def _build_batch(model, vocab, examples, features, config, mask_rng):
    pooled_rows = []
    states_and_plans = []
    futures = []
    do_mlm = config.w_mlm > 0.0 and model.uses_text
    for ex in examples:
        tokens = tokenize(ex.context_text, vocab, config.max_text_tokens)
        if do_mlm:
            tokens, plan = apply_mlm_mask(
                tokens, mask_rng, len(vocab), config.mlm_select_p
            )
        else:
            plan = None
        clip = None
        if model.uses_visual:
            clip = features.get(ex.clip_id)
            if clip is None:
                raise DataError(f"features missing for clip {ex.clip_id!r}")
        pooled, states = model.forward_clip(tokens, clip)
        pooled_rows.append(pooled)
        if plan is not None:
            states_and_plans.append((states, plan))
        futures.append(ex.future)
    return pooled_rows, states_and_plans, futures


def _loss_for_batch(model, vocab, pooled_rows, states_and_plans, futures,
                    config: RunConfig) -> LossBundle:
    pooled = ad.concat_rows(pooled_rows)
    cand = model.encode_candidates(futures, vocab)
    nup = in_batch_nup_loss(pooled, cand)
    if states_and_plans:
        mlm = mlm_loss_batch(states_and_plans, model.mlm_head)
    else:
        mlm = ad.tensor(0.0)
    return make_loss_bundle(nup, mlm, config.w_nup, config.w_mlm)


def train(config: RunConfig, out_dir=None, log=None) -> TrainResult:
    """Seeded end-to-end training; writes checkpoint/vocab/report when
    out_dir is given. steps=0 produces the initial checkpoint and eval only."""
    rng = SeededRng(config.seed)
    examples = data_mod.read_examples(_require(config.train_examples, "train_examples"))
    if not examples:
        raise DataError("train_examples file holds no examples")

    if config.vocab:
        vocab = Vocab.load(_require(config.vocab, "vocab"))
    else:
        vocab = build_vocab(_corpus_of(examples), config.min_count)

    mcfg = config.model_config(len(vocab))
    model = build_model(config.variant, mcfg, rng.child(STREAM_INIT))

    features: dict[str, ClipFeatures] = {}
    if model.uses_visual:
        features = load_features_file(
            _require(config.train_features, "train_features"), config.objects_per_frame
        )

    if config.init_encoder_weights:
        state = load_checkpoint(_require(config.init_encoder_weights, "init_encoder_weights"))
        loaded = model.load_state(state, strict=False)
        if log:
            log(f"loaded {len(loaded)} parameter tensors from {config.init_encoder_weights}")

    eval_data = None
    if config.eval_examples:
        eval_data = _load_eval_data(config, model.uses_visual)

    schedule = config.schedule()
    opt = OptimizerState()
    data_rng = rng.child(STREAM_DATA)
    mask_rng = rng.child(STREAM_MASK)

    curve = {"step": [], "nup": [], "mlm": [], "total": [], "lr": []}
    checkpoints = []
    losses = []
    order: list[int] = []
    named_params = model.named_parameters()
    t_start = time.perf_counter()
    stop_early = False

    for step in range(1, config.steps + 1):
        if len(order) < config.batch_size:
            order = list(data_rng.permutation(len(examples)))
        batch_ids = [order.pop() for _ in range(min(config.batch_size, len(examples)))]
        batch = [examples[i] for i in batch_ids]

        pooled_rows, states_and_plans, futures = _build_batch(
            model, vocab, batch, features, config, mask_rng
        )
        bundle = _loss_for_batch(model, vocab, pooled_rows, states_and_plans,
                                 futures, config)
        total = bundle.total.item()
        if not np.isfinite(total):
            raise NumericError(f"step {step}: non-finite training loss {total}")

        model.zero_grads()
        ad.backward(bundle.total, model.parameters())
        lr = lr_at_step(schedule, step)
        try:
            adam_step(named_params, opt, lr)
        except NumericError as e:
            raise NumericError(f"step {step}: {e}") from None

        losses.append(total)
        curve["step"].append(step)
        curve["nup"].append(bundle.nup_loss.item())
        curve["mlm"].append(bundle.mlm_loss.item())
        curve["total"].append(total)
        curve["lr"].append(lr)

        if eval_data and config.eval_every > 0 and step % config.eval_every == 0:
            r1, r5, _ = evaluate_model(model, vocab, eval_data, config)
            checkpoints.append({"step": step, "r1": r1, "r5": r5})
            if log:
                log(f"step {step}: loss {total:.4f}  R@1 {r1:.3f}  R@5 {r5:.3f}")
            if config.early_stop_r1 is not None and r1 >= config.early_stop_r1:
                stop_early = True
        elif log and step % max(1, config.eval_every) == 0:
            log(f"step {step}: loss {total:.4f}")
        if stop_early:
            break

    elapsed = time.perf_counter() - t_start
    steps_done = len(losses)

    final_r1, final_r5, ranks = 0.0, 0.0, []
    n_eval = 0
    if eval_data:
        final_r1, final_r5, ranks = evaluate_model(model, vocab, eval_data, config)
        n_eval = len(eval_data.examples)
        if not checkpoints or checkpoints[-1]["step"] != steps_done:
            checkpoints.append({"step": steps_done, "r1": final_r1, "r5": final_r5})

    report = MetricReport(
        final_r1=final_r1,
        final_r5=final_r5,
        n_eval=n_eval,
        checkpoints=checkpoints,
        loss_curve=curve,
        steps_per_second=steps_done / elapsed if elapsed > 0 else 0.0,
        flops=estimate_flops(config),
        config=config.to_dict(),
        ranks=ranks,
    )

    result = TrainResult(report, model, vocab, losses)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint_path = out_dir / "checkpoint.bin"
        save_checkpoint(result.checkpoint_path,
                        [(n, p.data) for n, p in model.named_parameters()])
        result.vocab_path = out_dir / "vocab.txt"
        vocab.save(result.vocab_path)
    return result


def evaluate(config: RunConfig, checkpoint_path, vocab_path=None) -> MetricReport:
    """Load a checkpoint against the config shapes and score the eval files."""
    checkpoint_path = Path(checkpoint_path)
    if vocab_path is None:
        vocab_path = checkpoint_path.parent / "vocab.txt"
    if not Path(vocab_path).exists():
        raise DataError(f"vocab file not found: {vocab_path}")
    vocab = Vocab.load(vocab_path)
    model = build_model(config.variant, config.model_config(len(vocab)),
                        SeededRng(config.seed, STREAM_INIT))
    state = load_checkpoint(checkpoint_path)
    try:
        model.load_state(state, strict=True)
    except ContractError as e:
        raise DataError(f"checkpoint does not match config shapes: {e}") from None
    eval_data = _load_eval_data(config, model.uses_visual)
    r1, r5, ranks = evaluate_model(model, vocab, eval_data, config)
    return MetricReport(
        final_r1=r1,
        final_r5=r5,
        n_eval=len(eval_data.examples),
        flops=estimate_flops(config),
        config=config.to_dict(),
        ranks=ranks,
    )


# ---------------------------------------------------------------------------
# gradient check driver
# ---------------------------------------------------------------------------


def gradcheck(config: RunConfig, n_samples: int = 200, h: float = 1e-5,
              warmup_steps: int = 60, warmup_lr: float = 3e-3) -> dict:
    """Finite-difference check of the full model loss on a tiny fixed batch.

    The model is first warmed up with a few optimizer steps over a small
    rotating example pool: at a near-zero random init most gradient
    coordinates sit at the float64 cancellation floor of the difference
    quotient, so the check runs at a non-degenerate parameter point (the
    pool is larger than one batch so the warmup cannot collapse the loss
    to zero by memorizing the checked batch).
    """
    rng = SeededRng(config.seed)
    spec = data_mod.SyntheticSpec(
        topics=max(4, 2 * config.batch_size),
        candidates=2,
        noise=0.25,
        frames_per_clip=min(3, config.max_frames),
        objects_per_frame=config.objects_per_frame,
        scene_dim=config.scene_dim,
        object_dim=config.object_dim,
    )
    pool = data_mod.synth_generate(
        spec, max(16, 8 * config.batch_size), rng.child(STREAM_SYNTH)
    )
    vocab = build_vocab(_corpus_of(pool.examples), 1)
    model = build_model(config.variant, config.model_config(len(vocab)),
                        rng.child(STREAM_INIT))
    mask_rng = rng.child(STREAM_MASK)

    def prepare(ex):
        tokens = tokenize(ex.context_text, vocab, config.max_text_tokens)
        if model.uses_text:
            masked, plan = apply_mlm_mask(tokens, mask_rng, len(vocab), select_p=0.5)
            if len(plan) == 0:
                masked, plan = apply_mlm_mask(tokens, mask_rng, len(vocab), select_p=1.0)
        else:
            masked, plan = tokens, None
        clip = pool.features[ex.clip_id] if model.uses_visual else None
        return masked, plan, clip, ex.future

    def batch_loss(prepared):
        pooled_rows, states_and_plans, futures = [], [], []
        for masked, plan, clip, future in prepared:
            pooled, states = model.forward_clip(masked, clip)
            pooled_rows.append(pooled)
            if plan is not None:
                states_and_plans.append((states, plan))
            futures.append(future)
        return _loss_for_batch(model, vocab, pooled_rows, states_and_plans,
                               futures, config).total

    opt = OptimizerState()
    named = model.named_parameters()
    data_rng = rng.child(STREAM_DATA)
    order: list[int] = []
    for _ in range(warmup_steps):
        if len(order) < config.batch_size:
            order = list(data_rng.permutation(len(pool.examples)))
        batch = [pool.examples[order.pop()] for _ in range(config.batch_size)]
        model.zero_grads()
        ad.backward(batch_loss([prepare(ex) for ex in batch]), model.parameters())
        adam_step(named, opt, warmup_lr)

    # checked batch: pairwise-distinct futures, else the in-batch ranking
    # term is provably flat and checks nothing
    picked, seen = [], set()
    for ex in pool.examples:
        if ex.future not in seen:
            seen.add(ex.future)
            picked.append(ex)
        if len(picked) == config.batch_size:
            break
    fixed = [prepare(ex) for ex in picked]

    def loss_fn():
        return batch_loss(fixed)

    out = finite_diff_check(loss_fn, named, h=h,
                            n_samples=n_samples, rng=rng.child(STREAM_CHECK))
    out["variant"] = config.variant
    out["passed"] = bool(out["max_rel_error"] < 1e-4)
    return out
