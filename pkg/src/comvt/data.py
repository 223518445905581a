"""Dataset construction: clip segmentation, candidate pools, and the
synthetic vision-dependent benchmark.

File formats (all JSON Lines, UTF-8):
  transcripts : {"video_id": str, "sentences": [{"text", "start_s", "end_s"}]}
  examples    : one future-utterance example per line
  candidates  : {"clip_id": str, "candidates": [str x M], "true_index": int}
  features    : see visual.load_features_file
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError
from .rng import SeededRng


@dataclass
class TimedSentence:
    text: str
    start_s: float
    end_s: float

    def __post_init__(self):
        if self.end_s <= self.start_s:
            raise ContractError(
                f"TimedSentence: end {self.end_s} must exceed start {self.start_s}"
            )


@dataclass
class FupExample:
    context: list[TimedSentence]
    future: str
    clip_span: tuple[float, float]
    clip_id: str

    @property
    def context_text(self) -> str:
        return " ".join(s.text for s in self.context)


@dataclass
class NspExample:
    context: list[TimedSentence]
    clip_span: tuple[float, float]
    step_class: int
    clip_id: str


@dataclass
class CandidateSet:
    """Ordered utterance pool with exactly one true element (0-based index)."""

    utterances: list[str]
    true_index: int

    def __post_init__(self):
        m = len(self.utterances)
        if m < 1 or not (0 <= self.true_index < m):
            raise ContractError(f"CandidateSet: true_index {self.true_index} outside pool of {m}")
        truth = self.utterances[self.true_index]
        if any(u == truth for i, u in enumerate(self.utterances) if i != self.true_index):
            raise ContractError("CandidateSet: true utterance duplicated among negatives")


def _check_time_ordered(sentences: list[TimedSentence]) -> None:
    for a, b in zip(sentences, sentences[1:]):
        if b.start_s < a.end_s:
            raise ContractError(
                f"transcript sentences overlap or are unordered at t={b.start_s}"
            )


def segment_clips(
    transcript: list[TimedSentence],
    min_duration: float = 5.0,
    keep_short: bool = False,
    video_id: str = "video",
) -> list[FupExample]:
    """Backward-growing clip per future sentence.

    For each sentence k >= 1 (0-based) as the future utterance, the context
    starts at sentence k-1 and expands backward until the span
    end(k-1) - start(first) strictly exceeds min_duration. Contexts that
    exhaust the prefix without exceeding it are dropped unless keep_short.
    """
    _check_time_ordered(transcript)
    out = []
    for k in range(1, len(transcript)):
        end = transcript[k - 1].end_s
        first = k - 1
        while end - transcript[first].start_s <= min_duration and first > 0:
            first -= 1
        if end - transcript[first].start_s <= min_duration and not keep_short:
            continue
        context = transcript[first:k]
        out.append(
            FupExample(
                context=context,
                future=transcript[k].text,
                clip_span=(transcript[first].start_s, end),
                clip_id=f"{video_id}:{k}",
            )
        )
    return out


def sample_candidates(
    example: FupExample,
    pool: list[str],
    rng: SeededRng,
    m: int = 100,
) -> CandidateSet:
    """True utterance at a random slot among m-1 distinct sampled negatives."""
    if m < 1:
        raise ContractError(f"sample_candidates: m {m} < 1")
    negatives_pool = sorted({u for u in pool if u != example.future})
    if len(negatives_pool) < m - 1:
        raise DataError(
            f"sample_candidates: need {m - 1} distinct negatives, pool has "
            f"{len(negatives_pool)} (short by {m - 1 - len(negatives_pool)})"
        )
    chosen = list(rng.choice(len(negatives_pool), size=m - 1, replace=False))
    negatives = [negatives_pool[int(i)] for i in chosen]
    true_index = int(rng.integers(0, m))
    utterances = negatives[:true_index] + [example.future] + negatives[true_index:]
    return CandidateSet(utterances, true_index)


def subsample_eval(examples: list, rng: SeededRng, fraction: float = 0.06) -> list:
    """Uniform without-replacement subsample of round(fraction * n) items."""
    if not (0.0 < fraction <= 1.0):
        raise ContractError(f"subsample_eval: fraction {fraction} outside (0, 1]")
    n = len(examples)
    take = int(round(fraction * n))
    idx = sorted(int(i) for i in rng.choice(n, size=take, replace=False))
    return [examples[i] for i in idx]


def make_nsp_examples(
    transcript: list[TimedSentence],
    step_annotations: list[tuple[int, float, float]],
    min_duration: float = 5.0,
) -> list[NspExample]:
    """One example per step annotation with a nonempty preceding context.

    Context sentences end at or before the step start and expand backward
    by the same rule as segment_clips; short-prefix contexts are kept as
    long as they contain at least one sentence.
    """
    _check_time_ordered(transcript)
    for (a, b) in zip(step_annotations, step_annotations[1:]):
        if b[1] < a[1]:
            raise ContractError("step annotations must be time-ordered")
    out = []
    for n, (cls, start_s, _end_s) in enumerate(step_annotations):
        preceding = [s for s in transcript if s.end_s <= start_s]
        if not preceding:
            continue
        end = preceding[-1].end_s
        first = len(preceding) - 1
        while end - preceding[first].start_s <= min_duration and first > 0:
            first -= 1
        context = preceding[first:]
        out.append(
            NspExample(
                context=context,
                clip_span=(context[0].start_s, end),
                step_class=int(cls),
                clip_id=f"nsp:{n}",
            )
        )
    return out


def truncate_inputs(
    tokens: list,
    frames: list,
    max_tokens: int = 128,
    max_frames: int = 30,
) -> tuple[list, list]:
    """Keep the last elements of both sequences; the token budget reserves
    two slots for the start/end specials."""
    if max_tokens < 3 or max_frames < 1:
        raise ContractError("truncate_inputs: limits too small")
    body_budget = max_tokens - 2
    if len(tokens) > body_budget:
        tokens = tokens[-body_budget:]
    if len(frames) > max_frames:
        frames = frames[-max_frames:]
    return tokens, frames


# ---------------------------------------------------------------------------
# synthetic vision-dependent benchmark
# ---------------------------------------------------------------------------

TOPIC_WORDS = [
    "anvil", "brush", "chisel", "drill", "easel", "funnel", "gimlet", "hammer",
    "iron", "jigsaw", "knife", "ladle", "mallet", "needle", "oven", "pliers",
    "quill", "rasp", "spanner", "trowel", "vise", "whisk", "wrench", "zester",
]

FILLER_SENTENCES = [
    "okay let us keep going",
    "now watch closely please",
    "so this is the part",
    "alright here we are again",
    "take your time with it",
    "and that is looking fine",
    "just like before really",
    "one more thing to see",
]


@dataclass
class SyntheticSpec:
    """Controls for the verification benchmark generator.

    Topic feature directions are keyed by direction_seed alone, so every
    dataset drawn from an equal spec (train and eval splits in particular)
    lives in the same feature space.
    """

    topics: int = 10
    candidates: int = 10
    noise: float = 0.1
    frames_per_clip: int = 4
    objects_per_frame: int = 2
    scene_dim: int = 32
    object_dim: int = 32
    leak_topic_into_text: bool = False
    sentences_per_context: int = 3
    sentence_seconds: float = 2.0
    direction_seed: int = 0

    def __post_init__(self):
        if self.topics < 2:
            raise ContractError("SyntheticSpec: need at least 2 topics")
        if self.candidates > self.topics:
            raise ContractError("SyntheticSpec: candidates must not exceed topics")
        if self.noise < 0:
            raise ContractError("SyntheticSpec: negative noise scale")


def topic_word(z: int) -> str:
    return TOPIC_WORDS[z] if z < len(TOPIC_WORDS) else f"tool{z}"


def topic_utterance(z: int) -> str:
    return f"next we use the {topic_word(z)}"


def _topic_directions(k: int, dim: int, rng: SeededRng) -> np.ndarray:
    """k near-orthonormal unit rows."""
    a = rng.normal(0.0, 1.0, (dim, max(k, 1)))
    if dim >= k:
        q, _ = np.linalg.qr(a)
        return q[:, :k].T.copy()
    rows = a.T[:k]
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


@dataclass
class SyntheticDataset:
    examples: list[FupExample]
    features: dict  # clip_id -> visual.ClipFeatures
    candidate_sets: dict[str, CandidateSet]
    topics: list[int] = field(repr=False, default_factory=list)


def synth_generate(spec: SyntheticSpec, n_examples: int, rng: SeededRng) -> SyntheticDataset:
    """Examples whose future utterance is recoverable from vision alone.

    Each example draws a topic z; scene and object vectors are that topic's
    direction plus isotropic noise. The transcript is filler text carrying
    no topic information unless leak_topic_into_text is set, and the
    candidate pool is the true template plus other topics' templates.
    """
    from .visual import ClipFeatures  # local import to avoid a cycle

    dir_rng = SeededRng(spec.direction_seed, stream=970)
    mu_scene = _topic_directions(spec.topics, spec.scene_dim, dir_rng)
    mu_obj = _topic_directions(spec.topics, spec.object_dim, dir_rng)
    examples: list[FupExample] = []
    features: dict[str, ClipFeatures] = {}
    candidate_sets: dict[str, CandidateSet] = {}
    topics: list[int] = []
    n_fill = len(FILLER_SENTENCES)
    for i in range(n_examples):
        z = int(rng.integers(0, spec.topics))
        topics.append(z)
        clip_id = f"synth-{i:06d}"
        sentences = []
        for s in range(spec.sentences_per_context):
            text = FILLER_SENTENCES[int(rng.integers(0, n_fill))]
            if spec.leak_topic_into_text and s == spec.sentences_per_context - 1:
                text = f"{text} {topic_word(z)}"
            t0 = s * spec.sentence_seconds
            sentences.append(TimedSentence(text, t0, t0 + spec.sentence_seconds))
        future = topic_utterance(z)
        span = (sentences[0].start_s, sentences[-1].end_s)
        examples.append(FupExample(sentences, future, span, clip_id))

        f = spec.frames_per_clip
        ell = spec.objects_per_frame
        scene = mu_scene[z] + spec.noise * rng.normal(0.0, 1.0, (f, spec.scene_dim))
        objects = mu_obj[z] + spec.noise * rng.normal(0.0, 1.0, (f, ell, spec.object_dim))
        x0 = rng.uniform(0.0, 0.5, (f, ell))
        y0 = rng.uniform(0.0, 0.5, (f, ell))
        boxes = np.stack(
            [x0, y0, x0 + rng.uniform(0.1, 0.5, (f, ell)), y0 + rng.uniform(0.1, 0.5, (f, ell))],
            axis=2,
        )
        features[clip_id] = ClipFeatures(
            clip_id, scene, objects, boxes, np.arange(1, f + 1, dtype=np.intp)
        )

        others = [t for t in range(spec.topics) if t != z]
        chosen = rng.choice(len(others), size=spec.candidates - 1, replace=False)
        negatives = [topic_utterance(others[int(c)]) for c in chosen]
        t_idx = int(rng.integers(0, spec.candidates))
        pool = negatives[:t_idx] + [future] + negatives[t_idx:]
        candidate_sets[clip_id] = CandidateSet(pool, t_idx)
    return SyntheticDataset(examples, features, candidate_sets, topics)


# ---------------------------------------------------------------------------
# JSONL serialization
# ---------------------------------------------------------------------------


def _write_jsonl(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_transcripts(path) -> list[tuple[str, list[TimedSentence]]]:
    out = []
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                video_id = rec["video_id"]
                sentences = [
                    TimedSentence(s["text"], float(s["start_s"]), float(s["end_s"]))
                    for s in rec["sentences"]
                ]
            except (json.JSONDecodeError, KeyError, TypeError, ContractError) as e:
                raise DataError(f"{path}:{lineno}: bad transcript record: {e}") from None
            out.append((video_id, sentences))
    return out


def write_examples(path, examples: list[FupExample]) -> None:
    _write_jsonl(path, (
        {
            "clip_id": ex.clip_id,
            "context": [
                {"text": s.text, "start_s": s.start_s, "end_s": s.end_s}
                for s in ex.context
            ],
            "future": ex.future,
            "clip_span": list(ex.clip_span),
        }
        for ex in examples
    ))


def read_examples(path) -> list[FupExample]:
    out = []
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                ctx = [
                    TimedSentence(s["text"], float(s["start_s"]), float(s["end_s"]))
                    for s in rec["context"]
                ]
                out.append(FupExample(
                    ctx, rec["future"], tuple(rec["clip_span"]), rec["clip_id"]
                ))
            except (json.JSONDecodeError, KeyError, TypeError, ContractError) as e:
                raise DataError(f"{path}:{lineno}: bad example record: {e}") from None
    return out


def write_candidates(path, candidate_sets: dict[str, CandidateSet]) -> None:
    _write_jsonl(path, (
        {"clip_id": cid, "candidates": cs.utterances, "true_index": cs.true_index}
        for cid, cs in candidate_sets.items()
    ))


def read_candidates(path) -> dict[str, CandidateSet]:
    out = {}
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out[rec["clip_id"]] = CandidateSet(
                    list(rec["candidates"]), int(rec["true_index"])
                )
            except (json.JSONDecodeError, KeyError, TypeError, ContractError) as e:
                raise DataError(f"{path}:{lineno}: bad candidates record: {e}") from None
    return out


def write_features(path, features: dict) -> None:
    """Clip-features JSONL; floats serialized by json at full precision."""
    def records():
        for clip_id, clip in features.items():
            for f in range(clip.n_frames):
                yield {
                    "clip_id": clip_id,
                    "frame": int(clip.frame_indices[f]),
                    "scene": [float(x) for x in clip.scene[f]],
                    "objects": [
                        {
                            "box": [float(b) for b in clip.boxes[f, j]],
                            "feat": [float(x) for x in clip.objects[f, j]],
                        }
                        for j in range(clip.objects.shape[1])
                    ],
                }
    _write_jsonl(path, records())
