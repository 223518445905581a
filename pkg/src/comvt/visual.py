"""Visual-feature ingestion, combination, and compact set extraction.

Precomputed per-second scene vectors and per-frame object vectors (with
normalized boxes) arrive through a JSON-Lines file; the model-side ops fuse
each object with its aligned scene vector plus positional encoding, then
shrink the frames x slots grid to one anchor frame's worth of slots by
attending over every other frame.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DataError
from .layers import Linear, Module, TwoLayerMlp
from .rng import SeededRng


@dataclass
class SceneFeature:
    vector: np.ndarray
    temporal_index: int  # 1-based, one per second


@dataclass
class ObjectFeature:
    vector: np.ndarray
    box: tuple[float, float, float, float]  # (x0, y0, x1, y1) in [0, 1]
    frame_index: int
    slot: int


def validate_box(box, where: str = "box") -> tuple[float, float, float, float]:
    x0, y0, x1, y1 = (float(b) for b in box)
    if not (0.0 <= x0 <= x1 <= 1.0):
        raise ContractError(f"{where}: x order violated, x0={x0} x1={x1}")
    if not (0.0 <= y0 <= y1 <= 1.0):
        raise ContractError(f"{where}: y order violated, y0={y0} y1={y1}")
    return (x0, y0, x1, y1)


def sinusoidal_encoding(position: float, dim: int) -> np.ndarray:
    """Alternating sin/cos over dimension pairs, base 10000; value 0 -> [0,1,0,1,...]."""
    pe = np.empty(dim)
    half = (dim + 1) // 2
    freqs = np.exp(-math.log(10000.0) * (2.0 * np.arange(half) / dim))
    pe[0::2] = np.sin(position * freqs)
    pe[1::2] = np.cos(position * freqs[: dim // 2])
    return pe


class VisualParams(Module):
    """All trainable maps of the visual pipeline."""

    def __init__(self, scene_dim: int, object_dim: int, model_dim: int, rng: SeededRng):
        self.comb = TwoLayerMlp(object_dim + scene_dim, model_dim, model_dim, rng)
        self.box_proj = Linear(4, model_dim, rng, bias=False)
        self.query = Linear(model_dim, model_dim, rng, bias=False)
        self.key = Linear(model_dim, model_dim, rng, bias=False)
        self.value = Linear(model_dim, model_dim, rng, bias=False)
        self.output = Linear(model_dim, model_dim, rng, bias=False)
        self.proj = TwoLayerMlp(model_dim, model_dim, model_dim, rng)
        self.scene_dim = scene_dim
        self.object_dim = object_dim
        self.model_dim = model_dim


def positional_encoding(frame_index: int, box, params: VisualParams) -> Tensor:
    """sinusoid(temporal index) + linear(box corners)."""
    if frame_index < 1:
        raise ContractError(f"positional_encoding: frame index {frame_index} < 1")
    box = validate_box(box)
    sin = ad.tensor(sinusoidal_encoding(float(frame_index), params.model_dim)[None, :])
    return ad.add(sin, params.box_proj(ad.tensor(np.asarray(box)[None, :])))


def combine_features(o: ObjectFeature, m: SceneFeature, params: VisualParams) -> Tensor:
    """Perceptron over [object; scene] plus positional encoding (one row)."""
    if o.frame_index != m.temporal_index:
        raise ContractError(
            f"combine_features: object frame {o.frame_index} vs scene index {m.temporal_index}"
        )
    cat = ad.tensor(np.concatenate([o.vector, m.vector])[None, :])
    return ad.add(params.comb(cat), positional_encoding(o.frame_index, o.box, params))


def combine_grid(
    scene: np.ndarray,
    objects: np.ndarray,
    boxes: np.ndarray,
    frame_indices: np.ndarray,
    params: VisualParams,
) -> Tensor:
    """Combined features for a whole clip, frame-major: row f*L+j."""
    n_frames, n_slots, d_obj = objects.shape
    if scene.shape[0] != n_frames:
        raise ContractError("combine_grid: scene/object frame counts differ")
    cat = np.concatenate(
        [objects.reshape(n_frames * n_slots, d_obj),
         np.repeat(scene, n_slots, axis=0)],
        axis=1,
    )
    combined = params.comb(ad.tensor(cat))
    sin = np.stack([
        sinusoidal_encoding(float(frame_indices[f]), params.model_dim)
        for f in range(n_frames)
    ])
    sin = np.repeat(sin, n_slots, axis=0)
    pos = ad.add(params.box_proj(ad.tensor(boxes.reshape(-1, 4))), ad.tensor(sin))
    return ad.add(combined, pos)


def compact_extract(
    grid: Tensor,
    n_frames: int,
    n_slots: int,
    anchor: int,
    params: VisualParams,
) -> Tensor:
    """Anchor-frame slots enriched by attention over all other frames.

    grid holds combined features frame-major, shape (n_frames*n_slots, d);
    anchor is the 1-based frame position within the grid. Returns exactly
    n_slots rows regardless of n_frames; with a single frame the attended
    term is absent.
    """
    if not (1 <= anchor <= n_frames):
        raise ContractError(f"compact_extract: anchor {anchor} outside 1..{n_frames}")
    if grid.data.shape[0] != n_frames * n_slots:
        raise ContractError("compact_extract: grid shape disagrees with frames x slots")
    a0 = (anchor - 1) * n_slots
    anchor_rows = ad.gather_rows(grid, list(range(a0, a0 + n_slots)))
    if n_frames == 1:
        return params.proj(anchor_rows)
    target_idx = [f * n_slots + j
                  for f in range(n_frames) if f != anchor - 1
                  for j in range(n_slots)]
    targets = ad.gather_rows(grid, target_idx)
    attended = ad.scaled_dot_attention(
        params.query(anchor_rows), params.key(targets), params.value(targets)
    )
    return params.proj(ad.add(anchor_rows, params.output(attended)))


@dataclass
class ClipFeatures:
    """Per-clip arrays assembled from the features file."""

    clip_id: str
    scene: np.ndarray          # (F, scene_dim)
    objects: np.ndarray        # (F, L, object_dim)
    boxes: np.ndarray          # (F, L, 4)
    frame_indices: np.ndarray  # (F,) original 1-based temporal indices

    @property
    def n_frames(self) -> int:
        return int(self.scene.shape[0])

    def truncated(self, max_frames: int) -> "ClipFeatures":
        """Keep the last max_frames frames (mirrors text truncation)."""
        if max_frames < 1:
            raise ContractError(f"truncated: max_frames {max_frames} < 1")
        if self.n_frames <= max_frames:
            return self
        return ClipFeatures(
            self.clip_id,
            self.scene[-max_frames:],
            self.objects[-max_frames:],
            self.boxes[-max_frames:],
            self.frame_indices[-max_frames:],
        )


def load_features_file(path, objects_per_frame: int | None = None) -> dict[str, ClipFeatures]:
    """Parse a clip-features JSONL file into per-clip arrays.

    One frame per line, frames in temporal order and contiguous within a
    clip; every frame of a clip carries exactly the same object count and
    vector widths. Malformed records raise DataError naming line and field.
    """
    clips: dict[str, dict] = {}
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON: {e}") from None
            try:
                clip_id = rec["clip_id"]
                frame = rec["frame"]
                scene = rec["scene"]
                objects = rec["objects"]
            except (KeyError, TypeError) as e:
                raise DataError(f"{path}:{lineno}: missing field {e}") from None
            if not isinstance(frame, int) or frame < 1:
                raise DataError(f"{path}:{lineno}: field 'frame' must be an int >= 1")
            entry = clips.setdefault(
                clip_id, {"frames": [], "scene": [], "obj": [], "box": []}
            )
            if entry["frames"]:
                if frame != entry["frames"][-1] + 1:
                    raise DataError(
                        f"{path}:{lineno}: field 'frame': {frame} breaks contiguity "
                        f"after {entry['frames'][-1]} for clip {clip_id!r}"
                    )
                if len(scene) != len(entry["scene"][0]):
                    raise DataError(f"{path}:{lineno}: field 'scene': width changed mid-clip")
            if objects_per_frame is not None and len(objects) != objects_per_frame:
                raise DataError(
                    f"{path}:{lineno}: field 'objects': {len(objects)} objects, "
                    f"expected {objects_per_frame}"
                )
            if entry["obj"] and len(objects) != len(entry["obj"][0]):
                raise DataError(f"{path}:{lineno}: field 'objects': count changed mid-clip")
            frame_obj, frame_box = [], []
            for j, ob in enumerate(objects):
                try:
                    box = ob["box"]
                    feat = ob["feat"]
                except (KeyError, TypeError) as e:
                    raise DataError(f"{path}:{lineno}: object {j}: missing field {e}") from None
                if len(box) != 4:
                    raise DataError(f"{path}:{lineno}: object {j}: field 'box' needs 4 numbers")
                try:
                    box = validate_box(box, where=f"{path}:{lineno}: object {j} box")
                except ContractError as e:
                    raise DataError(str(e)) from None
                if frame_obj and len(feat) != len(frame_obj[0]):
                    raise DataError(f"{path}:{lineno}: object {j}: field 'feat': width varies")
                frame_obj.append(feat)
                frame_box.append(box)
            if entry["obj"] and frame_obj and len(frame_obj[0]) != len(entry["obj"][0][0]):
                raise DataError(f"{path}:{lineno}: field 'feat': width changed mid-clip")
            entry["frames"].append(frame)
            entry["scene"].append(scene)
            entry["obj"].append(frame_obj)
            entry["box"].append(frame_box)
    out = {}
    for clip_id, entry in clips.items():
        out[clip_id] = ClipFeatures(
            clip_id,
            np.asarray(entry["scene"], dtype=np.float64),
            np.asarray(entry["obj"], dtype=np.float64),
            np.asarray(entry["box"], dtype=np.float64),
            np.asarray(entry["frames"], dtype=np.intp),
        )
    return out


def load_features(
    path,
    clip_id: str | None = None,
    max_frames: int | None = None,
    objects_per_frame: int | None = None,
) -> tuple[list[SceneFeature], list[list[ObjectFeature]]]:
    """One clip's features as typed records, truncated keeping the last frames."""
    clips = load_features_file(path, objects_per_frame)
    if not clips:
        raise DataError(f"{path}: no frames found")
    if clip_id is None:
        if len(clips) != 1:
            raise DataError(f"{path}: {len(clips)} clips present, pass clip_id")
        clip = next(iter(clips.values()))
    else:
        if clip_id not in clips:
            raise DataError(f"{path}: clip {clip_id!r} not found")
        clip = clips[clip_id]
    if max_frames is not None:
        clip = clip.truncated(max_frames)
    scenes = [
        SceneFeature(clip.scene[f], int(clip.frame_indices[f]))
        for f in range(clip.n_frames)
    ]
    grid = [
        [
            ObjectFeature(
                clip.objects[f, j],
                tuple(clip.boxes[f, j]),
                int(clip.frame_indices[f]),
                j + 1,
            )
            for j in range(clip.objects.shape[1])
        ]
        for f in range(clip.n_frames)
    ]
    return scenes, grid
