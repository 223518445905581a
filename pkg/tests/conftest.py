import pytest

from comvt import data as data_mod
from comvt.harness import RunConfig
from comvt.rng import SeededRng


@pytest.fixture
def tiny_rng():
    return SeededRng(1234)


def make_synth_files(tmp_path, n_train=60, n_eval=30, seed=3, **spec_kw):
    """Small synthetic dataset on disk plus the path dict for a RunConfig."""
    kw = dict(topics=6, candidates=4, noise=0.1, frames_per_clip=3,
              objects_per_frame=2, scene_dim=16, object_dim=16)
    kw.update(spec_kw)
    spec = data_mod.SyntheticSpec(**kw)
    rng = SeededRng(seed, 99)
    train = data_mod.synth_generate(spec, n_train, rng)
    eval_ = data_mod.synth_generate(spec, n_eval, rng)
    paths = {
        "train_examples": tmp_path / "train_examples.jsonl",
        "train_features": tmp_path / "train_features.jsonl",
        "eval_examples": tmp_path / "eval_examples.jsonl",
        "eval_features": tmp_path / "eval_features.jsonl",
        "eval_candidates": tmp_path / "eval_candidates.jsonl",
    }
    data_mod.write_examples(paths["train_examples"], train.examples)
    data_mod.write_features(paths["train_features"], train.features)
    data_mod.write_examples(paths["eval_examples"], eval_.examples)
    data_mod.write_features(paths["eval_features"], eval_.features)
    data_mod.write_candidates(paths["eval_candidates"], eval_.candidate_sets)
    return spec, train, eval_, {k: str(v) for k, v in paths.items()}


def tiny_config(paths=None, **kw):
    base = dict(variant="comvt", seed=9, model_dim=16, n_heads=2, text_layers=1,
                fusion_blocks=1, scene_dim=16, object_dim=16, objects_per_frame=2,
                max_text_tokens=20, max_frames=3, batch_size=4, steps=10,
                warmup_steps=5, eval_every=0)
    if paths:
        base.update(paths)
    base.update(kw)
    return RunConfig(**base)
