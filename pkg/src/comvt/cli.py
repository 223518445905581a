"""Command-line entry point.

Subcommands: segment, synth, train, eval, flops, gradcheck. Output on
stdout is one JSON object per invocation; reports, figures and checkpoints
land in --out. Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data as data_mod
from . import harness
from .errors import ConfigError, ContractError, DataError, NumericError
from .report import write_report
from .rng import STREAM_SYNTH, SeededRng

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _load_config(args) -> harness.RunConfig:
    cfg = harness.RunConfig.from_json_file(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _cmd_segment(args) -> int:
    videos = data_mod.read_transcripts(args.transcripts)
    examples = []
    for video_id, sentences in videos:
        examples.extend(
            data_mod.segment_clips(
                sentences,
                min_duration=args.min_duration,
                keep_short=args.keep_short,
                video_id=video_id,
            )
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "examples.jsonl"
    data_mod.write_examples(path, examples)
    _emit({"videos": len(videos), "examples": len(examples), "out": str(path)})
    return EXIT_OK


def _cmd_synth(args) -> int:
    spec = data_mod.SyntheticSpec(
        topics=args.topics,
        candidates=args.candidates,
        noise=args.noise,
        frames_per_clip=args.frames,
        objects_per_frame=args.objects,
        scene_dim=args.scene_dim,
        object_dim=args.object_dim,
        leak_topic_into_text=args.leak,
    )
    rng = SeededRng(args.seed, STREAM_SYNTH)
    train_ds = data_mod.synth_generate(spec, args.train_n, rng)
    eval_ds = data_mod.synth_generate(spec, args.eval_n, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "train_examples": out / "train_examples.jsonl",
        "train_features": out / "train_features.jsonl",
        "eval_examples": out / "eval_examples.jsonl",
        "eval_features": out / "eval_features.jsonl",
        "eval_candidates": out / "eval_candidates.jsonl",
    }
    data_mod.write_examples(paths["train_examples"], train_ds.examples)
    data_mod.write_features(paths["train_features"], train_ds.features)
    data_mod.write_examples(paths["eval_examples"], eval_ds.examples)
    data_mod.write_features(paths["eval_features"], eval_ds.features)
    data_mod.write_candidates(paths["eval_candidates"], eval_ds.candidate_sets)
    manifest = {k: str(v) for k, v in paths.items()}
    manifest.update({
        "train_n": args.train_n,
        "eval_n": args.eval_n,
        "topics": spec.topics,
        "candidates": spec.candidates,
        "noise": spec.noise,
        "leak": spec.leak_topic_into_text,
        "seed": args.seed,
    })
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n",
                                       encoding="utf-8")
    _emit(manifest)
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    result = harness.train(cfg, out_dir=args.out, log=log)
    write_report(args.out, result.report)
    _emit({
        "final_r1": result.report.final_r1,
        "final_r5": result.report.final_r5,
        "steps": len(result.losses),
        "final_loss": result.losses[-1] if result.losses else None,
        "checkpoint": str(result.checkpoint_path),
        "out": str(args.out),
    })
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    report = harness.evaluate(cfg, args.checkpoint, args.vocab)
    if args.out:
        write_report(args.out, report, stem="eval_report")
    _emit(report.to_dict())
    return EXIT_OK


def _cmd_flops(args) -> int:
    cfg = _load_config(args)
    _emit(harness.estimate_flops(cfg))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    out = harness.gradcheck(cfg, n_samples=args.samples)
    _emit(out)
    return EXIT_OK if out["passed"] else EXIT_NUMERIC


def _build_parser() -> _Parser:
    p = _Parser(prog="comvt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("segment", help="transcripts -> future-utterance examples")
    sp.add_argument("--transcripts", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--min-duration", type=float, default=5.0)
    sp.add_argument("--keep-short", action="store_true")
    sp.set_defaults(fn=_cmd_segment)

    sp = sub.add_parser("synth", help="generate the synthetic benchmark")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--topics", type=int, default=10)
    sp.add_argument("--candidates", type=int, default=10)
    sp.add_argument("--noise", type=float, default=0.1)
    sp.add_argument("--frames", type=int, default=4)
    sp.add_argument("--objects", type=int, default=2)
    sp.add_argument("--scene-dim", type=int, default=32)
    sp.add_argument("--object-dim", type=int, default=32)
    sp.add_argument("--leak", action="store_true")
    sp.add_argument("--train-n", type=int, default=2000)
    sp.add_argument("--eval-n", type=int, default=500)
    sp.set_defaults(fn=_cmd_synth)

    sp = sub.add_parser("train", help="train per config, emit checkpoint + report")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--verbose", action="store_true")
    sp.set_defaults(fn=_cmd_train)

    sp = sub.add_parser("eval", help="score a checkpoint on the eval files")
    sp.add_argument("--config", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--vocab", default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=_cmd_eval)

    sp = sub.add_parser("flops", help="analytic MAC table for both layouts")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(fn=_cmd_flops)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient check")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--samples", type=int, default=200)
    sp.set_defaults(fn=_cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ContractError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
