"""Run reports: JSON artifact, delimited metrics, and rendered figures.

Every training/evaluation run emits a machine-readable report.json plus a
metrics.csv; the same data is rendered to PNG figures (loss curves, recall
over checkpoints, rank histogram) next to them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ContractError


@dataclass
class MetricReport:
    """Recall metrics, loss curves and cost estimates for one run."""

    final_r1: float
    final_r5: float
    n_eval: int
    checkpoints: list = field(default_factory=list)   # {"step", "r1", "r5"}
    loss_curve: dict = field(default_factory=dict)    # step/nup/mlm/total/lr lists
    steps_per_second: float = 0.0
    flops: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    ranks: list = field(default_factory=list)         # per-example 1-based ranks

    def __post_init__(self):
        if not (0.0 <= self.final_r1 <= self.final_r5 <= 1.0):
            raise ContractError(
                f"MetricReport: recall monotonicity violated, R@1={self.final_r1} R@5={self.final_r5}"
            )
        for cp in self.checkpoints:
            if cp["r1"] > cp["r5"]:
                raise ContractError("MetricReport: checkpoint with R@1 > R@5")

    def to_dict(self, include_timing: bool = True) -> dict:
        out = {
            "final_r1": self.final_r1,
            "final_r5": self.final_r5,
            "n_eval": self.n_eval,
            "checkpoints": self.checkpoints,
            "loss_curve": self.loss_curve,
            "flops": self.flops,
            "config": self.config,
            "ranks": self.ranks,
        }
        if include_timing:
            out["steps_per_second"] = self.steps_per_second
        return out

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)


def _write_loss_csv(path: Path, curve: dict) -> None:
    cols = ["step", "nup", "mlm", "total", "lr"]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i in range(len(curve.get("step", []))):
            w.writerow([curve[c][i] for c in cols])


def _write_checkpoint_csv(path: Path, checkpoints: list) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "r1", "r5"])
        for cp in checkpoints:
            w.writerow([cp["step"], cp["r1"], cp["r5"]])


def _figure_backend():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def render_loss_figure(path: Path, curve: dict) -> None:
    plt = _figure_backend()
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = curve.get("step", [])
    for key, style in (("total", "-"), ("nup", "--"), ("mlm", ":")):
        if curve.get(key):
            ax.plot(steps, curve[key], style, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_recall_figure(path: Path, checkpoints: list) -> None:
    plt = _figure_backend()
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = [cp["step"] for cp in checkpoints]
    ax.plot(steps, [cp["r1"] for cp in checkpoints], "o-", label="R@1")
    ax.plot(steps, [cp["r5"] for cp in checkpoints], "s-", label="R@5")
    ax.set_xlabel("step")
    ax.set_ylabel("recall")
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_rank_histogram(path: Path, ranks: list) -> None:
    plt = _figure_backend()
    fig, ax = plt.subplots(figsize=(7, 4))
    if ranks:
        ax.hist(ranks, bins=range(1, max(ranks) + 2), align="left", rwidth=0.9)
    ax.set_xlabel("rank of true candidate")
    ax.set_ylabel("examples")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(out_dir, report: MetricReport, stem: str = "report") -> Path:
    """Emit report.json, metrics.csv (+ recalls.csv) and the figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{stem}.json"
    json_path.write_text(report.to_json() + "\n", encoding="utf-8")
    if report.loss_curve.get("step"):
        _write_loss_csv(out_dir / "metrics.csv", report.loss_curve)
        render_loss_figure(out_dir / "loss_curve.png", report.loss_curve)
    if report.checkpoints:
        _write_checkpoint_csv(out_dir / "recalls.csv", report.checkpoints)
        render_recall_figure(out_dir / "recall_curve.png", report.checkpoints)
    if report.ranks:
        with (out_dir / "ranks.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["example", "rank"])
            for i, r in enumerate(report.ranks):
                w.writerow([i, r])
        render_rank_histogram(out_dir / "rank_hist.png", report.ranks)
    return json_path
