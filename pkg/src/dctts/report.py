"""Run summaries: stable CSV tables plus matplotlib figures."""

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .train import STAGE1_COLUMNS, STAGE2_COLUMNS, read_loss_csv

SUMMARY_COLUMNS = ["metric", "value"]


@dataclass
class ReportResult:
    out_dir: Path
    files: List[Path] = field(default_factory=list)
    text: str = ""


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[Dict]) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in columns})
    return path


def _fmt(v):
    if isinstance(v, float):
        return int(v) if v.is_integer() and abs(v) < 1e15 else f"{v:.10g}"
    return v


def _window_mean(rows, key, lo, hi) -> float:
    vals = [r[key] for r in rows if lo <= r["step"] <= hi]
    return float(np.mean(vals)) if vals else float("nan")


def _plot_losses(path: Path, stage1, stage2) -> Optional[Path]:
    if not stage1 and not stage2:
        return None
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
    if stage1:
        steps = [r["step"] for r in stage1]
        for key in ("total", "recon"):
            axes[0].plot(steps, [r[key] for r in stage1], label=key, lw=0.8)
        axes[0].set_yscale("log")
    axes[0].set_title("stage 1 (VQ)")
    if stage2:
        steps = [r["step"] for r in stage2]
        for key in STAGE2_COLUMNS[1:]:
            axes[1].plot(steps, [r[key] for r in stage2], label=key, lw=0.6)
        axes[1].set_yscale("symlog", linthresh=1e-3)
    axes[1].set_title("stage 2 (diffusion)")
    for ax in axes:
        ax.set_xlabel("step")
        if ax.lines:
            ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_mels(path, mels: Dict[str, np.ndarray], title: str = "") -> Path:
    """Side-by-side mel images (values in [-1, 1])."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(mels), figsize=(3.2 * len(mels), 3), squeeze=False)
    for ax, (name, mel) in zip(axes[0], mels.items()):
        ax.imshow(mel, origin="lower", aspect="auto", vmin=-1, vmax=1, cmap="magma")
        ax.set_title(name, fontsize=8)
        ax.set_xlabel("frame")
    axes[0][0].set_ylabel("mel channel")
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def report(run_dir, out_dir=None) -> ReportResult:
    """Aggregate loss curves, benchmark and acceptance tables of a run directory.

    Re-running on the same directory rewrites identical files.
    """
    run = Path(run_dir)
    out = Path(out_dir) if out_dir else run / "report"
    out.mkdir(parents=True, exist_ok=True)
    result = ReportResult(out)
    stage1 = read_loss_csv(run / "stage1_loss.csv")
    stage2 = read_loss_csv(run / "stage2_loss.csv")
    result.files.append(_write_csv(out / "stage1_loss.csv", STAGE1_COLUMNS, stage1))
    result.files.append(_write_csv(out / "loss.csv", STAGE2_COLUMNS, stage2))

    summary = []
    if stage1:
        summary += [("stage1_steps", len(stage1)), ("stage1_first_total", stage1[0]["total"]),
                    ("stage1_final_total", stage1[-1]["total"])]
    if stage2:
        last = stage2[-1]["step"]
        summary += [("stage2_steps", len(stage2)),
                    ("stage2_mean_total_first100", _window_mean(stage2, "total", 1, 100)),
                    ("stage2_mean_total_last100", _window_mean(stage2, "total", last - 99, last))]
    for name in ("bench.csv", "acceptance.csv"):
        path = run / name
        if path.exists():
            with open(path, newline="") as fh:
                for i, row in enumerate(csv.DictReader(fh)):
                    key = row.get("criterion") or str(i)
                    for col, val in row.items():
                        if col != "criterion":
                            summary.append((f"{name[:-4]}.{key}.{col}", val))
    result.files.append(_write_csv(out / "summary.csv", SUMMARY_COLUMNS,
                                   [{"metric": k, "value": v} for k, v in summary]))
    fig = _plot_losses(out / "loss_curves.png", stage1, stage2)
    if fig:
        result.files.append(fig)
    lines = [f"run: {run}"] + [f"  {k}: {_fmt(v) if isinstance(v, float) else v}" for k, v in summary]
    if not summary:
        lines.append("  (no training logs found)")
    result.text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(result.text, encoding="utf-8")
    result.files.append(out / "summary.txt")
    return result
