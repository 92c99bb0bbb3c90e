"""Run-directory reporting: delimited outputs plus rendered figures.

Every emitter writes plain CSV (or JSON for metric bundles) so results
stay greppable, and the figure helpers render matplotlib PNGs next to
the delimited files. Figures are conveniences; the CSVs are the record.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import pandas as pd

from .errors import DataError


def write_history_csv(path: str | Path, history: list[dict]) -> Path:
    path = Path(path)
    pd.DataFrame(history).to_csv(path, index=False)
    return path


def round_to_row(report) -> dict:
    """Flatten one federation RoundReport into a CSV row."""
    row: dict = {"round": report.round_idx}
    for i, loss in enumerate(report.final_client_losses()):
        row[f"loss_c{i}"] = loss
    m = report.metrics
    row.update(
        {
            "eval_loss": report.eval_loss,
            "b_acc": m.b_acc,
            "f_acc": m.f_acc,
            "acc": m.acc,
            "mde2d_masked_m": m.mde2d_masked,
            "mde2d_correct_m": m.mde2d_correct,
            "mde3d_m": m.mde3d,
            "uplink_bits_total": report.uplink_bits_total,
            "downlink_bits": report.downlink_bits,
        }
    )
    return row


class RoundCsv:
    """Streaming per-round CSV writer; rows are flushed as they arrive
    so partial results survive a failed later round."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._file = open(self.path, "w")
        self._columns: list[str] | None = None

    def write(self, report) -> None:
        row = round_to_row(report)
        if self._columns is None:
            self._columns = list(row)
            self._file.write(",".join(self._columns) + "\n")
        self._file.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                                  for c in self._columns) + "\n")
        self._file.flush()

    def close(self) -> None:
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_metrics_json(path: str | Path, payload: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


# ---- figures ----


def history_figure(history_csv: str | Path, out_png: str | Path) -> Path:
    df = pd.read_csv(history_csv)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(df["epoch"], df["global_loss"], label="global", lw=1.8)
    for col, label in (("loss_b", "building"), ("loss_f", "floor"), ("loss_l", "location")):
        if col in df:
            ax.plot(df["epoch"], df[col], label=label, lw=1.0, alpha=0.7)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return Path(out_png)


def rounds_figure(rounds_csv: str | Path, out_png: str | Path) -> Path:
    df = pd.read_csv(rounds_csv)
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax1.plot(df["round"], df["eval_loss"], lw=1.8, color="tab:blue")
    ax1.set_ylabel("eval loss")
    ax1.grid(alpha=0.3)
    ax2.plot(df["round"], df["acc"], lw=1.8, color="tab:green", label="both-correct")
    ax2.plot(df["round"], df["b_acc"], lw=1.0, alpha=0.7, label="building")
    ax2.plot(df["round"], df["f_acc"], lw=1.0, alpha=0.7, label="floor")
    ax2.set_xlabel("communication round")
    ax2.set_ylabel("accuracy")
    ax2.legend()
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return Path(out_png)


def comparison_figure(summary: pd.DataFrame, mde_column: str, out_png: str | Path) -> Path:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    names = summary["run"].tolist()
    ax1.bar(names, summary[mde_column], color="tab:blue")
    ax1.set_ylabel("2D mean distance error [m]")
    ax1.tick_params(axis="x", rotation=30)
    ax2.bar(names, 100.0 * summary["acc"], color="tab:green")
    ax2.set_ylabel("both-correct accuracy [%]")
    ax2.tick_params(axis="x", rotation=30)
    for ax in (ax1, ax2):
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return Path(out_png)


def comm_load_figure(rows: list[dict], out_png: str | Path) -> Path:
    df = pd.DataFrame(rows)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(df["n_clients"], df["total_uplink_bits"], "o-", label="total uplink")
    ax.plot(df["n_clients"], df["per_client_uplink_bits"], "s-", label="per-client uplink budget")
    ax.plot(df["n_clients"], df["downlink_bits"], "^-", label="downlink budget")
    ax.axhline(df["payload_bits"].iloc[0], ls="--", color="gray", label="model payload")
    ax.set_xlabel("participating clients")
    ax.set_ylabel("bits per round")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return Path(out_png)


def scalability_figure(summary_csv: str | Path, out_png: str | Path) -> Path:
    df = pd.read_csv(summary_csv)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(df["n_clients"], 100.0 * df["acc"], "o-", label="both-correct accuracy")
    ax.plot(df["n_clients"], 100.0 * df["b_acc"], "s--", alpha=0.7, label="building")
    ax.plot(df["n_clients"], 100.0 * df["f_acc"], "^--", alpha=0.7, label="floor")
    ax.set_xlabel("participating clients")
    ax.set_ylabel("accuracy [%]")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return Path(out_png)


# ---- run-directory summaries ----


def summarize_run(run_dir: str | Path) -> dict:
    """One summary row per run directory, read back from its files."""
    run_dir = Path(run_dir)
    metrics_path = run_dir / "metrics.json"
    if not metrics_path.exists():
        raise DataError(f"{run_dir} has no metrics.json; is it a finished run directory?")
    metrics = json.loads(metrics_path.read_text())
    manifest = {}
    if (run_dir / "manifest.json").exists():
        manifest = json.loads((run_dir / "manifest.json").read_text())
    test = metrics.get("test", {})
    row = {
        "run": run_dir.name,
        "mode": metrics.get("mode", manifest.get("config", {}).get("mode", "?")),
        "seed": manifest.get("config", {}).get("seed"),
        "b_acc": test.get("b_acc"),
        "f_acc": test.get("f_acc"),
        "acc": test.get("acc"),
        "mde2d_masked_m": test.get("mde2d_masked_mean_m"),
        "mde2d_correct_m": test.get("mde2d_correct_subset_m"),
        "mde3d_m": test.get("mde3d_m"),
        "n_params": metrics.get("n_params"),
    }
    rounds_csv = run_dir / "rounds.csv"
    if rounds_csv.exists():
        df = pd.read_csv(rounds_csv)
        row["rounds"] = len(df)
        row["uplink_bits_per_round"] = int(df["uplink_bits_total"].iloc[-1])
    history_csv = run_dir / "history.csv"
    if history_csv.exists():
        row["epochs"] = len(pd.read_csv(history_csv))
    return row


def write_summary(run_dirs: list[str | Path], out_dir: str | Path,
                  mde_variant: str = "correct-subset") -> pd.DataFrame:
    """Comparison table over run directories. The first directory is the
    baseline for the 2D-error delta column (negative = improvement)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [summarize_run(d) for d in run_dirs]
    df = pd.DataFrame(rows)
    mde_col = "mde2d_masked_m" if mde_variant == "masked-mean" else "mde2d_correct_m"
    base = df[mde_col].iloc[0]
    if base and base > 0:
        df["mde2d_delta_pct"] = 100.0 * (df[mde_col] - base) / base
    df.to_csv(out_dir / "summary.csv", index=False)
    return df
