"""Experiment runner for batch localization studies.

Subcommands: preprocess, train (central|federated|hierbase|sweep), eval,
report, comm-budget, param-count. Configuration resolves as defaults <
preset < config file < command-line flags, and the fully resolved result
is written into each run directory's manifest.json so any run can be
reproduced by pointing --config at its manifest.

Exit codes: 0 success, 1 usage/configuration problem, 2 data problem,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from copy import deepcopy
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, report
from .channel import ChannelConfig, feasibility_report, payload_bits
from .dataset import (
    PreprocessConfig,
    apply_fitted_pipeline,
    ap_visibility,
    load_csv,
    load_processed,
    partition_clients,
    powed_transform,
    save_processed,
    select_aps,
    train_test_split,
)
from .errors import (
    ConfigError,
    DataError,
    FedlocError,
    NumericError,
    ParseError,
    PartitionError,
    SchemaError,
    UsageError,
)
from .fed import FedConfig, run_federation
from .hierbase import HierarchicalLocalizer
from .hmodel import (
    HMlpConfig,
    TrainConfig,
    build_model,
    evaluate,
    load_model,
    save_model,
    train_central,
)
from .metrics import MDE_VARIANTS

DATA_ENV = "FEDLOC_DATA_DIR"
TRAINING_CSV = "trainingData.csv"
VALIDATION_CSV = "validationData.csv"

TRAIN_MODES = ("central", "federated", "hierbase", "sweep")

DEFAULTS: dict = {
    "mode": "central",
    "seed": 0,
    "mde_variant": "correct-subset",
    "preprocess": {"visibility_threshold": 0.98, "powed_exponent": math.e},
    "split": {"ratio": 0.9},
    "model": {
        "trunk_widths": [256, 128],
        "trunk_dropout": 0.3,
        "branch_hidden": 128,
        "branch_dropout": 0.1,
        "alphas": [0.1, 0.3, 0.6],
        "wiring": "concat-probs",
    },
    "train": {"epochs": 1000, "batch_size": 64, "lr": 5e-4, "beta1": 0.1, "beta2": 0.99},
    "fed": {
        "n_clients": 5,
        "local_epochs": 10,
        "batch_size": 64,
        "rounds": 100,
        "lr": 5e-4,
        "beta1": 0.1,
        "beta2": 0.99,
        "convergence_tol": 1e-4,
        "patience": 5,
        "partition": "iid-uniform",
        "local_optimizer": "adam",
    },
    "hierbase": {"ridge": 1e-2},
    "channel": {
        "t_down": 1e6,
        "t_up": 1e6,
        "p_down": 1.0,
        "p_up": 1.0,
        "fading": "unit",
        "rayleigh_scale": 1.0,
        "bit_resolution": 32,
    },
    "scalability": {"client_counts": [2, 5, 10, 20]},
}

PARTITION_ALIASES = {
    "iid": "iid-uniform",
    "iid-uniform": "iid-uniform",
    "by-user": "by-user",
    "by-building": "by-building",
}


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage failures raise instead of exiting, so
    main() can map them to exit code 1."""

    def error(self, message):
        raise UsageError(message)


# ---------------- configuration ----------------


def deep_merge(base: dict, extra: dict) -> dict:
    out = deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = deepcopy(value)
    return out


def load_preset(name: str) -> dict:
    path = resources.files("fedloc").joinpath("presets", f"{name}.json")
    if not path.is_file():
        available = sorted(
            p.name[: -len(".json")]
            for p in resources.files("fedloc").joinpath("presets").iterdir()
            if p.name.endswith(".json")
        )
        raise ConfigError(f"unknown preset {name!r}; available: {available}")
    return json.loads(path.read_text())


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    # a run manifest doubles as a config file
    if "config" in data and "version" in data:
        data = data["config"]
    return data


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = deepcopy(DEFAULTS)
    if getattr(args, "preset", None):
        cfg = deep_merge(cfg, load_preset(args.preset))
    if getattr(args, "config", None):
        cfg = deep_merge(cfg, load_config_file(args.config))

    if getattr(args, "mode", None):
        cfg["mode"] = args.mode
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "tau", None) is not None:
        cfg["preprocess"]["visibility_threshold"] = args.tau
    if getattr(args, "epochs", None) is not None:
        if cfg["mode"] in ("federated", "sweep"):
            cfg["fed"]["local_epochs"] = args.epochs
        else:
            cfg["train"]["epochs"] = args.epochs
    if getattr(args, "batch", None) is not None:
        cfg["train"]["batch_size"] = args.batch
        cfg["fed"]["batch_size"] = args.batch
    if getattr(args, "lr", None) is not None:
        cfg["train"]["lr"] = args.lr
        cfg["fed"]["lr"] = args.lr
    if getattr(args, "clients", None) is not None:
        cfg["fed"]["n_clients"] = args.clients
    if getattr(args, "rounds", None) is not None:
        cfg["fed"]["rounds"] = args.rounds
    if getattr(args, "partition", None) is not None:
        cfg["fed"]["partition"] = PARTITION_ALIASES[args.partition]
    if getattr(args, "wiring", None) is not None:
        cfg["model"]["wiring"] = args.wiring
    if getattr(args, "mde_variant", None) is not None:
        cfg["mde_variant"] = args.mde_variant
    if getattr(args, "adam_conventional", False):
        cfg["train"]["beta1"] = 0.9
        cfg["train"]["beta2"] = 0.999
        cfg["fed"]["beta1"] = 0.9
        cfg["fed"]["beta2"] = 0.999
    if getattr(args, "local_sgd", False):
        cfg["fed"]["local_optimizer"] = "sgd"
    if getattr(args, "ridge", None) is not None:
        cfg["hierbase"]["ridge"] = args.ridge
    if getattr(args, "bit_resolution", None) is not None:
        cfg["channel"]["bit_resolution"] = args.bit_resolution
    if getattr(args, "fading", None) is not None:
        cfg["channel"]["fading"] = args.fading
    return cfg


# ---------------- data plumbing ----------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _locate_csvs(args) -> tuple[Path, Path | None]:
    base = getattr(args, "data", None) or os.environ.get(DATA_ENV)
    if not base:
        raise DataError(
            f"no dataset location: pass --data DIR or set ${DATA_ENV} "
            f"(directory containing {TRAINING_CSV})"
        )
    base = Path(base)
    train_csv = base / TRAINING_CSV
    if not train_csv.exists():
        raise DataError(f"{train_csv} not found")
    val_csv = base / VALIDATION_CSV
    return train_csv, (val_csv if val_csv.exists() else None)


def _preprocess_cfg(cfg: dict) -> PreprocessConfig:
    p = cfg["preprocess"]
    return PreprocessConfig(
        visibility_threshold=p["visibility_threshold"],
        powed_exponent=p["powed_exponent"],
        min_rssi=p.get("min_rssi"),
    )


def prepare_from_raw(args, cfg: dict) -> dict:
    """Full pipeline from the raw CSVs: AP selection and normalization are
    fitted on the complete training file, then the train/test split is
    stratified by (building, floor)."""
    train_csv, val_csv = _locate_csvs(args)
    pcfg = _preprocess_cfg(cfg)
    raw = load_csv(train_csv)
    visibility = ap_visibility(raw, pcfg.missing_sentinel)
    stage1 = int((visibility > 0.0).sum())
    stage2 = int(((visibility > 0.0) & (visibility >= 1.0 - pcfg.visibility_threshold)).sum())
    selected = select_aps(raw, pcfg)
    full = powed_transform(selected, pcfg)
    train_ps, test_ps = train_test_split(full, cfg["split"]["ratio"], cfg["seed"])
    val_ps = None
    if val_csv is not None:
        val_ps = apply_fitted_pipeline(load_csv(val_csv), full, pcfg)
    hashes = {"training_csv": _sha256(train_csv)}
    if val_csv is not None:
        hashes["validation_csv"] = _sha256(val_csv)
    return {
        "train": train_ps,
        "test": test_ps,
        "validation": val_ps,
        "full": full,
        "stage1": stage1,
        "stage2": stage2,
        "min_rssi": full.min_rssi,
        "hashes": hashes,
    }


def prepare_from_cache(cache_dir: str | Path) -> dict:
    cache_dir = Path(cache_dir)
    sets = {}
    for name in ("train", "test", "validation"):
        sub = cache_dir / name
        if sub.exists():
            sets[name] = load_processed(sub)
    if "train" not in sets or "test" not in sets:
        raise DataError(f"{cache_dir} must contain train/ and test/ caches (run preprocess)")
    hashes = {
        f"{name}_cache": _sha256(cache_dir / name / "manifest.txt") for name in sets
    }
    return {
        "train": sets["train"],
        "test": sets["test"],
        "validation": sets.get("validation"),
        "hashes": hashes,
    }


def prepare_data(args, cfg: dict) -> dict:
    if getattr(args, "cache", None):
        return prepare_from_cache(args.cache)
    return prepare_from_raw(args, cfg)


def _model_cfg(cfg: dict, ps) -> HMlpConfig:
    m = cfg["model"]
    return HMlpConfig(
        input_dim=ps.n_features,
        n_buildings=ps.n_buildings,
        n_floors=ps.n_floors,
        trunk_widths=tuple(m["trunk_widths"]),
        trunk_dropout=m["trunk_dropout"],
        branch_hidden=m["branch_hidden"],
        branch_dropout=m["branch_dropout"],
        alphas=tuple(m["alphas"]),
        wiring=m["wiring"],
    )


def write_manifest(out_dir: Path, cfg: dict, dataset_hashes: dict, extra: dict | None = None):
    manifest = {
        "version": __version__,
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "config": cfg,
        "dataset": dataset_hashes,
        "policies": {
            "optimizer_moments": "reset-every-round",
            "link_budget": "reporting-only",
            "headline_mde_variant": cfg["mde_variant"],
        },
    }
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _print_metrics(label: str, m) -> None:
    print(
        f"{label}: b_acc={m.b_acc:.4f} f_acc={m.f_acc:.4f} acc={m.acc:.4f} "
        f"mde2d_masked={m.mde2d_masked:.2f}m mde2d_correct={m.mde2d_correct:.2f}m "
        f"mde3d={m.mde3d:.2f}m (n={m.n})"
    )


# ---------------- subcommands ----------------


def cmd_preprocess(args) -> int:
    cfg = resolve_config(args)
    data = prepare_from_raw(args, cfg)
    out = Path(args.out)
    pcfg = _preprocess_cfg(cfg)
    save_processed(data["train"], out / "train", pcfg)
    save_processed(data["test"], out / "test", pcfg)
    if data["validation"] is not None:
        save_processed(data["validation"], out / "validation", pcfg)
    print(f"stage1={data['stage1']}")
    print(f"stage2={data['stage2']}")
    print(f"min_rssi={data['min_rssi']:g}")
    print(
        f"records: train={len(data['train'])} test={len(data['test'])} "
        f"validation={len(data['validation']) if data['validation'] is not None else 0}"
    )
    print(f"cache written to {out}")
    return 0


def _eval_payload(cfg: dict, mode: str, n_params: int | None, evaluations: dict) -> dict:
    payload = {
        "mode": mode,
        "headline_mde_variant": cfg["mde_variant"],
        "n_params": n_params,
    }
    for name, metrics in evaluations.items():
        payload[name] = metrics.to_dict() if metrics is not None else None
    return payload


def _train_central(args, cfg: dict, data: dict, out: Path) -> int:
    model_cfg = _model_cfg(cfg, data["train"])
    t = cfg["train"]
    train_cfg = TrainConfig(
        epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"],
        beta1=t["beta1"], beta2=t["beta2"], seed=cfg["seed"],
    )
    net, history = train_central(data["train"], model_cfg, train_cfg)
    report.write_history_csv(out / "history.csv", history)
    save_model(out / "checkpoint", net, extra_meta={"train_config": t, "seed": cfg["seed"]})
    evals = {"test": evaluate(net, data["test"])}
    if data.get("validation") is not None:
        evals["validation"] = evaluate(net, data["validation"])
    report.write_metrics_json(
        out / "metrics.json",
        _eval_payload(cfg, "central", net.parameter_count(), evals),
    )
    report.history_figure(out / "history.csv", out / "history.png")
    print(f"epochs={len(history)} final_loss={history[-1]['global_loss']:.6f}")
    for name, m in evals.items():
        _print_metrics(name, m)
    return 0


def _train_federated(args, cfg: dict, data: dict, out: Path) -> int:
    model_cfg = _model_cfg(cfg, data["train"])
    f = cfg["fed"]
    fed_cfg = FedConfig(
        n_clients=f["n_clients"], local_epochs=f["local_epochs"],
        batch_size=f["batch_size"], rounds=f["rounds"], lr=f["lr"],
        beta1=f["beta1"], beta2=f["beta2"],
        convergence_tol=f["convergence_tol"], patience=f["patience"],
        seed=cfg["seed"], local_optimizer=f["local_optimizer"],
    )
    partition = partition_clients(
        data["train"], fed_cfg.n_clients, f["partition"], cfg["seed"]
    )
    print(f"partition={f['partition']} shard_sizes={list(partition.shard_sizes())}")
    writer = report.RoundCsv(out / "rounds.csv")
    try:
        net, reports = run_federation(
            data["train"], partition, data["test"], fed_cfg, model_cfg,
            on_round=writer.write,
        )
    finally:
        writer.close()
    save_model(out / "checkpoint", net, extra_meta={"fed_config": f, "seed": cfg["seed"]})
    evals = {"test": evaluate(net, data["test"])}
    if data.get("validation") is not None:
        evals["validation"] = evaluate(net, data["validation"])
    report.write_metrics_json(
        out / "metrics.json",
        _eval_payload(cfg, "federated", net.parameter_count(), evals),
    )
    report.rounds_figure(out / "rounds.csv", out / "rounds.png")
    print(f"rounds={len(reports)} final_eval_loss={reports[-1].eval_loss:.6f}")
    for name, m in evals.items():
        _print_metrics(name, m)
    return 0


def _train_hierbase(args, cfg: dict, data: dict, out: Path) -> int:
    localizer = HierarchicalLocalizer(lam=cfg["hierbase"]["ridge"]).fit(data["train"])
    evals = {"test": localizer.evaluate(data["test"])}
    if data.get("validation") is not None:
        evals["validation"] = localizer.evaluate(data["validation"])
    report.write_metrics_json(
        out / "metrics.json",
        _eval_payload(cfg, "hierbase", None, evals),
    )
    print(f"profiles={len(localizer.profiles)} ridge={cfg['hierbase']['ridge']:g}")
    for name, m in evals.items():
        _print_metrics(name, m)
    return 0


def _train_sweep(args, cfg: dict, data: dict, out: Path) -> int:
    """One federated run per client count, each on a proportionally grown
    slice of the training data (fixed per-client quantum)."""
    counts = list(cfg["scalability"]["client_counts"])
    if not counts:
        raise ConfigError("scalability.client_counts is empty")
    train = data["train"]
    quantum = len(train) // max(counts)
    if quantum < 2:
        raise DataError(
            f"training set too small for a {max(counts)}-client sweep"
        )
    order = np.random.default_rng(cfg["seed"]).permutation(len(train))
    rows = []
    for n_clients in counts:
        sub_cfg = deep_merge(cfg, {"mode": "federated", "fed": {"n_clients": n_clients}})
        sub_out = out / f"C{n_clients}"
        sub_out.mkdir(parents=True, exist_ok=True)
        subset = train.subset(np.sort(order[: n_clients * quantum]))
        sub_data = dict(data)
        sub_data["train"] = subset
        print(f"--- sweep: {n_clients} clients, {len(subset)} training records ---")
        write_manifest(sub_out, sub_cfg, data["hashes"])
        _train_federated(args, sub_cfg, sub_data, sub_out)
        metrics = json.loads((sub_out / "metrics.json").read_text())["test"]
        rounds = pd.read_csv(sub_out / "rounds.csv")
        rows.append(
            {
                "n_clients": n_clients,
                "n_train": len(subset),
                "rounds": len(rounds),
                "b_acc": metrics["b_acc"],
                "f_acc": metrics["f_acc"],
                "acc": metrics["acc"],
                "mde2d_masked_m": metrics["mde2d_masked_mean_m"],
                "mde2d_correct_m": metrics["mde2d_correct_subset_m"],
                "mde3d_m": metrics["mde3d_m"],
                "uplink_bits_per_round": int(rounds["uplink_bits_total"].iloc[-1]),
            }
        )
    pd.DataFrame(rows).to_csv(out / "sweep_summary.csv", index=False)
    report.scalability_figure(out / "sweep_summary.csv", out / "scalability.png")
    print(f"sweep summary written to {out / 'sweep_summary.csv'}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_data(args, cfg)
    write_manifest(out, cfg, data["hashes"])
    runner = {
        "central": _train_central,
        "federated": _train_federated,
        "hierbase": _train_hierbase,
        "sweep": _train_sweep,
    }[cfg["mode"]]
    return runner(args, cfg, data, out)


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    net, meta = load_model(args.checkpoint)
    if getattr(args, "cache", None):
        ps = load_processed(args.cache)
        if ps.n_features != net.cfg.input_dim:
            raise DataError(
                f"cache has {ps.n_features} features, checkpoint expects {net.cfg.input_dim}"
            )
        evals = {"eval": evaluate(net, ps)}
    else:
        data = prepare_from_raw(args, cfg)
        for name in ("test", "validation"):
            ps = data.get(name)
            if ps is not None and ps.n_features != net.cfg.input_dim:
                raise DataError(
                    f"{name} set has {ps.n_features} features, "
                    f"checkpoint expects {net.cfg.input_dim}"
                )
        evals = {"test": evaluate(net, data["test"])}
        if data.get("validation") is not None:
            evals["validation"] = evaluate(net, data["validation"])
    payload = _eval_payload(cfg, str(meta.get("architecture", {}).get("kind", "model")),
                            net.parameter_count(), evals)
    if getattr(args, "out", None):
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.write_metrics_json(out / "metrics.json", payload)
        print(f"metrics written to {out / 'metrics.json'}")
    for name, m in evals.items():
        _print_metrics(name, m)
    return 0


def _expand_run_dirs(run_dirs: list[str]) -> tuple[list[Path], list[Path]]:
    """Sweep directories expand into their per-count children; returns
    (run dirs, sweep summary CSVs)."""
    expanded: list[Path] = []
    sweeps: list[Path] = []
    for d in run_dirs:
        path = Path(d)
        if not path.exists():
            raise DataError(f"run directory not found: {path}")
        summary = path / "sweep_summary.csv"
        if summary.exists():
            sweeps.append(summary)
            expanded.extend(sorted(p for p in path.iterdir()
                                   if p.is_dir() and (p / "metrics.json").exists()))
        else:
            expanded.append(path)
    if not expanded:
        raise DataError("no finished run directories found")
    return expanded, sweeps


def cmd_report(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_dirs, sweeps = _expand_run_dirs(args.run_dirs)
    df = report.write_summary(run_dirs, out, cfg["mde_variant"])
    mde_col = "mde2d_masked_m" if cfg["mde_variant"] == "masked-mean" else "mde2d_correct_m"
    report.comparison_figure(df, mde_col, out / "comparison.png")
    for run in run_dirs:
        if (run / "history.csv").exists():
            report.history_figure(run / "history.csv", out / f"loss_{run.name}.png")
        if (run / "rounds.csv").exists():
            report.rounds_figure(run / "rounds.csv", out / f"rounds_{run.name}.png")
    for i, summary in enumerate(sweeps):
        suffix = "" if len(sweeps) == 1 else f"_{i}"
        report.scalability_figure(summary, out / f"scalability{suffix}.png")
    with pd.option_context("display.width", 200, "display.max_columns", 50):
        print(df.to_string(index=False))
    print(f"report written to {out}")
    return 0


def _dims_model_cfg(args, cfg: dict) -> HMlpConfig:
    m = cfg["model"]
    return HMlpConfig(
        input_dim=args.input_dim,
        n_buildings=args.buildings,
        n_floors=args.floors,
        trunk_widths=tuple(m["trunk_widths"]),
        trunk_dropout=m["trunk_dropout"],
        branch_hidden=m["branch_hidden"],
        branch_dropout=m["branch_dropout"],
        alphas=tuple(m["alphas"]),
        wiring=m["wiring"],
    )


def _resolve_param_count(args, cfg: dict) -> int:
    if getattr(args, "checkpoint", None):
        net, _ = load_model(args.checkpoint)
        return net.parameter_count()
    return build_model(_dims_model_cfg(args, cfg), seed=0).parameter_count()


def cmd_comm_budget(args) -> int:
    cfg = resolve_config(args)
    n_params = _resolve_param_count(args, cfg)
    counts = [int(c) for c in args.client_counts.split(",") if c.strip()]
    if not counts:
        raise UsageError("--client-counts must list at least one client count")
    ch = cfg["channel"]
    channel_cfg = ChannelConfig(
        t_down=ch["t_down"], t_up=ch["t_up"], p_down=ch["p_down"], p_up=ch["p_up"],
        fading=ch["fading"], rayleigh_scale=ch["rayleigh_scale"],
        seed=cfg["seed"], bit_resolution=ch["bit_resolution"],
    )
    rows = feasibility_report(channel_cfg, n_params, counts)
    frame = pd.DataFrame(rows)
    if getattr(args, "out", None):
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out / "comm_budget.csv", index=False)
        report.comm_load_figure(rows, out / "comm_load.png")
        print(f"budget table written to {out / 'comm_budget.csv'}")
    print(frame.to_string(index=False))
    return 0


def cmd_param_count(args) -> int:
    cfg = resolve_config(args)
    if getattr(args, "checkpoint", None):
        net, _ = load_model(args.checkpoint)
    else:
        net = build_model(_dims_model_cfg(args, cfg), seed=0)
    total = net.parameter_count()
    if args.verbose:
        for name, arr in net.trainable():
            print(f"{name:24s} {str(arr.shape):14s} {arr.size}")
    print(f"parameters={total}")
    print(f"payload_bits={payload_bits(total, cfg['channel']['bit_resolution'])}")
    return 0


# ---------------- parser ----------------


def build_parser() -> _Parser:
    parser = _Parser(prog="fedloc", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"fedloc {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add_common(p, with_out=None):
        p.add_argument("--config", help="JSON config file (a run manifest also works)")
        p.add_argument("--preset", help="packaged preset name (central, federated, scalability)")
        p.add_argument("--seed", type=int, help="base RNG seed")
        if with_out is not None:
            p.add_argument("--out", default=with_out, help="output directory")

    p = sub.add_parser("preprocess", help="build and cache model-ready feature sets")
    add_common(p, with_out="preproc")
    p.add_argument("--data", help=f"dataset directory (default ${DATA_ENV})")
    p.add_argument("--tau", type=float, help="visibility threshold")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="run one training pipeline")
    p.add_argument("mode", choices=TRAIN_MODES)
    add_common(p, with_out="run")
    p.add_argument("--data", help=f"dataset directory (default ${DATA_ENV})")
    p.add_argument("--cache", help="preprocessed cache directory (from `preprocess`)")
    p.add_argument("--epochs", type=int, help="training epochs (federated: local epochs)")
    p.add_argument("--batch", type=int, help="mini-batch size")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--clients", type=int, help="client count for federated runs")
    p.add_argument("--rounds", type=int, help="maximum communication rounds")
    p.add_argument("--tau", type=float, help="visibility threshold")
    p.add_argument("--partition", choices=sorted(PARTITION_ALIASES),
                   help="client data partition strategy")
    p.add_argument("--wiring", choices=("concat-probs", "concat-logits", "flat"),
                   help="hierarchy wiring between heads")
    p.add_argument("--mde-variant", choices=MDE_VARIANTS, help="headline 2D error variant")
    p.add_argument("--adam-conventional", action="store_true",
                   help="use Adam betas 0.9/0.999 instead of the default 0.1/0.99")
    p.add_argument("--local-sgd", action="store_true",
                   help="plain gradient steps for client-local training")
    p.add_argument("--ridge", type=float, help="ridge strength for the hierbase regressors")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    add_common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--data", help=f"dataset directory (default ${DATA_ENV})")
    p.add_argument("--cache", help="one processed-set cache directory")
    p.add_argument("--out", help="optional directory for metrics.json")
    p.add_argument("--mde-variant", choices=MDE_VARIANTS, help="headline 2D error variant")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="summarize finished run directories")
    add_common(p, with_out="report")
    p.add_argument("run_dirs", nargs="+", help="run directories to compare")
    p.add_argument("--mde-variant", choices=MDE_VARIANTS, help="headline 2D error variant")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("comm-budget", help="link-budget feasibility table")
    add_common(p)
    p.add_argument("--checkpoint", help="derive the payload from this checkpoint")
    p.add_argument("--input-dim", type=int, default=248, help="feature count")
    p.add_argument("--buildings", type=int, default=3, help="building classes")
    p.add_argument("--floors", type=int, default=5, help="floor classes")
    p.add_argument("--wiring", choices=("concat-probs", "concat-logits", "flat"))
    p.add_argument("--client-counts", default="2,5,10,20",
                   help="comma-separated client counts")
    p.add_argument("--fading", choices=("unit", "rayleigh"))
    p.add_argument("--bit-resolution", type=int, help="bits per parameter in transit")
    p.add_argument("--out", help="optional output directory for CSV + figure")
    p.set_defaults(func=cmd_comm_budget)

    p = sub.add_parser("param-count", help="trainable parameter audit")
    add_common(p)
    p.add_argument("--checkpoint", help="count parameters of this checkpoint")
    p.add_argument("--input-dim", type=int, default=248)
    p.add_argument("--buildings", type=int, default=3)
    p.add_argument("--floors", type=int, default=5)
    p.add_argument("--wiring", choices=("concat-probs", "concat-logits", "flat"))
    p.add_argument("--bit-resolution", type=int, help="bits per parameter in transit")
    p.add_argument("--verbose", action="store_true", help="per-tensor breakdown")
    p.set_defaults(func=cmd_param_count)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help()
            return 1
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (SchemaError, ParseError, DataError, PartitionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except FedlocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
