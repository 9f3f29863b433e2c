"""Experiment runner: ``run``, ``sweep`` and ``report`` subcommands.

Configs are JSON documents with ``schema_version`` 1.  Every section is
optional; omitted fields take the defaults in :data:`DEFAULTS`, which are
the reference training protocol (50 epochs, batch 64, lr 0.1 decayed at
epochs 20 and 40, momentum 0.9, weight decay 1e-4, subset 20%, k = 0.8).
Unknown keys are errors.

Output layout for ``run``::

    <out>/<config-hash>/config.json
    <out>/<config-hash>/seed_<s>/{metrics.csv, manifest.json, stream.json, ...}
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .datastream import (
    BufferedReplay,
    Dataset,
    FullReplay,
    NoReplay,
    cap_per_class,
    corrupt_labels,
    load_csv,
    load_idx,
    make_stream,
    synth_blobs,
)
from .engine import NetworkSpec, OptimizerConfig, read_checkpoint
from .errors import LureError
from .metrics import (
    accuracy,
    adversarial_accuracy,
    cer,
    corruption_accuracies,
    mask_overlap,
    mean_corruption_accuracy,
    perturbation_curve,
    reliability_table,
)
from .reinit import ColdStart, Llf, Lure, Rifle, ShrinkPerturb, WarmStart
from .trainer import TrainConfig, evaluate, run_alma, seed_streams

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUTPUT_ENV = "LURE_OUTPUT_ROOT"
METRICS_COLUMNS = ("run_id", "seed", "strategy", "megabatch", "test_acc", "err_count", "cer",
                   "train_acc", "val_acc", "gap", "ece", "wall_s")

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "dataset": {"kind": "blobs", "classes": 10, "per_class": 500, "test_per_class": 200,
                "dim": 20, "separation": 5.0},
    "stream": {"megabatches": 8, "val_fraction": 0.1, "per_class_cap": None, "label_noise": 0.0},
    "network": {"hidden": [64, 32]},
    "train": {"epochs": 50, "batch_size": 64, "lr": 0.1, "momentum": 0.9, "weight_decay": 1e-4,
              "lr_steps": [20, 40], "lr_gamma": 0.1, "decay_biases": True, "reset_optimizer": True,
              "subset_fraction": 0.2, "subset_count": None},
    "strategy": {"name": "lure", "k": 0.8, "method": "snip", "include_biases": True},
    "replay": {"kind": "full"},
    "metrics": {"ece_bins": 15, "overlap": True, "pgd_epsilons": [], "pgd_steps": 10,
                "pgd_step_size": None, "perturb_sigmas": [], "perturb_repeats": 5,
                "corruption_kinds": [], "corruption_severities": [1, 2, 3, 4, 5],
                "input_clip": None, "wall_time": False, "checkpoints": True},
    "seeds": [0],
    "output": None,
}

DATASET_KEYS = {
    "blobs": {"kind", "classes", "per_class", "test_per_class", "dim", "separation"},
    "idx": {"kind", "train_images", "train_labels", "test_images", "test_labels", "classes",
            "train_limit", "test_limit"},
    "csv": {"kind", "train", "test", "label_column", "classes"},
}
STRATEGY_KEYS = {
    "warm": {"name"},
    "cold": {"name"},
    "rifle": {"name"},
    "llf": {"name", "split_layer"},
    "sp": {"name", "shrink", "noise_std", "include_biases"},
    "lure": {"name", "k", "method", "include_biases"},
}
STRATEGY_DEFAULTS = {
    "llf": {"split_layer": None},
    "sp": {"shrink": 0.4, "noise_std": 0.001, "include_biases": True},
    "lure": {"k": 0.8, "method": "snip", "include_biases": True},
}
REPLAY_KEYS = {"full": {"kind"}, "none": {"kind"}, "buffered": {"kind", "capacity"}}
GRID_ALIASES = {
    "lr": "train.lr",
    "weight_decay": "train.weight_decay",
    "k": "strategy.k",
    "method": "strategy.method",
    "label_noise": "stream.label_noise",
    "capacity": "replay.capacity",
    "megabatches": "stream.megabatches",
    "per_class_cap": "stream.per_class_cap",
}


class ConfigError(LureError, ValueError):
    """Invalid experiment configuration; ``problems`` lists field-level diagnostics."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


# -- configuration -----------------------------------------------------------

def resolve_config(user: dict) -> dict:
    """Merge a user config over the defaults and validate it."""
    problems = []
    if not isinstance(user, dict):
        raise ConfigError(["config: top level must be an object"])
    for key in user:
        if key not in DEFAULTS:
            problems.append(f"{key}: unknown top-level key")
    if user.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        problems.append(f"schema_version: expected {SCHEMA_VERSION}, got {user.get('schema_version')!r}")
    cfg = copy.deepcopy(DEFAULTS)
    for section in ("stream", "network", "train", "metrics"):
        given = user.get(section, {})
        if not isinstance(given, dict):
            problems.append(f"{section}: must be an object")
            continue
        for key, value in given.items():
            if key not in cfg[section]:
                problems.append(f"{section}.{key}: unknown key")
            else:
                cfg[section][key] = value
    if "dataset" in user:
        ds = dict(user["dataset"])
        kind = ds.get("kind", "blobs")
        if kind not in DATASET_KEYS:
            problems.append(f"dataset.kind: unknown kind {kind!r}")
        else:
            base = copy.deepcopy(DEFAULTS["dataset"]) if kind == "blobs" else {"kind": kind}
            base.update(ds)
            problems += [f"dataset.{k}: unknown key" for k in ds if k not in DATASET_KEYS[kind]]
            cfg["dataset"] = base
    if "strategy" in user:
        cfg["strategy"] = _resolve_strategy(user["strategy"], problems)
    if "replay" in user:
        rp = dict(user["replay"])
        kind = rp.get("kind")
        if kind not in REPLAY_KEYS:
            problems.append(f"replay.kind: expected one of {sorted(REPLAY_KEYS)}, got {kind!r}")
        else:
            problems += [f"replay.{k}: unknown key" for k in rp if k not in REPLAY_KEYS[kind]]
            if kind == "buffered" and not isinstance(rp.get("capacity"), int):
                problems.append("replay.capacity: buffered replay needs an integer capacity")
            cfg["replay"] = rp
    if "seeds" in user:
        cfg["seeds"] = user["seeds"]
    if "output" in user:
        cfg["output"] = user["output"]
    problems += _validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def _resolve_strategy(given, problems) -> dict:
    if not isinstance(given, dict):
        problems.append("strategy: must be an object")
        return copy.deepcopy(DEFAULTS["strategy"])
    name = given.get("name")
    if name not in STRATEGY_KEYS:
        problems.append(f"strategy.name: expected one of {sorted(STRATEGY_KEYS)}, got {name!r}")
        return copy.deepcopy(DEFAULTS["strategy"])
    out = {"name": name, **copy.deepcopy(STRATEGY_DEFAULTS.get(name, {}))}
    for key, value in given.items():
        if key not in STRATEGY_KEYS[name]:
            problems.append(f"strategy.{key}: unknown key for {name!r}")
        else:
            out[key] = value
    return out


def _validate(cfg) -> list[str]:
    problems = []

    def check(cond, msg):
        if not cond:
            problems.append(msg)

    st, tr, ds = cfg["stream"], cfg["train"], cfg["dataset"]
    check(isinstance(st["megabatches"], int) and st["megabatches"] >= 1, "stream.megabatches: must be an integer >= 1")
    check(0 < st["val_fraction"] < 1, "stream.val_fraction: must lie in (0, 1)")
    check(0 <= st["label_noise"] <= 1, "stream.label_noise: must lie in [0, 1]")
    check(st["per_class_cap"] is None or (isinstance(st["per_class_cap"], int) and st["per_class_cap"] >= 1),
          "stream.per_class_cap: must be null or an integer >= 1")
    check(isinstance(cfg["network"]["hidden"], list) and all(isinstance(h, int) and h >= 1 for h in cfg["network"]["hidden"]),
          "network.hidden: must be a list of positive integers")
    check(isinstance(tr["epochs"], int) and tr["epochs"] >= 1, "train.epochs: must be an integer >= 1")
    check(isinstance(tr["batch_size"], int) and tr["batch_size"] >= 1, "train.batch_size: must be an integer >= 1")
    check(tr["lr"] > 0, "train.lr: must be > 0")
    check(0 <= tr["momentum"] < 1, "train.momentum: must lie in [0, 1)")
    check(tr["weight_decay"] >= 0, "train.weight_decay: must be >= 0")
    check(0 < tr["lr_gamma"] <= 1, "train.lr_gamma: must lie in (0, 1]")
    check(all(b > a for a, b in zip(tr["lr_steps"], tr["lr_steps"][1:])), "train.lr_steps: must be strictly increasing")
    check((tr["subset_fraction"] is None) != (tr["subset_count"] is None),
          "train.subset_fraction/subset_count: set exactly one")
    check(isinstance(cfg["seeds"], list) and cfg["seeds"] and all(isinstance(s, int) for s in cfg["seeds"]),
          "seeds: must be a nonempty list of integers")
    if ds.get("kind") == "blobs":
        check(ds["classes"] >= 2, "dataset.classes: must be >= 2")
        check(ds["dim"] >= max(2, ds["classes"] - 1), "dataset.dim: must be >= max(2, classes - 1)")
        check(ds["per_class"] >= 1 and ds["test_per_class"] >= 1, "dataset.per_class/test_per_class: must be >= 1")
    elif ds.get("kind") == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            check(key in ds, f"dataset.{key}: required for idx datasets")
    elif ds.get("kind") == "csv":
        for key in ("train", "test", "label_column"):
            check(key in ds, f"dataset.{key}: required for csv datasets")
    sg = cfg["strategy"]
    if sg["name"] == "lure":
        check(0 < sg["k"] <= 1, "strategy.k: must lie in (0, 1]")
        check(sg["method"] in ("snip", "fisher", "magnitude", "random"),
              "strategy.method: expected snip, fisher, magnitude or random")
    if sg["name"] == "sp":
        check(0 <= sg["shrink"] <= 1, "strategy.shrink: must lie in [0, 1]")
        check(sg["noise_std"] >= 0, "strategy.noise_std: must be >= 0")
    if sg["name"] == "llf" and sg["split_layer"] is not None:
        n_layers = len(cfg["network"]["hidden"]) + 1
        check(1 <= sg["split_layer"] <= n_layers + 1, f"strategy.split_layer: must lie in 1..{n_layers + 1}")
    rp = cfg["replay"]
    if rp["kind"] == "buffered":
        check(isinstance(rp.get("capacity"), int) and rp["capacity"] >= 1, "replay.capacity: must be >= 1")
    check(cfg["metrics"]["ece_bins"] >= 1, "metrics.ece_bins: must be >= 1")
    return problems


def config_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k not in ("seeds", "output")}
    text = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def strategy_from_config(sg: dict):
    name = sg["name"]
    if name == "warm":
        return WarmStart()
    if name == "cold":
        return ColdStart()
    if name == "rifle":
        return Rifle()
    if name == "llf":
        return Llf(sg["split_layer"])
    if name == "sp":
        return ShrinkPerturb(sg["shrink"], sg["noise_std"], sg["include_biases"])
    return Lure(sg["k"], sg["method"], sg["include_biases"])


def strategy_label(sg: dict) -> str:
    extras = [f"{k}={sg[k]}" for k in sorted(sg) if k != "name" and sg[k] is not None]
    return sg["name"] + (f"({','.join(extras)})" if extras else "")


def train_config(cfg: dict) -> TrainConfig:
    tr = cfg["train"]
    rp = cfg["replay"]
    replay = {"full": FullReplay(), "none": NoReplay()}.get(rp["kind"]) or BufferedReplay(rp["capacity"])
    return TrainConfig(
        epochs=tr["epochs"],
        batch_size=tr["batch_size"],
        optimizer=OptimizerConfig(tr["lr"], tr["momentum"], tr["weight_decay"], tuple(tr["lr_steps"]),
                                  tr["lr_gamma"], tr["decay_biases"]),
        strategy=strategy_from_config(cfg["strategy"]),
        replay=replay,
        subset_fraction=tr["subset_fraction"],
        subset_count=tr["subset_count"],
        reset_optimizer=tr["reset_optimizer"],
        ece_bins=cfg["metrics"]["ece_bins"],
    )


def build_data(cfg: dict, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Source training set (after noise and caps) and clean test set."""
    ds = cfg["dataset"]
    if ds["kind"] == "blobs":
        source = synth_blobs(ds["classes"], ds["per_class"], ds["dim"], ds["separation"], rng)
        test = synth_blobs(ds["classes"], ds["test_per_class"], ds["dim"], ds["separation"], rng)
    elif ds["kind"] == "idx":
        source = load_idx(ds["train_images"], ds["train_labels"], ds.get("classes"))
        test = load_idx(ds["test_images"], ds["test_labels"], source.class_count)
        if ds.get("train_limit"):
            source = source.take(np.arange(min(ds["train_limit"], len(source))))
        if ds.get("test_limit"):
            test = test.take(np.arange(min(ds["test_limit"], len(test))))
    else:
        source = load_csv(ds["train"], ds["label_column"], ds.get("classes"))
        test = load_csv(ds["test"], ds["label_column"], source.class_count)
    st = cfg["stream"]
    if st["per_class_cap"] is not None:
        source = cap_per_class(source, st["per_class_cap"], rng)
    if st["label_noise"] > 0:
        source = corrupt_labels(source, st["label_noise"], rng)
    return source, test


# -- file helpers ------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        values = [row[h] for h in header] if isinstance(row, dict) else row
        writer.writerow([_fmt(v) for v in values])
    path.write_text(buf.getvalue())


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def verify_manifest(seed_dir: Path) -> list[str]:
    """Files whose digest no longer matches (or that vanished)."""
    manifest = json.loads((seed_dir / "manifest.json").read_text())
    bad = []
    for rel, digest in manifest["files"].items():
        p = seed_dir / rel
        if not p.exists() or sha256_file(p) != digest:
            bad.append(str(p))
    return bad


# -- run ---------------------------------------------------------------------

def execute_seed(cfg: dict, seed: int, seed_dir) -> Path:
    """Run one seed of a resolved config and write every artifact into ``seed_dir``."""
    seed_dir = Path(seed_dir)
    seed_dir.mkdir(parents=True, exist_ok=True)
    rngs = seed_streams(seed)
    source, test = build_data(cfg, rngs["data"])
    stream = make_stream(source, cfg["stream"]["megabatches"], cfg["stream"]["val_fraction"], test, rngs["data"])
    spec = NetworkSpec((source.dim, *cfg["network"]["hidden"], source.class_count))
    tcfg = train_config(cfg)
    result = run_alma(stream, spec, tcfg, rngs)

    chash = config_hash(cfg)
    run_id = f"{chash}-s{seed}"
    tag = strategy_label(cfg["strategy"])
    mcfg = cfg["metrics"]
    files = []

    rows = []
    for r in result.records:
        rows.append({
            "run_id": run_id, "seed": seed, "strategy": tag, "megabatch": r.megabatch,
            "test_acc": r.test_accuracy, "err_count": r.error_count, "cer": r.cumulative_cer,
            "train_acc": r.train_accuracy, "val_acc": r.val_accuracy, "gap": r.generalization_gap,
            "ece": r.ece, "wall_s": r.wall_time_s if mcfg["wall_time"] else "",
        })
    write_csv(seed_dir / "metrics.csv", METRICS_COLUMNS, rows)
    files.append("metrics.csv")
    # Wall-clock times never go into digested files, which must stay reproducible.
    write_csv(seed_dir / "timings.csv", ("megabatch", "wall_s"),
              [(r.megabatch, r.wall_time_s) for r in result.records])

    stream.write_manifest(seed_dir / "stream.json")
    files.append("stream.json")
    write_csv(seed_dir / "strategy_log.csv", ("megabatch", "strategy", "modified"),
              [(e["megabatch"], tag, e["modified"]) for e in result.strategy_log])
    files.append("strategy_log.csv")

    if mcfg["checkpoints"]:
        (seed_dir / "checkpoints").mkdir(exist_ok=True)
        for i, blob in enumerate(result.checkpoints, start=1):
            rel = f"checkpoints/ckpt_{i:03d}.bin"
            (seed_dir / rel).write_bytes(blob)
            files.append(rel)
    if result.masks:
        (seed_dir / "masks").mkdir(exist_ok=True)
        for mask in result.masks:
            rel = f"masks/mask_{mask.megabatch:03d}.bin"
            (seed_dir / rel).write_bytes(mask.to_bytes())
            files.append(rel)

    net = result.network
    final = evaluate(net, stream.test)
    write_csv(seed_dir / "reliability.csv", ("bin", "lower", "upper", "count", "accuracy", "confidence"),
              reliability_table(final.confidences, final.correctness, mcfg["ece_bins"]))
    files.append("reliability.csv")

    if mcfg["overlap"] and len(result.masks) >= 2:
        include_biases = cfg["strategy"].get("include_biases", True)
        ranges = net.layer_ranges(include_biases)
        orows = []
        for a, b in zip(result.masks, result.masks[1:]):
            rep = mask_overlap(a, b, ranges, pair=(a.megabatch, b.megabatch))
            for layer in rep.layers:
                orows.append((a.megabatch, b.megabatch, layer, rep.percent.get(layer, "")))
        write_csv(seed_dir / "overlap.csv", ("prev", "curr", "layer", "overlap_pct"), orows)
        files.append("overlap.csv")

    probe = rngs["probe"]
    clip = tuple(mcfg["input_clip"]) if mcfg["input_clip"] else ((0.0, 1.0) if cfg["dataset"]["kind"] == "idx" else None)
    if mcfg["pgd_epsilons"]:
        clean = accuracy(net, stream.test.inputs, stream.test.labels)
        prow = [(eps, clean, adversarial_accuracy(net, stream.test, eps, probe, mcfg["pgd_steps"],
                                                  mcfg["pgd_step_size"], clip))
                for eps in mcfg["pgd_epsilons"]]
        write_csv(seed_dir / "pgd.csv", ("epsilon", "clean_acc", "adv_acc"), prow)
        files.append("pgd.csv")
    if mcfg["perturb_sigmas"]:
        curve = perturbation_curve(net, stream.test, mcfg["perturb_sigmas"], probe, mcfg["perturb_repeats"])
        write_csv(seed_dir / "perturbation.csv", ("sigma", "accuracy_mean", "accuracy_std"), curve)
        files.append("perturbation.csv")
    if mcfg["corruption_kinds"]:
        crows = corruption_accuracies(net, stream.test, mcfg["corruption_kinds"],
                                      mcfg["corruption_severities"], probe)
        crows.append({"kind": "mean", "severity": "", "accuracy": mean_corruption_accuracy(crows)})
        write_csv(seed_dir / "corruption.csv", ("kind", "severity", "accuracy"), crows)
        files.append("corruption.csv")

    manifest = {
        "artifact_version": __version__,
        "config_hash": chash,
        "run_id": run_id,
        "seed": seed,
        "strategy": tag,
        "files": {rel: sha256_file(seed_dir / rel) for rel in files},
    }
    (seed_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return seed_dir


def _execute_job(job):
    cfg, seed, seed_dir = job
    return str(execute_seed(cfg, seed, seed_dir))


def _run_jobs(jobs, workers: int) -> list[str]:
    if workers <= 1 or len(jobs) <= 1:
        return [_execute_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_execute_job, jobs))


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror}"]) from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"]) from None


def cmd_run(config_path, out=None, workers: int = 1, master_seed=None) -> Path:
    """Run every seed of a config; return the run directory."""
    cfg = resolve_config(load_config(config_path))
    if master_seed is not None:
        cfg["seeds"] = [int(master_seed)]
    root = Path(out) if out else Path(cfg["output"]) if cfg["output"] else default_output_root()
    run_dir = root / config_hash(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    jobs = [(cfg, s, run_dir / f"seed_{s}") for s in cfg["seeds"]]
    _run_jobs(jobs, workers)
    return run_dir


# -- sweep -------------------------------------------------------------------

def _set_path(cfg: dict, dotted: str, value) -> None:
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def expand_grid(base_user: dict, grid: dict) -> list[tuple[dict, dict, dict]]:
    """Cells of a sweep: ``(axis values, strategy section, resolved config)``."""
    if not isinstance(grid, dict):
        raise ConfigError(["grid: must be an object"])
    unknown = set(grid) - {"axes", "strategies"}
    if unknown:
        raise ConfigError([f"grid.{k}: unknown key" for k in sorted(unknown)])
    axes = grid.get("axes", {}) or {}
    strategies = grid.get("strategies") or [base_user.get("strategy", DEFAULTS["strategy"])]
    if not axes and not grid.get("strategies"):
        raise ConfigError(["grid: empty grid (no axes and no strategies)"])
    if any(not isinstance(v, list) or not v for v in axes.values()):
        raise ConfigError(["grid.axes: every axis needs a nonempty list of values"])
    names = list(axes)
    cells = []
    for values in itertools.product(*(axes[n] for n in names)):
        point = dict(zip(names, values))
        for sg in strategies:
            user = copy.deepcopy(base_user)
            user["strategy"] = copy.deepcopy(sg)
            for name, value in point.items():
                path = GRID_ALIASES.get(name, name)
                if path.startswith("strategy.") and path.split(".", 1)[1] not in STRATEGY_KEYS.get(sg.get("name"), ()):
                    continue
                _set_path(user, path, value)
            cells.append((point, user["strategy"], resolve_config(user)))
    return cells


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return float(np.mean(arr)), std


def cmd_sweep(config_path, grid_path, out=None, workers: int = 1, master_seed=None) -> Path:
    base = load_config(config_path)
    grid = load_config(grid_path)
    cells = expand_grid(base, grid)
    root = Path(out) if out else default_output_root()
    sweep_dir = root / ("sweep_" + hashlib.sha256(
        json.dumps([c[2] for c in cells], sort_keys=True).encode()).hexdigest()[:12])
    sweep_dir.mkdir(parents=True, exist_ok=True)
    jobs, cell_dirs = [], []
    for n, (_, _, cfg) in enumerate(cells):
        if master_seed is not None:
            cfg["seeds"] = [int(master_seed)]
        cdir = sweep_dir / f"cell_{n:03d}_{config_hash(cfg)}"
        cdir.mkdir(exist_ok=True)
        (cdir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
        cell_dirs.append(cdir)
        jobs += [(cfg, s, cdir / f"seed_{s}") for s in cfg["seeds"]]
    _run_jobs(jobs, workers)

    axis_names = list((grid.get("axes") or {}).keys())
    header = ["cell", *axis_names, "strategy", "n_seeds", "test_acc_mean", "test_acc_std",
              "cer_mean", "cer_std", "gap_pp_mean", "gap_pp_std"]
    rows = []
    for n, ((point, sg, cfg), cdir) in enumerate(zip(cells, cell_dirs)):
        finals = [read_csv(cdir / f"seed_{s}" / "metrics.csv")[-1] for s in cfg["seeds"]]
        acc = _mean_std([float(f["test_acc"]) for f in finals])
        cerv = _mean_std([int(f["cer"]) for f in finals])
        gap = _mean_std([100.0 * float(f["gap"]) for f in finals])
        rows.append([cdir.name, *[point[a] for a in axis_names], strategy_label(cfg["strategy"]),
                     len(finals), *acc, *cerv, *gap])
    write_csv(sweep_dir / "aggregate.csv", header, rows)
    return sweep_dir


# -- report ------------------------------------------------------------------

def find_seed_dirs(path: Path) -> list[Path]:
    path = Path(path)
    if (path / "manifest.json").exists():
        return [path]
    return sorted(p.parent for p in path.rglob("manifest.json"))


def recount_cer(seed_dir) -> tuple[list[int], list[int]]:
    """Stored cumulative CER and an independent recount from saved checkpoints."""
    seed_dir = Path(seed_dir)
    cfg = resolve_config(json.loads((seed_dir.parent / "config.json").read_text()))
    manifest = json.loads((seed_dir / "manifest.json").read_text())
    rngs = seed_streams(manifest["seed"])
    _, test = build_data(cfg, rngs["data"])
    stored = [int(r["cer"]) for r in read_csv(seed_dir / "metrics.csv")]
    errors = []
    for ckpt in sorted((seed_dir / "checkpoints").glob("ckpt_*.bin")):
        net = read_checkpoint(ckpt.read_bytes())
        errors.append(evaluate(net, test).error_count)
    return stored, cer(errors)


def cmd_report(run_dirs, out=None) -> Path:
    missing = [str(d) for d in run_dirs if not Path(d).exists()]
    if missing:
        raise ConfigError([f"{m}: no such run directory" for m in missing])
    seed_dirs = []
    for d in run_dirs:
        found = find_seed_dirs(Path(d))
        if not found:
            raise ConfigError([f"{d}: contains no completed runs"])
        seed_dirs += found
    corrupt = [p for sd in seed_dirs for p in verify_manifest(sd)]
    if corrupt:
        raise ConfigError([f"{p}: digest mismatch" for p in corrupt])

    groups, series = {}, {"accuracy": [], "overlap": [], "perturbation": [], "pgd": []}
    for sd in seed_dirs:
        manifest = json.loads((sd / "manifest.json").read_text())
        rows = read_csv(sd / "metrics.csv")
        key = (manifest["strategy"], manifest["config_hash"])
        groups.setdefault(key, []).append(rows[-1])
        for r in rows:
            series["accuracy"].append([r["run_id"], r["strategy"], r["seed"], r["megabatch"], r["test_acc"], r["cer"]])
        for name, cols in (("overlap", ("prev", "curr", "layer", "overlap_pct")),
                           ("perturbation", ("sigma", "accuracy_mean", "accuracy_std")),
                           ("pgd", ("epsilon", "clean_acc", "adv_acc"))):
            f = sd / f"{name}.csv"
            if f.exists():
                for r in read_csv(f):
                    series[name].append([manifest["run_id"], manifest["strategy"], *[r[c] for c in cols]])

    header = ["strategy", "config_hash", "n_seeds", "test_acc_mean", "test_acc_std", "cer_mean", "cer_std",
              "gap_pp_mean", "gap_pp_std"]
    table = []
    for (tag, chash), finals in sorted(groups.items()):
        acc = _mean_std([100.0 * float(f["test_acc"]) for f in finals])
        cerv = _mean_std([int(f["cer"]) for f in finals])
        gap = _mean_std([100.0 * float(f["gap"]) for f in finals])
        table.append([tag, chash, len(finals), *acc, *cerv, *gap])

    out_dir = Path(out) if out else default_output_root() / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "summary.csv", header, table)
    width = max([len("strategy")] + [len(row[0]) for row in table])
    lines = [f"{'strategy':<{width}} {'seeds':>5} {'test acc (%)':>16} {'CER':>16} {'gap (pp)':>16}"]
    for tag, chash, n, am, asd, cm, csd, gm, gsd in table:
        lines.append(f"{tag:<{width}} {n:>5} {am:>9.2f} ± {asd:<4.2f} {cm:>9.0f} ± {csd:<4.0f}"
                     f" {gm:>9.2f} ± {gsd:<4.2f}")
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n")
    write_csv(out_dir / "accuracy_vs_megabatch.csv",
              ("run_id", "strategy", "seed", "megabatch", "test_acc", "cer"), series["accuracy"])
    write_csv(out_dir / "overlap_vs_layer.csv",
              ("run_id", "strategy", "prev", "curr", "layer", "overlap_pct"), series["overlap"])
    write_csv(out_dir / "accuracy_vs_sigma.csv",
              ("run_id", "strategy", "sigma", "accuracy_mean", "accuracy_std"), series["perturbation"])
    write_csv(out_dir / "accuracy_vs_epsilon.csv",
              ("run_id", "strategy", "epsilon", "clean_acc", "adv_acc"), series["pgd"])
    return out_dir


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    def add_globals(p, default):
        # Accepted before or after the subcommand; SUPPRESS keeps a subparser from
        # overwriting a value given earlier.
        p.add_argument("--workers", type=int, default=default(1), help="parallel runs (default 1)")
        p.add_argument("--out", default=default(None), help=f"output root (default ${OUTPUT_ENV} or ./runs)")
        p.add_argument("--master-seed", type=int, default=default(None), help="override the config's seed list")
        p.add_argument("-v", "--verbose", action="store_true", default=default(False))

    parser = argparse.ArgumentParser(prog="lure", description=__doc__.splitlines()[0])
    add_globals(parser, lambda v: v)
    shared = argparse.ArgumentParser(add_help=False)
    add_globals(shared, lambda v: argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", parents=[shared], help="run one experiment config")
    p.add_argument("config")
    p = sub.add_parser("sweep", parents=[shared], help="run a grid of configs")
    p.add_argument("config")
    p.add_argument("--grid", required=True)
    p = sub.add_parser("report", parents=[shared], help="aggregate finished runs into tables and plot data")
    p.add_argument("run_dirs", nargs="+")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        if args.command == "run":
            where = cmd_run(args.config, args.out, args.workers, args.master_seed)
        elif args.command == "sweep":
            where = cmd_sweep(args.config, args.grid, args.out, args.workers, args.master_seed)
        else:
            where = cmd_report(args.run_dirs, args.out)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 1
        log.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"{args.command}: wrote {where} ({time.perf_counter() - started:.1f}s)")
    return 0
