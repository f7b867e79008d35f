"""Experiment harness: train, unlearn, sweep, baselines and reports.

Every command is driven by an :class:`~dkvb_unlearn.config.ExperimentConfig`;
config plus seeds fully determine all outputs. Per-seed artifacts live in
``<output>/seed-<s>/``; reports go to ``<output>/reports/``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import struct
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import baselines as bl
from .bottleneck import (DegenerateModelError, build_model, load_checkpoint, models_identical,
                         save_checkpoint, trace_pairs)
from .config import OUTPUT_ENV, PRESETS, ConfigError, ExperimentConfig, load_config, parse_config
from .data import (EmbeddingFormatError, LabeledEmbeddings, generate_synthetic, load_embeddings,
                   misclassification_counts, read_csv_embeddings, select_forget_class,
                   split_by_classes, write_embeddings)
from .evaluation import FlopLedger, MetricsReport, relative_change
from .training import evaluate, train_values
from .unlearning import (ActivationCounts, record_activations, unlearn_via_activations,
                         unlearn_via_examples)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DEGENERATE = 0, 2, 3, 4
BASELINES = ("scrub", "finetune", "retrain", "neggrad")
SUMMARY_SCHEMA = "dkvb-unlearn/summary/v1"


class DataError(RuntimeError):
    """Missing or unusable inputs (checkpoints, runs, embedding files)."""


# ------------------------------------------------------------------ file io

def atomic_write(path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    data = payload.encode("utf-8") if isinstance(payload, str) else payload
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


def write_csv(path, rows, columns) -> Path:
    buf = io.StringIO(newline="")
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in columns})
    return atomic_write(path, buf.getvalue())


def write_jsonl(path, rows) -> Path:
    return atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ pipeline pieces

def load_data(cfg: ExperimentConfig, seed: int) -> tuple[LabeledEmbeddings, LabeledEmbeddings]:
    """Train/test splits for one seed. Synthetic data is redrawn per seed."""
    src = cfg.data
    if src.synthetic is not None:
        return generate_synthetic(replace(src.synthetic, seed=src.synthetic.seed + seed))
    try:
        train, test = load_embeddings(src.train_path), load_embeddings(src.test_path)
    except OSError as exc:
        raise DataError(f"cannot read embeddings: {exc}") from exc
    if train.dim != test.dim:
        raise DataError(f"train/test dimension mismatch: {train.dim} vs {test.dim}")
    k = max(train.num_classes, test.num_classes)
    return replace(train, num_classes=k), replace(test, num_classes=k)


def seed_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return cfg.output_root() / f"seed-{seed}"


def choose_forget_classes(cfg: ExperimentConfig, seed: int, model, test: LabeledEmbeddings) -> list[int]:
    mode = cfg.unlearn.forget_classes.strip()
    k = test.num_classes
    if mode == "auto":
        # best-learned class of the bottleneck model on the test split
        return [select_forget_class(misclassification_counts(test.labels, model.predict(test.features), k))]
    if mode == "random":
        return [int(np.random.default_rng([seed, 51]).integers(k))]
    try:
        classes = sorted({int(t) for t in mode.replace(",", " ").split()})
    except ValueError as exc:
        raise ConfigError(f"forget_classes must be auto, random or class ids, got {mode!r}") from exc
    if not classes or any(not 0 <= c < k for c in classes):
        raise ConfigError(f"forget class ids must lie in [0, {k})")
    return classes


def _acc(model, data) -> float | None:
    return evaluate(model, data) if len(data) else None


def accuracy_cells(model, bundle) -> dict:
    """The six accuracy cells of an initial-performance row."""
    return {
        "D_train": _acc(model, bundle.train),
        "D_train_retain": _acc(model, bundle.train_retain),
        "D_train_forget": _acc(model, bundle.train_forget),
        "D_test": _acc(model, bundle.test),
        "D_test_retain": _acc(model, bundle.test_retain),
        "D_test_forget": _acc(model, bundle.test_forget),
    }


def split_accuracies(model, bundle) -> dict:
    return {
        "train_retain": _acc(model, bundle.train_retain),
        "train_forget": _acc(model, bundle.train_forget),
        "test_retain": _acc(model, bundle.test_retain),
        "test_forget": _acc(model, bundle.test_forget),
    }


def _load_dkvb(cfg, seed):
    path = seed_dir(cfg, seed) / "dkvb.ckpt"
    if not path.exists():
        raise DataError(f"missing checkpoint {path}; run 'train' first")
    try:
        return load_checkpoint(path)
    except (ValueError, struct.error) as exc:
        raise DataError(f"unreadable checkpoint {path}: {exc}") from exc


def _load_linear(cfg, seed):
    path = seed_dir(cfg, seed) / "linear.npz"
    if not path.exists():
        raise DataError(f"missing linear head {path}; run 'train' first")
    return bl.LinearHead.load(path)


def _new_ledger(cfg) -> FlopLedger:
    return FlopLedger(cfg.flops_per_mac, encoder_macs=cfg.data.encoder_macs)


def _seeds(cfg, seeds):
    return tuple(cfg.seeds if seeds is None else seeds)


# ------------------------------------------------------------------ commands

def training_ledger(cfg, model, n_train: int, res) -> FlopLedger:
    """Training-time cost: EMA key init (one nearest-key search per head)
    plus value training. Kept apart from every unlearning ledger."""
    c = model.config
    ledger = _new_ledger(cfg)
    search = c.num_codebooks * c.key_dim * c.input_dim + c.num_codebooks * c.pairs_per_codebook * c.key_dim
    ledger.add_forward("key-init", search, c.key_init_epochs * n_train)
    ledger.add_forward("train-dkvb", model, res.examples_forwarded)
    ledger.add_backward("train-dkvb", model.values.size, res.examples_forwarded, res.optimizer_steps)
    return ledger


INITIAL_COLUMNS = ("seed", "model", "forget_classes", "D_train", "D_train_retain", "D_train_forget",
                   "D_test", "D_test_retain", "D_test_forget")


def cmd_train(cfg: ExperimentConfig, seeds=None) -> list[dict]:
    """Train the bottleneck model and the linear head for each seed.

    Writes ``dkvb.ckpt``, ``linear.npz``, per-epoch metrics and the
    initial-performance rows. Returns those rows.
    """
    rows = []
    for seed in _seeds(cfg, seeds):
        out = seed_dir(cfg, seed)
        train, test = load_data(cfg, seed)
        model = build_model(cfg.bottleneck_config(train.dim, train.num_classes, seed), train)
        res = train_values(model, train, replace(cfg.train, seed=seed), eval_data=test, workers=cfg.workers)
        head = bl.LinearHead(train.num_classes, train.dim, seed=seed)
        ledger = training_ledger(cfg, model, len(train), res)
        lres = bl.train_linear(head, train, replace(cfg.linear, seed=seed), eval_data=test, ledger=ledger)

        forget = choose_forget_classes(cfg, seed, model, test)
        bundle = split_by_classes(train, test, forget)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out / "dkvb.ckpt")
        buf = io.BytesIO()
        np.savez(buf, weight=head.weight, bias=head.bias)
        atomic_write(out / "linear.npz", buf.getvalue())
        if cfg.unlearn.use_cached_activations:
            # selections are fixed once keys freeze, so last-epoch traces stay valid
            buf = io.BytesIO()
            np.save(buf, res.last_epoch_trace)
            atomic_write(out / "train_trace.npy", buf.getvalue())

        history = ([{"model": "dkvb", "seed": seed, **r} for r in res.history]
                   + [{"model": "linear", "seed": seed, **r} for r in lres.history])
        write_jsonl(out / "train_metrics.jsonl", history)
        atomic_write(out / "train_flops.json", json.dumps(ledger.to_dict(), indent=2))
        atomic_write(out / "forget_classes.json", json.dumps({"seed": seed, "forget_classes": forget}))
        tag = " ".join(map(str, forget))
        for name, m in (("dkvb", model), ("linear", head)):
            rows.append({"seed": seed, "model": name, "forget_classes": tag, **accuracy_cells(m, bundle)})
        write_csv(out / "initial_performance.csv", [r for r in rows if r["seed"] == seed], INITIAL_COLUMNS)
    write_csv(cfg.output_root() / "initial_performance.csv", rows, INITIAL_COLUMNS)
    return rows


def _forget_counts(cfg, seed, model, bundle, train, ledger, workers):
    """Activation counts on the forget training split, from cached training
    traces when enabled (no forward cost) or from a fresh forward pass."""
    if cfg.unlearn.use_cached_activations:
        path = seed_dir(cfg, seed) / "train_trace.npy"
        if not path.exists():
            raise DataError(f"missing cached traces {path}; train with use_cached_activations = true")
        trace = np.load(path)
        if trace.shape[0] != len(train):
            raise DataError("cached traces do not match the training split")
        counts = ActivationCounts.from_trace(trace[np.isin(train.labels, sorted(bundle.forget_classes))])
        counts.macs_per_example = 0
        return counts
    return record_activations(model, bundle.train_forget, ledger=ledger, workers=workers)


def unlearn_once(cfg, seed, model, bundle, train, method, budget, ledger):
    if method == "activations":
        counts = _forget_counts(cfg, seed, model, bundle, train, ledger, cfg.workers)
        n = len(counts) if budget < 0 else budget
        return unlearn_via_activations(model, counts, n)
    n = len(bundle.train_forget) if budget < 0 else budget
    return unlearn_via_examples(model, bundle.train_forget, n, seed=seed, ledger=ledger, workers=cfg.workers)


def cmd_unlearn(cfg: ExperimentConfig, seeds=None, *, method=None, budget=None) -> list[MetricsReport]:
    """Unlearn the forget class(es) from each seed's checkpoint."""
    method = method or cfg.unlearn.method
    budget = cfg.unlearn.budget if budget is None else budget
    if method not in ("activations", "examples"):
        raise ConfigError(f"unknown unlearning method {method!r}")
    reports = []
    for seed in _seeds(cfg, seeds):
        model = _load_dkvb(cfg, seed)
        train, test = load_data(cfg, seed)
        forget = choose_forget_classes(cfg, seed, model, test)
        bundle = split_by_classes(train, test, forget)
        pre_trace = model.forward(bundle.train_forget.features, workers=cfg.workers).trace
        before = split_accuracies(model, bundle)
        ledger = _new_ledger(cfg)
        rep = unlearn_once(cfg, seed, model, bundle, train, method, budget, ledger)
        post_trace = model.forward(bundle.train_forget.features, workers=cfg.workers).trace
        degenerate = bool(model.mask.all())
        after = split_accuracies(model, bundle)
        extra = {
            "budget": rep.budget,
            "pairs_masked": rep.pairs_masked,
            "forward_examples_processed": rep.forward_examples_processed,
            "forget_trace_disjoint": trace_pairs(pre_trace).isdisjoint(trace_pairs(post_trace)),
            "degenerate": degenerate,
            "cached_activations": bool(cfg.unlearn.use_cached_activations and method == "activations"),
        }
        report = MetricsReport(f"dkvb-{method}", before, after, ledger, seed, forget, extra)
        out = seed_dir(cfg, seed)
        save_checkpoint(model, out / f"dkvb-{method}.ckpt")
        atomic_write(cfg.output_root() / "reports" / f"dkvb-{method}-seed{seed}.json", report.to_json())
        reports.append(report)
    return reports


SWEEP_COLUMNS = ("seed", "method", "budget", "pairs_masked", "test_retain_acc", "test_forget_acc")


def _sweep_seed(cfg, seed, method, grid):
    model = _load_dkvb(cfg, seed)
    reference = model.copy()
    train, test = load_data(cfg, seed)
    bundle = split_by_classes(train, test, choose_forget_classes(cfg, seed, model, test))
    saved = model.mask.copy()
    counts = _forget_counts(cfg, seed, model, bundle, train, None, 1) if method == "activations" else None
    rows = []
    for budget in grid:
        model.mask[...] = saved
        if method == "activations":
            rep = unlearn_via_activations(model, counts, budget)
        else:
            rep = unlearn_via_examples(model, bundle.train_forget, budget, seed=seed)
        rows.append({"seed": seed, "method": method, "budget": budget, "pairs_masked": rep.pairs_masked,
                     "test_retain_acc": _acc(model, bundle.test_retain),
                     "test_forget_acc": _acc(model, bundle.test_forget)})
    model.mask[...] = saved
    if not models_identical(model, reference):
        raise RuntimeError("sweep failed to restore the pre-unlearning model")
    return rows


def cmd_sweep(cfg: ExperimentConfig, seeds=None, *, method=None, grid=None, jobs: int = 1) -> list[dict]:
    """Accuracy curve over a budget grid; one row per (seed, budget) plus mean rows."""
    method = method or cfg.unlearn.method
    grid = [int(b) for b in (cfg.unlearn.grid if grid is None else grid)]
    if not grid:
        raise ConfigError("sweep grid is empty")
    if any(b < 0 for b in grid):
        raise ConfigError("sweep budgets must be non-negative")
    if method not in ("activations", "examples"):
        raise ConfigError(f"unknown unlearning method {method!r}")
    seeds = _seeds(cfg, seeds)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        per_seed = list(pool.map(lambda s: _sweep_seed(cfg, s, method, grid), seeds))
    rows = [r for rs in per_seed for r in rs]
    for i, budget in enumerate(grid):
        at = [rs[i] for rs in per_seed]
        mean = {"seed": "mean", "method": method, "budget": budget}
        for col in ("pairs_masked", "test_retain_acc", "test_forget_acc"):
            vals = [r[col] for r in at if r[col] is not None]
            mean[col] = float(np.mean(vals)) if vals else None
        rows.append(mean)
    write_csv(cfg.output_root() / f"sweep-{method}.csv", rows, SWEEP_COLUMNS)
    return rows


def run_baseline(cfg, which, head, bundle, seed, ledger):
    num_classes = head.num_classes
    if which == "scrub":
        return bl.scrub_unlearn(head, bundle, replace(cfg.scrub, seed=seed), ledger=ledger)
    if which == "finetune":
        return bl.finetune_retain(head.copy(), bundle, replace(cfg.finetune, seed=seed), ledger=ledger)
    if which == "retrain":
        return bl.retrain_scratch(bundle, replace(cfg.retrain, seed=seed), num_classes=num_classes, ledger=ledger)
    if which == "neggrad":
        return bl.neggrad_plus(head.copy(), bundle, replace(cfg.neggrad, seed=seed), cfg.neggrad_beta, ledger=ledger)
    raise ConfigError(f"unknown baseline {which!r}; choose from {BASELINES}")


def cmd_baseline(cfg: ExperimentConfig, which: str, seeds=None) -> list[MetricsReport]:
    """Run a gradient-based baseline on each seed's linear head.

    The forget class is chosen from the bottleneck model of the same seed so
    both architectures forget the same class.
    """
    if which not in BASELINES:
        raise ConfigError(f"unknown baseline {which!r}; choose from {BASELINES}")
    reports = []
    for seed in _seeds(cfg, seeds):
        head = _load_linear(cfg, seed)
        train, test = load_data(cfg, seed)
        forget = choose_forget_classes(cfg, seed, _load_dkvb(cfg, seed), test)
        bundle = split_by_classes(train, test, forget)
        before = split_accuracies(head, bundle)
        ledger = _new_ledger(cfg)
        res = run_baseline(cfg, which, head, bundle, seed, ledger)
        extra = {"stopped_early": res.stopped_early, "epochs_run": max((r["epoch"] for r in res.history), default=0)}
        if which == "scrub":
            extra["schedule"] = [[r["epoch"], r["phase"]] for r in res.history]
        report = MetricsReport(which, before, split_accuracies(res.head, bundle), ledger, seed, forget, extra)
        out = seed_dir(cfg, seed)
        write_jsonl(out / f"{which}_history.jsonl", [{"seed": seed, **r} for r in res.history])
        buf = io.BytesIO()
        np.savez(buf, weight=res.head.weight, bias=res.head.bias)
        atomic_write(out / f"linear-{which}.npz", buf.getvalue())
        atomic_write(cfg.output_root() / "reports" / f"{which}-seed{seed}.json", report.to_json())
        reports.append(report)
    return reports


ACCURACY_COLUMNS = ("method", "seed", "forget_classes", "retain_before", "retain_after", "retain_delta_pct",
                  "forget_before", "forget_after", "forget_delta_pct")
FLOP_COLUMNS = ("method", "seed", "forward_flops", "backward_flops", "total_flops")


def _delta(before, after):
    return relative_change(before, after) if before else None


def cmd_report(run_dir) -> tuple[list[dict], list[dict]]:
    """Join every MetricsReport under ``run_dir/reports`` into two tables.

    Methods with more than one seed also get a ``mean`` row.
    """
    files = sorted(Path(run_dir, "reports").glob("*.json"))
    if not files:
        raise DataError(f"no reports found under {Path(run_dir, 'reports')}")
    reports = []
    for f in files:
        try:
            d = json.loads(f.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"unreadable report {f}: {exc}") from exc
        reports.append(MetricsReport.from_dict(d))
    reports.sort(key=lambda r: (r.method, r.seed))
    acc_rows, flop_rows = [], []
    for r in reports:
        acc_rows.append({"method": r.method, "seed": r.seed, "forget_classes": " ".join(map(str, r.forget_classes)),
                   "retain_before": r.before["test_retain"], "retain_after": r.after["test_retain"],
                   "retain_delta_pct": _delta(r.before["test_retain"], r.after["test_retain"]),
                   "forget_before": r.before["test_forget"], "forget_after": r.after["test_forget"],
                   "forget_delta_pct": _delta(r.before["test_forget"], r.after["test_forget"])})
        flop_rows.append({"method": r.method, "seed": r.seed, "forward_flops": r.ledger.forward,
                   "backward_flops": r.ledger.backward, "total_flops": r.ledger.total})
    for method in sorted({r.method for r in reports}):
        mine_acc = [row for row in acc_rows if row["method"] == method]
        if len(mine_acc) < 2:
            continue
        mean_acc = {"method": method, "seed": "mean", "forget_classes": ""}
        for col in ACCURACY_COLUMNS[3:]:
            vals = [row[col] for row in mine_acc if row[col] is not None]
            mean_acc[col] = float(np.mean(vals)) if vals else None
        acc_rows.append(mean_acc)
        mine_flop = [row for row in flop_rows if row["method"] == method]
        flop_rows.append({"method": method, "seed": "mean",
                          **{col: float(np.mean([row[col] for row in mine_flop])) for col in FLOP_COLUMNS[2:]}})
    write_csv(Path(run_dir, "accuracy_table.csv"), acc_rows, ACCURACY_COLUMNS)
    write_csv(Path(run_dir, "flop_table.csv"), flop_rows, FLOP_COLUMNS)
    atomic_write(Path(run_dir, "summary.json"),
                 json.dumps({"schema": SUMMARY_SCHEMA, "accuracy": acc_rows, "flops": flop_rows}, indent=2))
    return acc_rows, flop_rows


# ------------------------------------------------------------------ dry run

def _batch_sizes(n: int, batch_size: int) -> list[int]:
    return [min(batch_size, n - i) for i in range(0, n, batch_size)]


def estimate_baseline_ledger(cfg: ExperimentConfig, which: str, params: int, n_retain: int, n_forget: int,
                             ledger: FlopLedger | None = None) -> FlopLedger:
    """Ledger of a baseline run for its full epoch budget (no early stop),
    built from batch counts alone."""
    led = ledger if ledger is not None else _new_ledger(cfg)
    if which in ("finetune", "retrain"):
        c = cfg.finetune if which == "finetune" else cfg.retrain
        for _ in range(c.epochs):
            for b in _batch_sizes(n_retain, c.batch_size):
                led.add_forward(which, params, b)
                led.add_backward(which, params, b, 1)
    elif which == "neggrad":
        c = cfg.neggrad
        if cfg.neggrad_beta == 1.0:
            return estimate_baseline_ledger(cfg, "finetune", params, n_retain, n_forget, led)
        f_sizes = _batch_sizes(n_forget, c.batch_size)
        for _ in range(c.epochs):
            for i, b in enumerate(_batch_sizes(n_retain, c.batch_size)):
                n = b + f_sizes[i % len(f_sizes)]
                led.add_forward("neggrad", params, n)
                led.add_backward("neggrad", params, n, 1)
    elif which == "scrub":
        c = cfg.scrub
        for epoch, phase in bl.scrub_schedule(c):
            n, bs = (n_forget, c.forget_batch_size) if phase == "max" else (n_retain, c.retain_batch_size)
            for b in _batch_sizes(n, bs):
                led.add_forward(f"scrub-{phase}", params, 2 * b)
                led.add_backward(f"scrub-{phase}", params, b, 1)
    else:
        raise ConfigError(f"unknown baseline {which!r}")
    return led


def cmd_flops(cfg: ExperimentConfig, seed: int | None = None) -> dict:
    """FLOP estimates for every method without training anything."""
    seed = _seeds(cfg, None)[0] if seed is None else seed
    train, _ = load_data(cfg, seed)
    k, d = train.num_classes, train.dim
    bcfg = cfg.bottleneck_config(d, k, seed)
    dkvb_macs = (bcfg.num_codebooks * bcfg.key_dim * d
                 + bcfg.num_codebooks * bcfg.pairs_per_codebook * bcfg.key_dim
                 + bcfg.num_codebooks * bcfg.top_k * k)
    params = k * d + k
    mode = cfg.unlearn.forget_classes.strip()
    sizes = np.bincount(train.labels, minlength=k)
    if mode in ("auto", "random"):
        n_forget = int(sizes.max())      # upper bound until the class is known
    else:
        n_forget = int(sizes[[int(t) for t in mode.replace(",", " ").split()]].sum())
    n_retain = len(train) - n_forget
    out = {"schema": "dkvb-unlearn/flops-dry-run/v1", "dkvb_macs_per_example": dkvb_macs,
           "linear_macs_per_example": params, "encoder_macs_per_example": cfg.data.encoder_macs,
           "forget_train_examples": n_forget, "retain_train_examples": n_retain, "methods": {}}
    act = _new_ledger(cfg)
    if not cfg.unlearn.use_cached_activations:
        act.add_forward("record", dkvb_macs, n_forget)
    n_e = n_forget if cfg.unlearn.budget < 0 else min(cfg.unlearn.budget, n_forget)
    ex = _new_ledger(cfg)
    if n_e:
        ex.add_forward("unlearn", dkvb_macs, n_e)
    out["methods"]["dkvb-activations"] = {"forward_flops": act.forward, "backward_flops": act.backward}
    out["methods"]["dkvb-examples"] = {"forward_flops": ex.forward, "backward_flops": ex.backward}
    for which in BASELINES:
        led = estimate_baseline_ledger(cfg, which, params, n_retain, n_forget)
        out["methods"][which] = {"forward_flops": led.forward, "backward_flops": led.backward}
    atomic_write(cfg.output_root() / "flops_dry_run.json", json.dumps(out, indent=2))
    return out


def cmd_convert(csv_path, out_path, num_classes: int | None = None) -> LabeledEmbeddings:
    data = read_csv_embeddings(csv_path, num_classes)
    tmp = Path(str(out_path) + ".tmp")
    write_embeddings(tmp, data)
    os.replace(tmp, out_path)
    return data


# ------------------------------------------------------------------ argparse

def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dkvb-unlearn", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="INI config file (layered on top of --preset)")
    p.add_argument("--preset", default="desk", choices=sorted(PRESETS), help="base hyperparameters")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config field; repeatable")
    p.add_argument("--output", help=f"output directory (relative paths resolve under ${OUTPUT_ENV})")
    p.add_argument("--seeds", type=_int_list, help="comma-separated seeds")
    p.add_argument("--workers", type=int, help="threads per forward pass")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("train", help="train the bottleneck model and the linear head")

    u = sub.add_parser("unlearn", help="mask key-value pairs of the forget class")
    u.add_argument("--method", choices=("activations", "examples"))
    u.add_argument("--budget", type=int, help="N_a or N_e; -1 for the full forget set")
    u.add_argument("--forget-classes", help="auto, random, or comma-separated ids")
    u.add_argument("--cached-activations", action="store_true", help="use traces cached during training")

    s = sub.add_parser("sweep", help="accuracy curve over a budget grid")
    s.add_argument("--method", choices=("activations", "examples"))
    s.add_argument("--grid", type=_int_list, help="comma-separated budgets")
    s.add_argument("--jobs", type=int, default=1, help="seeds run concurrently")

    b = sub.add_parser("baseline", help="gradient-based unlearning on the linear head")
    b.add_argument("which", choices=BASELINES)

    r = sub.add_parser("report", help="join reports into table CSVs")
    r.add_argument("run_dir", nargs="?", help="defaults to the configured output directory")

    sub.add_parser("flops", help="FLOP estimates without training")

    c = sub.add_parser("convert", help="CSV embeddings to EMB1")
    c.add_argument("csv")
    c.add_argument("out")
    c.add_argument("--num-classes", type=int)
    return p


def _config_from_args(args) -> ExperimentConfig:
    overrides = list(args.overrides)
    if args.output:
        overrides.append(f"experiment.output_dir={args.output}")
    if args.seeds:
        overrides.append("experiment.seeds=" + ",".join(map(str, args.seeds)))
    if args.workers:
        overrides.append(f"experiment.workers={args.workers}")
    if getattr(args, "forget_classes", None):
        overrides.append(f"unlearn.forget_classes={args.forget_classes}")
    if getattr(args, "cached_activations", False):
        overrides.append("unlearn.use_cached_activations=true")
    if args.config:
        return load_config(args.config, args.preset, overrides)
    return parse_config("", args.preset, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "convert":
            data = cmd_convert(args.csv, args.out, args.num_classes)
            print(f"wrote {len(data)} examples of dim {data.dim} to {args.out}")
            return EXIT_OK
        cfg = _config_from_args(args)
        if args.command == "train":
            for row in cmd_train(cfg):
                print(json.dumps(row))
        elif args.command == "unlearn":
            degenerate = False
            for rep in cmd_unlearn(cfg, method=args.method, budget=args.budget):
                print(json.dumps({"seed": rep.seed, "method": rep.method, "forget_classes": rep.forget_classes,
                                  "after": rep.after, "pairs_masked": rep.extra["pairs_masked"]}))
                degenerate |= rep.extra["degenerate"]
            if degenerate:
                print("error: every key in every codebook is masked", file=sys.stderr)
                return EXIT_DEGENERATE
        elif args.command == "sweep":
            for row in cmd_sweep(cfg, method=args.method, grid=args.grid, jobs=args.jobs):
                print(json.dumps(row))
        elif args.command == "baseline":
            for rep in cmd_baseline(cfg, args.which):
                print(json.dumps({"seed": rep.seed, "method": rep.method, "after": rep.after,
                                  "forward_flops": rep.ledger.forward, "backward_flops": rep.ledger.backward}))
        elif args.command == "report":
            acc_rows, flop_rows = cmd_report(args.run_dir or cfg.output_root())
            print(f"{len(acc_rows)} rows in accuracy_table.csv, {len(flop_rows)} rows in flop_table.csv")
        elif args.command == "flops":
            print(json.dumps(cmd_flops(cfg), indent=2))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, EmbeddingFormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DegenerateModelError as exc:
        print(f"degenerate model: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
