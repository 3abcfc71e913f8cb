"""Command-line interface.

Subcommands: generate, crossval, train, evaluate, detect, sweep, project.
Runs are driven by a JSON config file; command-line flags override config
values.  Every run writes its fully resolved configuration next to its
outputs (the only nondeterministic field there is the timestamp).

Exit codes: 0 success, 1 internal error, 2 user/config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import os
import sys
import traceback
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .bundle import DatasetBundle, make_bundle, read_bundle, write_bundle
from .datagen import CategoryPattern, WorldConfig
from .errors import BundleFormatError, DimensionError, UsageError
from .estimators import (
    ESTIMATOR_KINDS,
    NeuralCategoryClassifier,
    build_estimator,
    records_from_bundle,
)
from .evaluation import (
    METRIC_COLUMNS,
    MetricReport,
    compute_metrics,
    corrupt_labels,
    detection_scores,
    kmeans,
    mds_project,
    sparsity_sweep,
    stratified_kfold,
)

DEFAULT_KBAR_VALUES = (512, 1024, 2048, 4096, 8192, 16384, 32768, 65536)


@dataclass
class RunConfig:
    dataset: str = "bundle"
    out_dir: str = "out"
    model: str = "proposed"
    seed: int = 0
    epochs: int = 128
    batch_size: int = 64
    lr_max: float = 0.08
    lr_max_baseline: float = 0.3
    weight_decay: float = 1e-4
    momentum_max: float = 0.95
    momentum_min: float = 0.85
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    dropout: float = 0.1
    kbar: int = 8192
    hidden_dim: int = 64
    num_blocks: int = 20
    folds: int = 5
    k_threshold: Optional[int] = None
    detect_fraction: float = 0.1
    num_clusters: int = 5
    kbar_values: List[int] = field(default_factory=lambda: list(DEFAULT_KBAR_VALUES))
    world: dict = field(default_factory=dict)

    def validate(self):
        if self.model not in ESTIMATOR_KINDS:
            raise UsageError(f"model must be one of {ESTIMATOR_KINDS}, got {self.model!r}")
        if self.epochs < 1:
            raise UsageError("epochs must be at least 1")
        if self.kbar < 1:
            raise UsageError("kbar must be at least 1")
        if self.folds < 2:
            raise UsageError("folds must be at least 2")
        if self.num_clusters < 1:
            raise UsageError("num_clusters must be at least 1")


def load_config(path: Optional[str], overrides: dict) -> RunConfig:
    values = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(loaded) - known
        if unknown:
            raise UsageError(f"unknown config fields: {sorted(unknown)}")
        values.update(loaded)
    values.update({k: v for k, v in overrides.items() if v is not None})
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def world_config_from(cfg: RunConfig) -> WorldConfig:
    fields = dict(cfg.world)
    fields.setdefault("seed", cfg.seed)
    patterns = fields.pop("patterns", None)
    if patterns is not None:
        fields["patterns"] = tuple(CategoryPattern(**p) for p in patterns)
    return WorldConfig(**fields)


def _write_resolved_config(cfg: RunConfig, command: str) -> None:
    os.makedirs(cfg.out_dir, exist_ok=True)
    payload = dataclasses.asdict(cfg)
    payload["command"] = command
    payload["timestamp"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    with open(os.path.join(cfg.out_dir, "resolved_config.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def canonical_text(path: str) -> str:
    """File contents with volatile fields (timestamps, timings) blanked.

    Used to compare outputs of two runs for determinism.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if path.endswith(".json"):
        keep = [ln for ln in lines if '"timestamp"' not in ln]
        return "\n".join(keep)
    if not lines:
        return ""
    header = lines[0].split(",")
    volatile = {i for i, name in enumerate(header) if "time" in name.lower()}
    if not volatile:
        return "\n".join(lines)
    out = [lines[0]]
    for ln in lines[1:]:
        cells = ln.split(",")
        out.append(",".join("*" if i in volatile else c for i, c in enumerate(cells)))
    return "\n".join(out)


# ---------------------------------------------------------------------------
# CSV helpers (repr-based float formatting keeps files byte-reproducible)
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _write_metric_csv(path: str, report: MetricReport) -> None:
    _write_csv(path, METRIC_COLUMNS, [report.as_row()])


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _estimator_hyper(cfg: RunConfig) -> dict:
    return dict(
        hidden_dim=cfg.hidden_dim,
        num_blocks=cfg.num_blocks,
        kbar=cfg.kbar,
        dropout=cfg.dropout,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        lr_max=cfg.lr_max,
        weight_decay=cfg.weight_decay,
        momentum_max=cfg.momentum_max,
        momentum_min=cfg.momentum_min,
        pct_start=cfg.pct_start,
        div_factor=cfg.div_factor,
        final_div_factor=cfg.final_div_factor,
    )


def _build_model(cfg: RunConfig, num_categories: int, seed: int):
    if cfg.model in ("proposed", "simple_concat", "temporal_only", "affinity_only"):
        hyper = _estimator_hyper(cfg)
    elif cfg.model == "lr":
        hyper = _estimator_hyper(cfg)
        hyper["lr_max"] = cfg.lr_max_baseline
    else:
        hyper = {}
    return build_estimator(cfg.model, num_categories=num_categories, seed=seed, **hyper)


def _fold_roles(num_folds: int, repetition: int):
    test = repetition
    valid = (repetition + 1) % num_folds
    train = [f for f in range(num_folds) if f not in (test, valid)]
    return train, valid, test


def _fit_on_folds(cfg: RunConfig, bundle: DatasetBundle, train_folds, valid_fold, seed):
    train_idx = np.flatnonzero(np.isin(bundle.folds, train_folds))
    valid_idx = np.flatnonzero(bundle.folds == valid_fold)
    est = _build_model(cfg, bundle.num_categories, seed)
    est.fit(
        records_from_bundle(bundle, train_idx),
        valid=records_from_bundle(bundle, valid_idx),
        known_ids=bundle.known_ids,
    )
    return est


def _check_checkpoint_matches(clf: NeuralCategoryClassifier, bundle: DatasetBundle):
    if clf.n_ != bundle.seq_len:
        raise BundleFormatError(
            f"checkpoint field n: {clf.n_} does not match bundle seq_len {bundle.seq_len}"
        )
    if clf.d_ != bundle.num_channels:
        raise BundleFormatError(
            f"checkpoint field d: {clf.d_} does not match bundle channels {bundle.num_channels}"
        )
    if clf.classes_.size != bundle.num_categories:
        raise BundleFormatError(
            f"checkpoint field c: {clf.classes_.size} does not match bundle "
            f"categories {bundle.num_categories}"
        )
    if clf._uses_affinity() and clf.known_length_ != bundle.num_known:
        raise BundleFormatError(
            f"checkpoint field known_length: {clf.known_length_} does not match "
            f"bundle num_known {bundle.num_known}"
        )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig) -> int:
    world_cfg = world_config_from(cfg)  # validated before any file is touched
    bundle = make_bundle(world_cfg, num_folds=cfg.folds)
    _write_resolved_config(cfg, "generate")
    write_bundle(bundle, cfg.out_dir)
    print(
        f"bundle written to {cfg.out_dir}: {bundle.num_merchants} merchants, "
        f"{bundle.seq_len} days x {bundle.num_channels} features, "
        f"{bundle.num_categories} categories, folds={cfg.folds}"
    )
    return 0


def cmd_crossval(cfg: RunConfig) -> int:
    bundle = read_bundle(cfg.dataset)
    _write_resolved_config(cfg, "crossval")
    reports = []
    for rep in range(cfg.folds):
        train_folds, valid_fold, test_fold = _fold_roles(cfg.folds, rep)
        est = _fit_on_folds(cfg, bundle, train_folds, valid_fold, cfg.seed + rep)
        test_idx = np.flatnonzero(bundle.folds == test_fold)
        probs = est.predict_proba(records_from_bundle(bundle, test_idx))
        report = compute_metrics(probs, bundle.labels[test_idx])
        reports.append(report)
        _write_metric_csv(os.path.join(cfg.out_dir, f"fold_{rep}_metrics.csv"), report)
        print(f"fold {rep}: " + ", ".join(
            f"{k}={v:.4f}" for k, v in report.as_dict().items()
        ))
    table = np.array([r.as_row() for r in reports])
    rows = [["mean"] + list(table.mean(axis=0)), ["sd"] + list(table.std(axis=0, ddof=1))]
    _write_csv(
        os.path.join(cfg.out_dir, "aggregate_metrics.csv"),
        ("stat",) + METRIC_COLUMNS,
        rows,
    )
    summary = {
        "model": cfg.model,
        "folds": [r.as_dict() for r in reports],
        "mean": dict(zip(METRIC_COLUMNS, table.mean(axis=0).tolist())),
        "sd": dict(zip(METRIC_COLUMNS, table.std(axis=0, ddof=1).tolist())),
    }
    with open(os.path.join(cfg.out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    bundle = read_bundle(cfg.dataset)
    _write_resolved_config(cfg, "train")
    if cfg.model in ("random", "1nn"):
        raise UsageError(f"{cfg.model} has no trained parameters to checkpoint")
    test_fold = cfg.folds - 1
    valid_fold = cfg.folds - 2
    train_folds = [f for f in range(cfg.folds) if f not in (test_fold, valid_fold)]
    est = _fit_on_folds(cfg, bundle, train_folds, valid_fold, cfg.seed)
    test_idx = np.flatnonzero(bundle.folds == test_fold)
    probs = est.predict_proba(records_from_bundle(bundle, test_idx))
    report = compute_metrics(probs, bundle.labels[test_idx])
    _write_metric_csv(os.path.join(cfg.out_dir, "metrics.csv"), report)
    if isinstance(est, NeuralCategoryClassifier):
        est.save(os.path.join(cfg.out_dir, "model.ckpt"))
        print(f"checkpoint written (best epoch {est.best_epoch_}, "
              f"valid loss {est.valid_loss_:.4f})")
    print("test: " + ", ".join(f"{k}={v:.4f}" for k, v in report.as_dict().items()))
    return 0


def _load_model_for(cfg: RunConfig, bundle: DatasetBundle) -> NeuralCategoryClassifier:
    ckpt = os.path.join(cfg.out_dir, "model.ckpt")
    if not os.path.exists(ckpt):
        raise UsageError(f"no checkpoint at {ckpt}; run the train command first")
    clf = NeuralCategoryClassifier.load(ckpt)
    _check_checkpoint_matches(clf, bundle)
    return clf


def cmd_evaluate(cfg: RunConfig) -> int:
    bundle = read_bundle(cfg.dataset)
    clf = _load_model_for(cfg, bundle)
    _write_resolved_config(cfg, "evaluate")
    test_idx = np.flatnonzero(bundle.folds == cfg.folds - 1)
    probs = clf.predict_proba(records_from_bundle(bundle, test_idx))
    report = compute_metrics(probs, bundle.labels[test_idx])
    _write_metric_csv(os.path.join(cfg.out_dir, "metrics.csv"), report)
    print("test: " + ", ".join(f"{k}={v:.4f}" for k, v in report.as_dict().items()))
    return 0


def cmd_detect(cfg: RunConfig) -> int:
    bundle = read_bundle(cfg.dataset)
    clf = _load_model_for(cfg, bundle)
    _write_resolved_config(cfg, "detect")
    test_idx = np.flatnonzero(bundle.folds == cfg.folds - 1)
    records = records_from_bundle(bundle, test_idx)
    labels = bundle.labels[test_idx]
    probs = clf.predict_proba(records)
    c = bundle.num_categories
    reported, is_bad = corrupt_labels(labels, cfg.detect_fraction, c, cfg.seed)
    thresholds = [cfg.k_threshold] if cfg.k_threshold is not None else list(range(1, c + 1))
    rows = []
    for k in thresholds:
        if not 1 <= k <= c:
            raise UsageError(f"k_threshold must lie in [1, {c}]")
        res = detection_scores(probs, reported, is_bad, k)
        rows.append([k, res.precision, res.recall, res.f1, res.flagged_count])
    _write_csv(
        os.path.join(cfg.out_dir, "detect.csv"),
        ("k", "precision", "recall", "f1", "flagged_count"),
        rows,
    )
    print(f"wrote detection curve over {len(rows)} threshold(s)")
    return 0


def cmd_sweep(cfg: RunConfig) -> int:
    bundle = read_bundle(cfg.dataset)
    _write_resolved_config(cfg, "sweep")
    train_folds, valid_fold, test_fold = _fold_roles(cfg.folds, 0)
    rows = sparsity_sweep(
        bundle,
        cfg.kbar_values,
        train_folds=train_folds,
        valid_fold=valid_fold,
        test_fold=test_fold,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        lr_max=cfg.lr_max,
        seed=cfg.seed,
        hidden_dim=cfg.hidden_dim,
    )
    _write_csv(
        os.path.join(cfg.out_dir, "sweep.csv"),
        ("kbar", "train_time_per_iter", "memory_estimate_bytes") + METRIC_COLUMNS,
        [
            [r.kbar, r.train_time_per_iter, r.memory_estimate_bytes] + r.report.as_row()
            for r in rows
        ],
    )
    print(f"wrote sweep over {len(rows)} sparsity caps")
    return 0


def cmd_project(cfg: RunConfig) -> int:
    bundle = read_bundle(cfg.dataset)
    clf = _load_model_for(cfg, bundle)
    if not clf._uses_affinity() or not clf._uses_time_series():
        raise UsageError(
            "projection needs a model with both encoders (proposed or simple_concat)"
        )
    _write_resolved_config(cfg, "project")
    test_idx = np.flatnonzero(bundle.folds == cfg.folds - 1)
    records = records_from_bundle(bundle, test_idx)
    labels = bundle.labels[test_idx]
    h_aff, h_temp = clf.encode(records)
    assign, _ = kmeans(h_aff, k=cfg.num_clusters, seed=cfg.seed)
    header = ("merchant_id", "x", "y", "label", "cluster")

    def rows_for(sel: np.ndarray):
        coords = mds_project(h_temp[sel], out_dim=2)
        return [
            [int(test_idx[i]), coords[j, 0], coords[j, 1], int(labels[i]), int(assign[i])]
            for j, i in enumerate(sel)
        ]

    _write_csv(os.path.join(cfg.out_dir, "projection_all.csv"), header,
               rows_for(np.arange(len(records))))
    for cluster in range(cfg.num_clusters):
        members = np.flatnonzero(assign == cluster)
        path = os.path.join(cfg.out_dir, f"projection_cluster_{cluster}.csv")
        if members.size >= 2:
            _write_csv(path, header, rows_for(members))
        else:
            _write_csv(path, header, [])
    print(f"wrote 1 global projection and {cfg.num_clusters} per-cluster files")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

_COMMANDS = {
    "generate": cmd_generate,
    "crossval": cmd_crossval,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "detect": cmd_detect,
    "sweep": cmd_sweep,
    "project": cmd_project,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="merchcat",
        description="Merchant-category identification: data generation, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", dest="out_dir", help="output directory")
        p.add_argument("--dataset", help="bundle directory")
        p.add_argument("--model", choices=ESTIMATOR_KINDS)
        p.add_argument("--k-threshold", dest="k_threshold", type=int)
        p.add_argument("--kbar", type=int)
        p.add_argument("--folds", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--num-blocks", dest="num_blocks", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--lr-max", dest="lr_max", type=float)
        p.add_argument("--dropout", type=float)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    overrides = {
        key: getattr(args, key)
        for key in (
            "seed", "out_dir", "dataset", "model", "k_threshold", "kbar",
            "folds", "epochs", "num_blocks", "batch_size", "lr_max", "dropout",
        )
        if hasattr(args, key)
    }
    try:
        cfg = load_config(args.config, overrides)
        return _COMMANDS[args.command](cfg)
    except (UsageError, DimensionError, BundleFormatError, FileNotFoundError,
            json.JSONDecodeError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
