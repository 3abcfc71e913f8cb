"""Evaluation protocol: stratified folds, rank-based metrics, significance
testing, representation analysis, and the false-category detection
experiment."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import stdtr

from .errors import UsageError

METRIC_COLUMNS = ("micro_f1", "macro_f1", "average_rank", "hit_at_3", "hit_at_5")


def stratified_kfold(labels, k: int = 5, seed: int = 0) -> np.ndarray:
    """Fold index per sample; per-category counts differ across folds by <= 1.

    Members of each category are shuffled, then dealt round-robin with a
    fold pointer that keeps running across categories, so total fold sizes
    also differ by at most one (the first ``total mod k`` folds get the
    extra member).
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise UsageError("cannot fold an empty label list")
    if k < 2:
        raise UsageError("need at least 2 folds")
    rng = np.random.default_rng(seed)
    folds = np.full(labels.size, -1, dtype=np.int64)
    pointer = 0
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if members.size < k:
            raise UsageError(
                f"category {cls} has {members.size} members; need at least {k}"
            )
        members = rng.permutation(members)
        folds[members] = (pointer + np.arange(members.size)) % k
        pointer = (pointer + members.size) % k
    return folds


@dataclass(frozen=True)
class MetricReport:
    micro_f1: float
    macro_f1: float
    average_rank: float
    hit_at_3: float
    hit_at_5: float

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in METRIC_COLUMNS}

    def as_row(self) -> List[float]:
        return [getattr(self, name) for name in METRIC_COLUMNS]


def ranks_of(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Rank (1 = best) of each row's ``labels`` entry in the probability order.

    Ties are broken by category index: equal-probability categories with a
    smaller index rank ahead.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    picked = probs[np.arange(labels.size), labels][:, None]
    higher = (probs > picked).sum(axis=1)
    cols = np.arange(probs.shape[1])[None, :]
    tied_before = ((probs == picked) & (cols < labels[:, None])).sum(axis=1)
    return 1 + higher + tied_before


def compute_metrics(probs, labels) -> MetricReport:
    """Micro/macro F1 over argmax decisions plus rank statistics."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise UsageError("compute_metrics needs a nonempty (m, c) probability matrix")
    if labels.shape != (probs.shape[0],):
        raise UsageError("labels must align with the probability rows")
    m, c = probs.shape
    preds = probs.argmax(axis=1)

    tp = fp = fn = 0
    per_class_f1 = np.zeros(c)
    for cls in range(c):
        tp_c = int(((preds == cls) & (labels == cls)).sum())
        fp_c = int(((preds == cls) & (labels != cls)).sum())
        fn_c = int(((preds != cls) & (labels == cls)).sum())
        tp += tp_c
        fp += fp_c
        fn += fn_c
        denom = 2 * tp_c + fp_c + fn_c
        per_class_f1[cls] = (2 * tp_c / denom) if denom else 0.0
    micro = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0

    ranks = ranks_of(probs, labels)
    return MetricReport(
        micro_f1=float(micro),
        macro_f1=float(per_class_f1.mean()),
        average_rank=float(ranks.mean()),
        hit_at_3=float((ranks <= 3).mean()),
        hit_at_5=float((ranks <= 5).mean()),
    )


def welch_ttest(sample_a, sample_b) -> float:
    """Two-sided Welch t-test p-value (Welch-Satterthwaite degrees of freedom).

    Degenerate spread: if both samples have zero variance the p-value is 1
    for equal means and 0 otherwise.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise UsageError("both samples must be nonempty")
    va = a.var(ddof=1) if a.size > 1 else 0.0
    vb = b.var(ddof=1) if b.size > 1 else 0.0
    se2 = va / a.size + vb / b.size
    if se2 == 0.0:
        return 1.0 if a.mean() == b.mean() else 0.0
    t = (a.mean() - b.mean()) / math.sqrt(se2)
    denom = 0.0
    if a.size > 1 and va > 0:
        denom += (va / a.size) ** 2 / (a.size - 1)
    if b.size > 1 and vb > 0:
        denom += (vb / b.size) ** 2 / (b.size - 1)
    df = se2**2 / denom if denom > 0 else float(a.size + b.size - 2)
    return float(2.0 * stdtr(df, -abs(t)))


# ---------------------------------------------------------------------------
# representation analysis
# ---------------------------------------------------------------------------


def mds_project(vectors, out_dim: int = 2) -> np.ndarray:
    """Classical (double-centering) multidimensional scaling to ``out_dim``.

    Eigenpairs of the centered Gram matrix are found by power iteration with
    deflation; coordinates are eigenvector * sqrt(eigenvalue).  Identical
    points land at the origin.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise UsageError("mds_project needs at least two points")
    m = x.shape[0]
    sq = (x * x).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
    row = d2.mean(axis=1, keepdims=True)
    col = d2.mean(axis=0, keepdims=True)
    gram = -0.5 * (d2 - row - col + d2.mean())
    coords = np.zeros((m, out_dim))
    rng = np.random.default_rng(0xC0FFEE)
    for j in range(out_dim):
        v = rng.standard_normal(m)
        v /= np.linalg.norm(v)
        for _ in range(500):
            w = gram @ v
            norm = np.linalg.norm(w)
            if norm < 1e-14:
                v = np.zeros(m)
                break
            w /= norm
            if np.linalg.norm(w - v) < 1e-13 or np.linalg.norm(w + v) < 1e-13:
                v = w
                break
            v = w
        lam = float(v @ gram @ v) if v.any() else 0.0
        coords[:, j] = v * math.sqrt(max(lam, 0.0))
        gram -= lam * np.outer(v, v)
    return coords


def kmeans(vectors, k: int = 5, seed: int = 0, max_iter: int = 100):
    """Seeded k-means++ initialization followed by Lloyd iterations.

    Stops at an assignment fixpoint or after ``max_iter`` sweeps.  Returns
    (assignments, centroids).
    """
    x = np.asarray(vectors, dtype=np.float64)
    m = x.shape[0]
    if k < 1 or k > m:
        raise UsageError(f"k={k} must lie in [1, {m}]")
    rng = np.random.default_rng(seed)
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(m)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            pick = rng.integers(m)
        else:
            pick = rng.choice(m, p=d2 / total)
        centroids[j] = x[pick]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))
    assign = np.full(m, -1, dtype=np.int64)
    for _ in range(max_iter):
        dist = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = dist.argmin(axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = x[assign == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    return assign, centroids


def kmeans_inertia(vectors, assign, centroids) -> float:
    x = np.asarray(vectors, dtype=np.float64)
    return float(((x - centroids[assign]) ** 2).sum())


# ---------------------------------------------------------------------------
# bad-actor (false reported category) detection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DetectionResult:
    precision: float
    recall: float
    f1: float
    flagged_count: int


def corrupt_labels(labels, fraction: float, num_categories: int, seed: int):
    """Relabel a random ``fraction`` of merchants to a different category.

    Returns (reported_labels, is_bad mask).
    """
    if not 0.0 < fraction < 1.0:
        raise UsageError("fraction must lie strictly between 0 and 1")
    labels = np.asarray(labels, dtype=np.int64)
    m = labels.size
    rng = np.random.default_rng(seed)
    n_bad = int(round(fraction * m))
    chosen = rng.choice(m, size=n_bad, replace=False)
    reported = labels.copy()
    if num_categories > 1 and n_bad:
        offsets = rng.integers(1, num_categories, size=n_bad)
        reported[chosen] = (labels[chosen] + offsets) % num_categories
    is_bad = np.zeros(m, dtype=bool)
    is_bad[chosen] = True
    return reported, is_bad


def detection_scores(probs, reported, is_bad, k_threshold: int) -> DetectionResult:
    """Flag merchants whose reported category ranks below ``k_threshold``."""
    ranks = ranks_of(np.asarray(probs, dtype=np.float64), np.asarray(reported))
    flagged = ranks > k_threshold
    tp = int((flagged & is_bad).sum())
    n_flagged = int(flagged.sum())
    n_bad = int(is_bad.sum())
    precision = tp / n_flagged if n_flagged else 0.0
    recall = tp / n_bad if n_bad else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return DetectionResult(precision, recall, f1, n_flagged)


def bad_actor_detection(
    probs, labels, fraction: float, k_threshold: int, seed: int
) -> DetectionResult:
    """Corrupt a fraction of reported labels, then score the rank-threshold rule."""
    probs = np.asarray(probs, dtype=np.float64)
    c = probs.shape[1]
    if not 1 <= k_threshold <= c:
        raise UsageError(f"k_threshold must lie in [1, {c}]")
    reported, is_bad = corrupt_labels(labels, fraction, c, seed)
    return detection_scores(probs, reported, is_bad, k_threshold)


def bad_actor_experiment(estimator, records, fraction: float, k_threshold: int, seed: int) -> DetectionResult:
    """Run the detection rule against a fitted estimator on held-out records."""
    labels = np.array([r.label for r in records], dtype=np.int64)
    probs = estimator.predict_proba(records)
    return bad_actor_detection(probs, labels, fraction, k_threshold, seed)


# ---------------------------------------------------------------------------
# sparsity sweep (affinity-only model)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    kbar: int
    train_time_per_iter: float
    memory_estimate_bytes: float
    report: MetricReport


def affinity_memory_estimate(
    nnz_per_sample: Sequence[int], kbar: int, hidden_dim: int, batch_size: int
) -> float:
    """Bytes touched per optimizer step by the sparse aggregation.

    Per touched entry: an index and a weight plus a read and a gradient
    write of one embedding row.  Monotone nondecreasing in ``kbar``.
    """
    touched = np.minimum(np.asarray(nnz_per_sample, dtype=np.float64), kbar)
    per_entry = 16.0 + 2.0 * 8.0 * hidden_dim
    return float(touched.mean() * batch_size * per_entry) if touched.size else 0.0


def sparsity_sweep(
    bundle,
    kbar_values: Sequence[int],
    *,
    train_folds: Sequence[int],
    valid_fold: int,
    test_fold: int,
    epochs: int = 16,
    batch_size: int = 64,
    lr_max: float = 0.08,
    seed: int = 0,
    hidden_dim: int = 64,
) -> List[SweepRow]:
    """Train the affinity-only model at each sparsity cap and measure it.

    ``kbar_values`` must be positive and ascending.  Timing is wall clock per
    optimizer iteration; memory is the analytic bytes-touched estimate.
    """
    from .estimators import NeuralCategoryClassifier, records_from_bundle

    kbar_values = list(kbar_values)
    if any(k < 1 for k in kbar_values):
        raise UsageError("kbar values must be positive")
    if any(b <= a for a, b in zip(kbar_values, kbar_values[1:])):
        raise UsageError("kbar values must be strictly ascending")
    train_idx = np.flatnonzero(np.isin(bundle.folds, list(train_folds)))
    valid_idx = np.flatnonzero(bundle.folds == valid_fold)
    test_idx = np.flatnonzero(bundle.folds == test_fold)
    train_records = records_from_bundle(bundle, train_idx)
    valid_records = records_from_bundle(bundle, valid_idx)
    test_records = records_from_bundle(bundle, test_idx)
    test_labels = bundle.labels[test_idx]
    rows = []
    for kbar in kbar_values:
        clf = NeuralCategoryClassifier(
            architecture="affinity_only",
            num_categories=bundle.num_categories,
            hidden_dim=hidden_dim,
            kbar=kbar,
            epochs=epochs,
            batch_size=batch_size,
            lr_max=lr_max,
            seed=seed,
        )
        clf.fit(train_records, valid=valid_records, known_ids=bundle.known_ids)
        report = compute_metrics(clf.predict_proba(test_records), test_labels)
        restricted = clf.train_affinity_nnz_
        rows.append(
            SweepRow(
                kbar=kbar,
                train_time_per_iter=clf.mean_step_seconds_,
                memory_estimate_bytes=affinity_memory_estimate(
                    restricted, kbar, hidden_dim, batch_size
                ),
                report=report,
            )
        )
    return rows
