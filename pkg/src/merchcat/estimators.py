"""Scikit-learn style estimators wrapping the networks and baselines.

All classifiers share the fit(X, y=None, valid=None, known_ids=None) /
predict_proba(X) surface, where X is a list of :class:`MerchantRecord`.
Affinity-using models additionally need ``known_ids``, the ordered
merchant-id list the affinity columns refer to; at fit time the columns
are restricted to the merchants actually present in the training split,
so held-out merchants never get an embedding row of their own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .affinity import AffinityVector, l1_normalize, topk_truncate
from .errors import BundleFormatError, DimensionError, UsageError
from .networks import (
    MODEL_KINDS,
    NetworkDims,
    build_network,
    load_checkpoint,
    save_checkpoint,
)
from .training import SplitData, TrainConfig, predict_proba as _net_predict, train


@dataclass(frozen=True)
class MerchantRecord:
    merchant_id: int
    time_series: np.ndarray  # (n, d)
    affinity: Optional[AffinityVector]
    label: int


def records_from_bundle(bundle, indices=None) -> List[MerchantRecord]:
    if indices is None:
        indices = np.arange(bundle.num_merchants)
    return [
        MerchantRecord(
            merchant_id=int(i),
            time_series=bundle.time_series[i],
            affinity=bundle.affinities[i],
            label=int(bundle.labels[i]),
        )
        for i in np.asarray(indices)
    ]


# ---------------------------------------------------------------------------
# input validation helpers
# ---------------------------------------------------------------------------


def check_time_series(records: Sequence[MerchantRecord]) -> np.ndarray:
    """Stack per-record matrices into a finite (m, n, d) float64 block."""
    if len(records) == 0:
        raise UsageError("need at least one record")
    mats = [np.asarray(r.time_series, dtype=np.float64) for r in records]
    shape = mats[0].shape
    if len(shape) != 2:
        raise DimensionError(f"time series must be 2-D, got shape {shape}")
    for r, mat in zip(records, mats):
        if mat.shape != shape:
            raise DimensionError(
                f"merchant {r.merchant_id}: time series shape {mat.shape} != {shape}"
            )
    block = np.stack(mats)
    if not np.all(np.isfinite(block)):
        raise UsageError("time series contain non-finite values")
    return block


def check_labels(y, num_categories: Optional[int] = None) -> np.ndarray:
    labels = np.asarray(y, dtype=np.int64)
    if labels.ndim != 1 or labels.size == 0:
        raise UsageError("labels must be a nonempty 1-D integer array")
    if labels.min() < 0:
        raise UsageError("labels must be nonnegative")
    if num_categories is not None and labels.max() >= num_categories:
        raise DimensionError(
            f"label {labels.max()} out of range for {num_categories} categories"
        )
    return labels


def check_affinities(records: Sequence[MerchantRecord], expected_length: int) -> None:
    for r in records:
        if r.affinity is None:
            raise UsageError(f"merchant {r.merchant_id}: affinity vector missing")
        if r.affinity.length != expected_length:
            raise DimensionError(
                f"merchant {r.merchant_id}: affinity length {r.affinity.length} "
                f"!= known-merchant count {expected_length}"
            )


def _standardize_stats(block: np.ndarray):
    """Per-channel mean/std over merchants and days (std floored at 1e-9)."""
    flat = block.reshape(-1, block.shape[-1])
    return flat.mean(axis=0), np.maximum(flat.std(axis=0), 1e-9)


def _carve_validation(labels: np.ndarray, fraction: float, seed: int):
    """Deterministic per-class holdout; keeps at least one sample per side."""
    rng = np.random.default_rng(seed)
    valid_mask = np.zeros(labels.size, dtype=bool)
    for cls in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == cls))
        take = max(1, int(math.floor(fraction * members.size)))
        if take >= members.size:
            take = members.size - 1
        if take > 0:
            valid_mask[members[:take]] = True
    if not valid_mask.any():
        valid_mask[rng.integers(labels.size)] = True
    if valid_mask.all():
        valid_mask[rng.integers(labels.size)] = False
    return np.flatnonzero(~valid_mask), np.flatnonzero(valid_mask)


class NeuralCategoryClassifier(BaseEstimator, ClassifierMixin):
    """Gradient-trained classifier over one or both merchant views.

    ``architecture`` picks the network: "proposed" (affinity-generated
    classifier head), "simple_concat", "temporal_only", or "affinity_only".
    Training runs mini-batch SGD under a one-cycle schedule and keeps the
    epoch checkpoint with the lowest validation loss.
    """

    _AFFINITY_KINDS = ("proposed", "simple_concat", "affinity_only")

    def __init__(
        self,
        architecture: str = "proposed",
        num_categories: Optional[int] = None,
        hidden_dim: int = 64,
        num_blocks: int = 20,
        kbar: int = 8192,
        dropout: float = 0.1,
        epochs: int = 128,
        batch_size: int = 64,
        lr_max: float = 0.08,
        weight_decay: float = 1e-4,
        momentum_max: float = 0.95,
        momentum_min: float = 0.85,
        pct_start: float = 0.3,
        div_factor: float = 25.0,
        final_div_factor: float = 1e4,
        valid_fraction: float = 0.1,
        seed: int = 0,
    ):
        self.architecture = architecture
        self.num_categories = num_categories
        self.hidden_dim = hidden_dim
        self.num_blocks = num_blocks
        self.kbar = kbar
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_max = lr_max
        self.weight_decay = weight_decay
        self.momentum_max = momentum_max
        self.momentum_min = momentum_min
        self.pct_start = pct_start
        self.div_factor = div_factor
        self.final_div_factor = final_div_factor
        self.valid_fraction = valid_fraction
        self.seed = seed

    # -- affinity plumbing ---------------------------------------------------

    def _uses_affinity(self) -> bool:
        return self.architecture in self._AFFINITY_KINDS

    def _uses_time_series(self) -> bool:
        return self.architecture != "affinity_only"

    def _prep_affinity(self, records):
        """Restrict to training columns, truncate, normalize; local indices."""
        cols = self.train_positions_
        prepped = []
        nnz = []
        for r in records:
            vec = r.affinity
            keep = np.isin(vec.indices, cols, assume_unique=True)
            idx = vec.indices[keep]
            nnz.append(int(idx.size))
            restricted = AffinityVector(self.known_length_, idx, vec.counts[keep])
            sparse = l1_normalize(topk_truncate(restricted, self.kbar))
            local = np.searchsorted(cols, sparse.indices)
            prepped.append((local.astype(np.int64), sparse.values))
        return prepped, nnz

    def _split_data(self, records, labels, affinity_cache=None):
        ts = None
        if self._uses_time_series():
            block = check_time_series(records)
            ts = (block - self.feature_mean_) / self.feature_std_
        aff = None
        if self._uses_affinity():
            aff = affinity_cache if affinity_cache is not None else self._prep_affinity(records)[0]
        return SplitData(time_series=ts, affinity=aff, labels=labels)

    # -- estimator surface ---------------------------------------------------

    def fit(self, X, y=None, valid=None, y_valid=None, known_ids=None):
        if self.architecture not in MODEL_KINDS or self.architecture == "lr":
            raise UsageError(
                f"architecture must be one of {self._AFFINITY_KINDS + ('temporal_only',)}"
            )
        records = list(X)
        labels = check_labels(
            y if y is not None else [r.label for r in records], self.num_categories
        )
        if labels.size != len(records):
            raise UsageError("labels must align with the records")

        if valid is None:
            train_pos, valid_pos = _carve_validation(labels, self.valid_fraction, self.seed)
            valid_records = [records[i] for i in valid_pos]
            valid_labels = labels[valid_pos]
            records = [records[i] for i in train_pos]
            labels = labels[train_pos]
        else:
            valid_records = list(valid)
            valid_labels = check_labels(
                y_valid if y_valid is not None else [r.label for r in valid_records],
                self.num_categories,
            )

        c = self.num_categories or int(max(labels.max(), valid_labels.max())) + 1
        block = check_time_series(records)
        self.n_, self.d_ = block.shape[1], block.shape[2]
        self.feature_mean_, self.feature_std_ = _standardize_stats(block)

        if self._uses_affinity():
            if known_ids is None:
                raise UsageError(
                    f"{self.architecture} needs known_ids (the affinity column order)"
                )
            known_ids = np.asarray(known_ids, dtype=np.int64)
            self.known_length_ = int(known_ids.size)
            check_affinities(records, self.known_length_)
            check_affinities(valid_records, self.known_length_)
            pos_of = {int(mid): pos for pos, mid in enumerate(known_ids)}
            try:
                positions = np.array(
                    sorted(pos_of[r.merchant_id] for r in records), dtype=np.int64
                )
            except KeyError as exc:
                raise UsageError(
                    f"training merchant {exc.args[0]} is not in known_ids"
                ) from exc
            if positions.size != len(set(positions.tolist())):
                raise UsageError("duplicate training merchants in known_ids mapping")
            self.train_positions_ = positions
            train_aff, train_nnz = self._prep_affinity(records)
            self.train_affinity_nnz_ = train_nnz
            num_known = int(positions.size)
        else:
            self.known_length_ = 0
            self.train_positions_ = np.zeros(0, dtype=np.int64)
            self.train_affinity_nnz_ = []
            train_aff = None
            num_known = 0

        dims = NetworkDims(
            seq_len=self.n_,
            num_channels=self.d_,
            num_categories=c,
            hidden_dim=self.hidden_dim,
            num_blocks=self.num_blocks,
            num_known=num_known,
        )
        config = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_max=self.lr_max,
            weight_decay=self.weight_decay,
            momentum_max=self.momentum_max,
            momentum_min=self.momentum_min,
            pct_start=self.pct_start,
            div_factor=self.div_factor,
            final_div_factor=self.final_div_factor,
            dropout=self.dropout,
        )
        train_split = self._split_data(records, labels, affinity_cache=train_aff)
        valid_split = self._split_data(valid_records, valid_labels)
        result = train(self.architecture, train_split, valid_split, dims, config, self.seed)
        self.network_ = result.network
        self.classes_ = np.arange(c)
        self.best_epoch_ = result.best_epoch
        self.valid_loss_ = result.best_valid_loss
        self.valid_history_ = result.valid_history
        self.mean_step_seconds_ = result.mean_step_seconds
        return self

    def _require_fitted(self):
        if not hasattr(self, "network_"):
            raise NotFittedError("this classifier has not been fitted yet")

    def predict_proba(self, X) -> np.ndarray:
        self._require_fitted()
        records = list(X)
        data = self._split_data(records, np.zeros(len(records), dtype=np.int64))
        return _net_predict(self.network_, data, self.batch_size)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def encode(self, X):
        """(affinity, temporal) representations for analysis; None when unused."""
        self._require_fitted()
        from . import autodiff as ad
        from .networks import temporal_encode

        records = list(X)
        data = self._split_data(records, np.zeros(len(records), dtype=np.int64))
        h_aff = h_temp = None
        with ad.no_grad():
            if data.affinity is not None:
                h_aff = np.concatenate(
                    [
                        self.network_._embed_affinity(
                            [data.affinity[i] for i in range(lo, hi)]
                        ).data
                        for lo, hi in _chunks(len(records), self.batch_size)
                    ]
                )
            if data.time_series is not None and hasattr(self.network_, "blocks"):
                h_temp = np.concatenate(
                    [
                        temporal_encode(
                            data.time_series[lo:hi], self.network_.blocks
                        ).data
                        for lo, hi in _chunks(len(records), self.batch_size)
                    ]
                )
        return h_aff, h_temp

    # -- persistence -----------------------------------------------------

    def save(self, path) -> None:
        self._require_fitted()
        header = {
            "kind": self.architecture,
            "n": self.n_,
            "d": self.d_,
            "k": int(self.train_positions_.size),
            "c": int(self.classes_.size),
            "n_k": self.hidden_dim,
            "kbar": self.kbar,
            "num_blocks": self.num_blocks,
            "dropout": self.dropout,
            "seed": self.seed,
            "epoch": self.best_epoch_,
            "valid_loss": self.valid_loss_,
            "known_length": self.known_length_,
            "train_known_positions": self.train_positions_.tolist(),
            "feature_mean": self.feature_mean_.tolist(),
            "feature_std": self.feature_std_.tolist(),
        }
        save_checkpoint(path, header, self.network_.ps.flatten())

    @classmethod
    def load(cls, path) -> "NeuralCategoryClassifier":
        header, flat = load_checkpoint(path)
        required = ("kind", "n", "d", "k", "c", "n_k", "kbar", "num_blocks",
                    "dropout", "seed", "epoch", "valid_loss", "known_length",
                    "train_known_positions", "feature_mean", "feature_std")
        for key in required:
            if key not in header:
                raise BundleFormatError(f"checkpoint header field {key}: missing")
        clf = cls(
            architecture=header["kind"],
            num_categories=header["c"],
            hidden_dim=header["n_k"],
            num_blocks=header["num_blocks"],
            kbar=header["kbar"],
            dropout=header["dropout"],
            seed=header["seed"],
        )
        clf.n_, clf.d_ = header["n"], header["d"]
        clf.known_length_ = header["known_length"]
        clf.train_positions_ = np.asarray(header["train_known_positions"], dtype=np.int64)
        clf.feature_mean_ = np.asarray(header["feature_mean"], dtype=np.float64)
        clf.feature_std_ = np.asarray(header["feature_std"], dtype=np.float64)
        clf.train_affinity_nnz_ = []
        dims = NetworkDims(
            seq_len=header["n"],
            num_channels=header["d"],
            num_categories=header["c"],
            hidden_dim=header["n_k"],
            num_blocks=header["num_blocks"],
            num_known=header["k"],
        )
        rng = np.random.default_rng(0)
        clf.network_ = build_network(header["kind"], dims, rng, keep_prob=1.0 - header["dropout"])
        clf.network_.ps.load_flat(flat)
        clf.classes_ = np.arange(header["c"])
        clf.best_epoch_ = header["epoch"]
        clf.valid_loss_ = header["valid_loss"]
        clf.valid_history_ = []
        clf.mean_step_seconds_ = 0.0
        return clf


def _chunks(count: int, size: int):
    for lo in range(0, count, size):
        yield lo, min(lo + size, count)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


class RandomGuessClassifier(BaseEstimator, ClassifierMixin):
    """Uniform probability over the categories."""

    def __init__(self, num_categories: Optional[int] = None):
        self.num_categories = num_categories

    def fit(self, X, y=None, valid=None, y_valid=None, known_ids=None):
        records = list(X)
        labels = check_labels(
            y if y is not None else [r.label for r in records], self.num_categories
        )
        self.classes_ = np.arange(self.num_categories or int(labels.max()) + 1)
        return self

    def predict_proba(self, X) -> np.ndarray:
        if not hasattr(self, "classes_"):
            raise NotFittedError("fit first")
        c = self.classes_.size
        return np.full((len(list(X)), c), 1.0 / c)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)


class OneNearestNeighborClassifier(BaseEstimator, ClassifierMixin):
    """1-NN on the standardized flattened time series (Euclidean distance)."""

    def __init__(self, num_categories: Optional[int] = None):
        self.num_categories = num_categories

    def fit(self, X, y=None, valid=None, y_valid=None, known_ids=None):
        records = list(X)
        labels = check_labels(
            y if y is not None else [r.label for r in records], self.num_categories
        )
        block = check_time_series(records)
        self.feature_mean_, self.feature_std_ = _standardize_stats(block)
        std = (block - self.feature_mean_) / self.feature_std_
        self.train_flat_ = std.reshape(len(records), -1)
        self.train_labels_ = labels
        self.classes_ = np.arange(self.num_categories or int(labels.max()) + 1)
        return self

    def predict_proba(self, X) -> np.ndarray:
        if not hasattr(self, "train_flat_"):
            raise NotFittedError("fit first")
        records = list(X)
        block = check_time_series(records)
        std = (block - self.feature_mean_) / self.feature_std_
        query = std.reshape(len(records), -1)
        # ||q - t||^2 = ||q||^2 - 2 q.t + ||t||^2; argmin over train rows
        cross = query @ self.train_flat_.T
        t_sq = (self.train_flat_ ** 2).sum(axis=1)
        nearest = (t_sq[None, :] - 2 * cross).argmin(axis=1)
        probs = np.zeros((len(records), self.classes_.size))
        probs[np.arange(len(records)), self.train_labels_[nearest]] = 1.0
        return probs

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)


class LogisticRegressionClassifier(BaseEstimator, ClassifierMixin):
    """Multinomial logistic regression on standardized flattened series,
    trained with the same SGD/one-cycle machinery as the networks."""

    def __init__(
        self,
        num_categories: Optional[int] = None,
        epochs: int = 128,
        batch_size: int = 64,
        lr_max: float = 0.3,
        weight_decay: float = 1e-4,
        momentum_max: float = 0.95,
        momentum_min: float = 0.85,
        pct_start: float = 0.3,
        div_factor: float = 25.0,
        final_div_factor: float = 1e4,
        valid_fraction: float = 0.1,
        seed: int = 0,
    ):
        self.num_categories = num_categories
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_max = lr_max
        self.weight_decay = weight_decay
        self.momentum_max = momentum_max
        self.momentum_min = momentum_min
        self.pct_start = pct_start
        self.div_factor = div_factor
        self.final_div_factor = final_div_factor
        self.valid_fraction = valid_fraction
        self.seed = seed

    def fit(self, X, y=None, valid=None, y_valid=None, known_ids=None):
        records = list(X)
        labels = check_labels(
            y if y is not None else [r.label for r in records], self.num_categories
        )
        if valid is None:
            train_pos, valid_pos = _carve_validation(labels, self.valid_fraction, self.seed)
            valid_records = [records[i] for i in valid_pos]
            valid_labels = labels[valid_pos]
            records = [records[i] for i in train_pos]
            labels = labels[train_pos]
        else:
            valid_records = list(valid)
            valid_labels = check_labels(
                y_valid if y_valid is not None else [r.label for r in valid_records],
                self.num_categories,
            )
        block = check_time_series(records)
        self.n_, self.d_ = block.shape[1], block.shape[2]
        self.feature_mean_, self.feature_std_ = _standardize_stats(block)
        c = self.num_categories or int(max(labels.max(), valid_labels.max())) + 1
        dims = NetworkDims(
            seq_len=self.n_, num_channels=self.d_, num_categories=c,
            hidden_dim=1, num_blocks=0, num_known=0,
        )
        config = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_max=self.lr_max,
            weight_decay=self.weight_decay,
            momentum_max=self.momentum_max,
            momentum_min=self.momentum_min,
            pct_start=self.pct_start,
            div_factor=self.div_factor,
            final_div_factor=self.final_div_factor,
            dropout=0.0,
        )
        train_split = SplitData(
            time_series=(block - self.feature_mean_) / self.feature_std_,
            affinity=None,
            labels=labels,
        )
        valid_block = check_time_series(valid_records)
        valid_split = SplitData(
            time_series=(valid_block - self.feature_mean_) / self.feature_std_,
            affinity=None,
            labels=valid_labels,
        )
        result = train("lr", train_split, valid_split, dims, config, self.seed)
        self.network_ = result.network
        self.classes_ = np.arange(c)
        self.best_epoch_ = result.best_epoch
        self.valid_loss_ = result.best_valid_loss
        self.mean_step_seconds_ = result.mean_step_seconds
        return self

    def predict_proba(self, X) -> np.ndarray:
        if not hasattr(self, "network_"):
            raise NotFittedError("fit first")
        records = list(X)
        block = check_time_series(records)
        std = (block - self.feature_mean_) / self.feature_std_
        data = SplitData(time_series=std, affinity=None,
                         labels=np.zeros(len(records), dtype=np.int64))
        return _net_predict(self.network_, data, self.batch_size)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)


ESTIMATOR_KINDS = (
    "proposed",
    "simple_concat",
    "temporal_only",
    "affinity_only",
    "lr",
    "1nn",
    "random",
)


def build_estimator(kind: str, *, num_categories=None, seed: int = 0, **hyper):
    """Estimator factory covering the networks and the three baselines."""
    if kind in ("proposed", "simple_concat", "temporal_only", "affinity_only"):
        return NeuralCategoryClassifier(
            architecture=kind, num_categories=num_categories, seed=seed, **hyper
        )
    if kind == "lr":
        allowed = (
            "epochs", "batch_size", "lr_max", "weight_decay", "momentum_max",
            "momentum_min", "pct_start", "div_factor", "final_div_factor",
            "valid_fraction",
        )
        kwargs = {k: v for k, v in hyper.items() if k in allowed}
        return LogisticRegressionClassifier(
            num_categories=num_categories, seed=seed, **kwargs
        )
    if kind == "1nn":
        return OneNearestNeighborClassifier(num_categories=num_categories)
    if kind == "random":
        return RandomGuessClassifier(num_categories=num_categories)
    raise UsageError(f"unknown model kind {kind!r}; pick one of {ESTIMATOR_KINDS}")
