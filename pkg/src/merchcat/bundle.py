"""On-disk dataset bundle.

A bundle directory holds:
  manifest.json   counts, feature names, known-merchant order, fold labels
  timeseries.bin  float64 little-endian block, (num_merchants, n, d) row-major
  affinity.tsv    merchant_id <TAB> train_index <TAB> count (no header)
  labels.tsv      merchant_id <TAB> category_index (no header)

Affinity columns reference the manifest's known-merchant order; trainers
restrict them to whatever subset of merchants is in the current training
fold.  Writing the same bundle twice produces byte-identical files.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import pandas as pd

from .affinity import AffinityVector
from .datagen import (
    FEATURE_NAMES,
    WorldConfig,
    build_affinity,
    extract_all_features,
    generate_world,
)
from .errors import BundleFormatError

BUNDLE_VERSION = 1

MANIFEST_NAME = "manifest.json"
TIMESERIES_NAME = "timeseries.bin"
AFFINITY_NAME = "affinity.tsv"
LABELS_NAME = "labels.tsv"


@dataclass
class DatasetBundle:
    version: int
    num_categories: int
    feature_names: tuple
    known_ids: np.ndarray  # ordered merchant ids the affinity columns reference
    folds: np.ndarray  # fold index per merchant
    time_series: np.ndarray  # (m, n, d)
    affinities: List[AffinityVector]
    labels: np.ndarray
    config: Optional[dict] = None

    @property
    def num_merchants(self) -> int:
        return self.time_series.shape[0]

    @property
    def seq_len(self) -> int:
        return self.time_series.shape[1]

    @property
    def num_channels(self) -> int:
        return self.time_series.shape[2]

    @property
    def num_known(self) -> int:
        return int(self.known_ids.size)

    def __eq__(self, other):
        if not isinstance(other, DatasetBundle):
            return NotImplemented
        return (
            self.version == other.version
            and self.num_categories == other.num_categories
            and self.feature_names == other.feature_names
            and np.array_equal(self.known_ids, other.known_ids)
            and np.array_equal(self.folds, other.folds)
            and np.array_equal(self.time_series, other.time_series)
            and np.array_equal(self.labels, other.labels)
            and len(self.affinities) == len(other.affinities)
            and all(a == b for a, b in zip(self.affinities, other.affinities))
            and self.config == other.config
        )


def make_bundle(config: WorldConfig, num_folds: int = 5,
                fold_seed: Optional[int] = None) -> DatasetBundle:
    """Generate a world and package it: features, affinity, labels, folds."""
    from .evaluation import stratified_kfold

    world = generate_world(config)
    m = config.num_merchants
    time_series = extract_all_features(world.log, m, config.days)
    known_ids = np.arange(m, dtype=np.int64)
    affinities = build_affinity(world.log, known_ids, num_merchants=m)
    folds = stratified_kfold(
        world.labels, k=num_folds, seed=config.seed if fold_seed is None else fold_seed
    )
    cfg_dict = dataclasses.asdict(config)
    cfg_dict["patterns"] = [dataclasses.asdict(p) for p in config.resolved_patterns()]
    return DatasetBundle(
        version=BUNDLE_VERSION,
        num_categories=config.num_categories,
        feature_names=FEATURE_NAMES,
        known_ids=known_ids,
        folds=folds,
        time_series=time_series,
        affinities=affinities,
        labels=world.labels.astype(np.int64),
        config=cfg_dict,
    )


def write_bundle(bundle: DatasetBundle, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    manifest = {
        "version": bundle.version,
        "num_merchants": bundle.num_merchants,
        "seq_len": bundle.seq_len,
        "num_channels": bundle.num_channels,
        "num_known": bundle.num_known,
        "num_categories": bundle.num_categories,
        "feature_names": list(bundle.feature_names),
        "known_merchant_ids": bundle.known_ids.tolist(),
        "folds": bundle.folds.tolist(),
        "config": bundle.config,
    }
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(path, TIMESERIES_NAME), "wb") as fh:
        fh.write(np.ascontiguousarray(bundle.time_series, dtype="<f8").tobytes())
    rows = []
    for merchant, vec in enumerate(bundle.affinities):
        for idx, cnt in zip(vec.indices, vec.counts):
            rows.append((merchant, int(idx), int(cnt)))
    aff = pd.DataFrame(rows, columns=["merchant_id", "train_index", "count"], dtype=np.int64)
    aff.to_csv(os.path.join(path, AFFINITY_NAME), sep="\t", header=False, index=False)
    lab = pd.DataFrame(
        {"merchant_id": np.arange(bundle.num_merchants, dtype=np.int64),
         "category_index": bundle.labels}
    )
    lab.to_csv(os.path.join(path, LABELS_NAME), sep="\t", header=False, index=False)


def _manifest_int(manifest: dict, key: str) -> int:
    if key not in manifest:
        raise BundleFormatError(f"manifest field {key}: missing")
    value = manifest[key]
    if not isinstance(value, int) or value < 0:
        raise BundleFormatError(f"manifest field {key}: expected a nonnegative integer")
    return value


def read_bundle(path: str) -> DatasetBundle:
    manifest_path = os.path.join(path, MANIFEST_NAME)
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise BundleFormatError(f"manifest.json: not found under {path}")
    except json.JSONDecodeError as exc:
        raise BundleFormatError(f"manifest.json: invalid JSON ({exc})")

    version = _manifest_int(manifest, "version")
    if version != BUNDLE_VERSION:
        raise BundleFormatError(f"manifest field version: unknown version {version}")
    m = _manifest_int(manifest, "num_merchants")
    n = _manifest_int(manifest, "seq_len")
    d = _manifest_int(manifest, "num_channels")
    k = _manifest_int(manifest, "num_known")
    c = _manifest_int(manifest, "num_categories")
    for key in ("feature_names", "known_merchant_ids", "folds"):
        if key not in manifest:
            raise BundleFormatError(f"manifest field {key}: missing")
    feature_names = tuple(manifest["feature_names"])
    if len(feature_names) != d:
        raise BundleFormatError(
            f"manifest field feature_names: {len(feature_names)} names for {d} channels"
        )
    known_ids = np.asarray(manifest["known_merchant_ids"], dtype=np.int64)
    if known_ids.size != k:
        raise BundleFormatError(
            f"manifest field known_merchant_ids: {known_ids.size} entries, num_known={k}"
        )
    folds = np.asarray(manifest["folds"], dtype=np.int64)
    if folds.size != m:
        raise BundleFormatError(
            f"manifest field folds: {folds.size} entries for {m} merchants"
        )

    ts_path = os.path.join(path, TIMESERIES_NAME)
    payload = open(ts_path, "rb").read()
    expected = m * n * d * 8
    if len(payload) != expected:
        raise BundleFormatError(
            f"timeseries.bin: expected {expected} bytes, found {len(payload)}"
        )
    time_series = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(m, n, d)

    aff_path = os.path.join(path, AFFINITY_NAME)
    if os.path.getsize(aff_path) > 0:
        aff = pd.read_csv(aff_path, sep="\t", header=None,
                          names=["merchant_id", "train_index", "count"], dtype=np.int64)
    else:
        aff = pd.DataFrame(columns=["merchant_id", "train_index", "count"], dtype=np.int64)
    if len(aff) and (aff["merchant_id"].min() < 0 or aff["merchant_id"].max() >= m):
        raise BundleFormatError("affinity.tsv column merchant_id: out of range")
    if len(aff) and (aff["train_index"].min() < 0 or aff["train_index"].max() >= k):
        raise BundleFormatError("affinity.tsv column train_index: out of range")
    if len(aff) and aff["count"].min() <= 0:
        raise BundleFormatError("affinity.tsv column count: must be positive")
    affinities = []
    grouped = {mid: grp for mid, grp in aff.groupby("merchant_id")} if len(aff) else {}
    for merchant in range(m):
        grp = grouped.get(merchant)
        if grp is None:
            affinities.append(AffinityVector(k, np.zeros(0, np.int64), np.zeros(0, np.int64)))
        else:
            order = np.argsort(grp["train_index"].to_numpy())
            affinities.append(
                AffinityVector(
                    k,
                    grp["train_index"].to_numpy()[order],
                    grp["count"].to_numpy()[order],
                )
            )

    lab_path = os.path.join(path, LABELS_NAME)
    lab = pd.read_csv(lab_path, sep="\t", header=None,
                      names=["merchant_id", "category_index"], dtype=np.int64)
    if len(lab) != m:
        raise BundleFormatError(f"labels.tsv: {len(lab)} rows for {m} merchants")
    labels = np.zeros(m, dtype=np.int64)
    labels[lab["merchant_id"].to_numpy()] = lab["category_index"].to_numpy()
    if labels.min(initial=0) < 0 or (m and labels.max() >= c):
        raise BundleFormatError("labels.tsv column category_index: out of range")

    return DatasetBundle(
        version=version,
        num_categories=c,
        feature_names=feature_names,
        known_ids=known_ids,
        folds=folds,
        time_series=time_series,
        affinities=affinities,
        labels=labels,
        config=manifest.get("config"),
    )
