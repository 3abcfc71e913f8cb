"""Seeded synthetic payment network.

Merchants belong to one of ``c`` categories; each category has a daily
transaction-intensity pattern (weekly profile times a yearly sinusoid),
an approval rate, and an amount distribution.  Customers belong to taste
clusters and merchants draw most of their customers from their own
cluster, which is what gives the shared-customer affinity its structure.

Per-merchant nuisance variation (lognormal volume scale, amount and
approval jitter, Poisson day counts, optional mean-preserving bursts)
keeps same-category merchants distinct, the way real books are.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .affinity import AffinityVector
from .errors import UsageError

FEATURE_NAMES = (
    "numApprTrans",
    "numDeclTrans",
    "numApprCards",
    "numDeclCards",
    "amtApprTrans",
    "amtDeclTrans",
    "rateTxnAppr",
    "rateTxnDecl",
    "avgAmtAppr",
    "avgAmtDecl",
)

NUM_FEATURES = len(FEATURE_NAMES)

DAYS_PER_YEAR = 365.0


@dataclass(frozen=True)
class CategoryPattern:
    """Transaction-intensity template for one merchant category."""

    name: str
    base_volume: float
    weekly_profile: Tuple[float, ...]
    yearly_amplitude: float
    yearly_phase: float
    approval_rate: float
    amount_mean: float
    amount_sd: float
    weight: float = 1.0
    # optional mean-preserving promo bursts: a burst day multiplies the
    # intensity by burst_boost, other days are scaled down to compensate
    burst_prob: float = 0.0
    burst_boost: float = 1.0

    def __post_init__(self):
        if self.base_volume <= 0:
            raise UsageError(f"{self.name}: base_volume must be positive")
        if len(self.weekly_profile) != 7 or any(w < 0 for w in self.weekly_profile):
            raise UsageError(f"{self.name}: weekly_profile needs 7 nonnegative entries")
        if not 0.0 <= self.approval_rate <= 1.0:
            raise UsageError(f"{self.name}: approval_rate must lie in [0, 1]")
        if not 0.0 <= self.yearly_amplitude < 1.0:
            raise UsageError(f"{self.name}: yearly_amplitude must lie in [0, 1)")
        if self.amount_mean <= 0 or self.amount_sd < 0:
            raise UsageError(f"{self.name}: bad amount distribution")
        if self.weight <= 0:
            raise UsageError(f"{self.name}: weight must be positive")
        if not 0.0 <= self.burst_prob < 1.0 or self.burst_boost < 1.0:
            raise UsageError(f"{self.name}: bad burst settings")
        if self.burst_prob * self.burst_boost > 1.0:
            raise UsageError(f"{self.name}: bursts cannot preserve the mean")


_ARCHETYPES = (
    # two steady/bursty twins: identical intensity means, different dispersion
    CategoryPattern("grocery", 22.0, (0.9, 0.9, 1.0, 1.0, 1.2, 1.9, 1.6), 0.12, 320.0, 0.94, 28.0, 14.0),
    CategoryPattern("fast_food", 22.0, (0.9, 0.9, 1.0, 1.0, 1.2, 1.9, 1.6), 0.12, 320.0, 0.94, 28.0, 14.0,
                    burst_prob=0.12, burst_boost=4.0),
    CategoryPattern("restaurant", 12.0, (0.0, 1.0, 1.0, 1.1, 1.5, 2.1, 1.7), 0.10, 35.0, 0.93, 34.0, 18.0),
    CategoryPattern("event_venue", 12.0, (0.0, 1.0, 1.0, 1.1, 1.5, 2.1, 1.7), 0.10, 35.0, 0.93, 34.0, 18.0,
                    burst_prob=0.10, burst_boost=5.0),
    CategoryPattern("office_lunch", 16.0, (1.3, 1.3, 1.3, 1.25, 1.1, 0.0, 0.0), 0.05, 180.0, 0.95, 16.0, 6.0),
    CategoryPattern("travel_agency", 16.0, (1.3, 1.3, 1.3, 1.25, 1.1, 0.0, 0.0), 0.50, 150.0, 0.90, 16.0, 6.0),
    CategoryPattern("gas_station", 26.0, (1.0, 1.0, 1.0, 1.0, 1.05, 1.05, 1.0), 0.06, 200.0, 0.96, 38.0, 10.0),
    CategoryPattern("barber", 7.0, (0.0, 1.0, 1.0, 1.1, 1.3, 1.8, 0.9), 0.08, 90.0, 0.97, 24.0, 8.0),
)


def default_patterns(num_categories: int) -> Tuple[CategoryPattern, ...]:
    """Archetype list, cycled with phase offsets when more are requested."""
    out = []
    for i in range(num_categories):
        base = _ARCHETYPES[i % len(_ARCHETYPES)]
        if i < len(_ARCHETYPES):
            out.append(base)
        else:
            shift = 47.0 * (i // len(_ARCHETYPES))
            out.append(replace(base, name=f"{base.name}_{i}", yearly_phase=base.yearly_phase + shift))
    return tuple(out)


@dataclass(frozen=True)
class WorldConfig:
    num_merchants: int = 2000
    num_customers: int = 50_000
    num_categories: int = 8
    num_taste_clusters: int = 5
    days: int = 364
    seed: int = 7
    patterns: Optional[Tuple[CategoryPattern, ...]] = None
    label_noise: float = 0.0
    # per-merchant nuisance spreads
    merchant_volume_sigma: float = 0.9
    merchant_amount_sigma: float = 0.25
    merchant_approval_sigma: float = 0.02
    # probability a transaction's customer is drawn from the merchant's own cluster
    cluster_affinity: float = 0.8
    # probability a merchant's cluster follows its category (vs uniform)
    cluster_category_mix: float = 0.5
    # "category": intensity pattern comes from the category alone;
    # "category_plus_cluster": pattern index is (category + cluster) mod c,
    # so the temporal appearance is only interpretable together with the
    # customer-base cluster.
    pattern_source: str = "category"

    def __post_init__(self):
        for name in ("num_merchants", "num_categories", "num_taste_clusters", "days"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be positive")
        if self.num_customers < 0:
            raise UsageError("num_customers must be nonnegative")
        if not 0.0 <= self.label_noise < 1.0:
            raise UsageError("label_noise must lie in [0, 1)")
        if not 0.0 <= self.cluster_affinity <= 1.0:
            raise UsageError("cluster_affinity must lie in [0, 1]")
        if not 0.0 <= self.cluster_category_mix <= 1.0:
            raise UsageError("cluster_category_mix must lie in [0, 1]")
        if self.pattern_source not in ("category", "category_plus_cluster"):
            raise UsageError(f"unknown pattern_source {self.pattern_source!r}")
        if self.patterns is not None and len(self.patterns) != self.num_categories:
            raise UsageError(
                f"got {len(self.patterns)} patterns for {self.num_categories} categories"
            )

    def resolved_patterns(self) -> Tuple[CategoryPattern, ...]:
        return self.patterns if self.patterns is not None else default_patterns(self.num_categories)


@dataclass
class TransactionLog:
    """Columnar list of transactions."""

    day: np.ndarray
    merchant_id: np.ndarray
    customer_id: np.ndarray
    amount: np.ndarray
    approved: np.ndarray

    def __len__(self):
        return int(self.day.size)

    @classmethod
    def from_rows(cls, rows: Sequence[Tuple[int, int, int, float, bool]]) -> "TransactionLog":
        if not rows:
            return cls.empty()
        day, mid, cid, amt, ok = zip(*rows)
        return cls(
            np.asarray(day, dtype=np.int32),
            np.asarray(mid, dtype=np.int32),
            np.asarray(cid, dtype=np.int64),
            np.asarray(amt, dtype=np.float64),
            np.asarray(ok, dtype=bool),
        )

    @classmethod
    def empty(cls) -> "TransactionLog":
        return cls(
            np.zeros(0, dtype=np.int32),
            np.zeros(0, dtype=np.int32),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.float64),
            np.zeros(0, dtype=bool),
        )


@dataclass
class GeneratedWorld:
    log: TransactionLog
    labels: np.ndarray  # reported category per merchant (after label noise)
    clusters: np.ndarray  # taste cluster per merchant


def _cluster_ranges(num_customers: int, num_clusters: int) -> List[Tuple[int, int]]:
    edges = np.linspace(0, num_customers, num_clusters + 1).astype(np.int64)
    return [(int(edges[i]), int(edges[i + 1])) for i in range(num_clusters)]


def generate_world(config: WorldConfig) -> GeneratedWorld:
    """Sample a full transaction log plus per-merchant labels.

    Deterministic for a fixed config: one RNG stream consumed in a fixed
    order (merchant assignment first, then one block of draws per merchant).
    """
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    m, c = config.num_merchants, config.num_categories
    patterns = config.resolved_patterns()
    weights = np.array([p.weight for p in patterns], dtype=np.float64)
    weights /= weights.sum()

    categories = rng.choice(c, size=m, p=weights)
    linked = categories % config.num_taste_clusters
    uniform = rng.integers(0, config.num_taste_clusters, size=m)
    use_link = rng.random(m) < config.cluster_category_mix
    clusters = np.where(use_link, linked, uniform).astype(np.int64)

    labels = categories.copy()
    if config.label_noise > 0:
        flip = rng.random(m) < config.label_noise
        offsets = rng.integers(1, c, size=m) if c > 1 else np.zeros(m, dtype=np.int64)
        labels = np.where(flip, (categories + offsets) % c, categories)

    scale = rng.lognormal(
        -config.merchant_volume_sigma**2 / 2, config.merchant_volume_sigma, size=m
    )
    amount_jitter = rng.lognormal(
        -config.merchant_amount_sigma**2 / 2, config.merchant_amount_sigma, size=m
    )
    approval_jitter = rng.normal(0.0, config.merchant_approval_sigma, size=m)

    if config.num_customers == 0:
        return GeneratedWorld(TransactionLog.empty(), labels, clusters)

    ranges = _cluster_ranges(config.num_customers, config.num_taste_clusters)
    day_idx = np.arange(config.days)
    weekday = day_idx % 7
    cols_day, cols_mid, cols_cid, cols_amt, cols_ok = [], [], [], [], []
    for mid in range(m):
        if config.pattern_source == "category":
            pat = patterns[categories[mid]]
        else:
            pat = patterns[(categories[mid] + clusters[mid]) % c]
        weekly = np.asarray(pat.weekly_profile)[weekday]
        yearly = 1.0 + pat.yearly_amplitude * np.sin(
            2.0 * np.pi * (day_idx + pat.yearly_phase) / DAYS_PER_YEAR
        )
        intensity = scale[mid] * pat.base_volume * weekly * yearly
        if pat.burst_prob > 0:
            lo = (1.0 - pat.burst_prob * pat.burst_boost) / (1.0 - pat.burst_prob)
            promo = rng.random(config.days) < pat.burst_prob
            intensity = intensity * np.where(promo, pat.burst_boost, lo)
        counts = rng.poisson(intensity)
        total = int(counts.sum())
        if total == 0:
            continue
        days = np.repeat(day_idx, counts).astype(np.int32)
        own = rng.random(total) < config.cluster_affinity
        lo_c, hi_c = ranges[clusters[mid]]
        own_draw = rng.integers(lo_c, max(hi_c, lo_c + 1), size=total)
        any_draw = rng.integers(0, config.num_customers, size=total)
        customers = np.where(own, own_draw, any_draw)
        amounts = np.maximum(
            0.01,
            rng.normal(pat.amount_mean * amount_jitter[mid], pat.amount_sd, size=total),
        )
        rate = float(np.clip(pat.approval_rate + approval_jitter[mid], 0.02, 0.995))
        approved = rng.random(total) < rate
        cols_day.append(days)
        cols_mid.append(np.full(total, mid, dtype=np.int32))
        cols_cid.append(customers.astype(np.int64))
        cols_amt.append(amounts)
        cols_ok.append(approved)
    if not cols_day:
        return GeneratedWorld(TransactionLog.empty(), labels, clusters)
    log = TransactionLog(
        np.concatenate(cols_day),
        np.concatenate(cols_mid),
        np.concatenate(cols_cid),
        np.concatenate(cols_amt),
        np.concatenate(cols_ok),
    )
    return GeneratedWorld(log, labels, clusters)


# ---------------------------------------------------------------------------
# feature extraction (daily, non-overlapping windows)
# ---------------------------------------------------------------------------


def _daily_features(day, customer, amount, approved, num_days: int) -> np.ndarray:
    """Aggregate one merchant's transactions into the (num_days, 10) matrix.

    Days with no transactions are all-zero rows; a missing side (no approved
    or no declined activity) zeroes its rate/average entries.
    """
    out = np.zeros((num_days, NUM_FEATURES))
    if day.size == 0:
        return out
    declined = ~approved
    n_appr = np.bincount(day[approved], minlength=num_days).astype(np.float64)
    n_decl = np.bincount(day[declined], minlength=num_days).astype(np.float64)
    amt_appr = np.bincount(day[approved], weights=amount[approved], minlength=num_days)
    amt_decl = np.bincount(day[declined], weights=amount[declined], minlength=num_days)

    def cards(mask):
        if not mask.any():
            return np.zeros(num_days)
        span = int(customer.max()) + 1
        key = day[mask].astype(np.int64) * span + customer[mask]
        unique_days = np.unique(key) // span
        return np.bincount(unique_days, minlength=num_days).astype(np.float64)

    cards_appr = cards(approved)
    cards_decl = cards(declined)
    total = n_appr + n_decl
    active = total > 0
    rate_appr = np.divide(n_appr, total, out=np.zeros(num_days), where=active)
    rate_decl = np.divide(n_decl, total, out=np.zeros(num_days), where=active)
    avg_appr = np.divide(amt_appr, n_appr, out=np.zeros(num_days), where=n_appr > 0)
    avg_decl = np.divide(amt_decl, n_decl, out=np.zeros(num_days), where=n_decl > 0)
    out[:, 0] = n_appr
    out[:, 1] = n_decl
    out[:, 2] = cards_appr
    out[:, 3] = cards_decl
    out[:, 4] = amt_appr
    out[:, 5] = amt_decl
    out[:, 6] = rate_appr
    out[:, 7] = rate_decl
    out[:, 8] = avg_appr
    out[:, 9] = avg_decl
    return out


def extract_features(log: TransactionLog, merchant_id: int, num_days: int) -> np.ndarray:
    mask = log.merchant_id == merchant_id
    return _daily_features(
        log.day[mask], log.customer_id[mask], log.amount[mask], log.approved[mask], num_days
    )


def extract_all_features(log: TransactionLog, num_merchants: int, num_days: int) -> np.ndarray:
    """(num_merchants, num_days, 10) block; merchants absent from the log get zeros."""
    out = np.zeros((num_merchants, num_days, NUM_FEATURES))
    if len(log) == 0:
        return out
    order = np.argsort(log.merchant_id, kind="stable")
    mid = log.merchant_id[order]
    bounds = np.searchsorted(mid, np.arange(num_merchants + 1))
    for merchant in range(num_merchants):
        lo, hi = bounds[merchant], bounds[merchant + 1]
        if lo == hi:
            continue
        sel = order[lo:hi]
        out[merchant] = _daily_features(
            log.day[sel], log.customer_id[sel], log.amount[sel], log.approved[sel], num_days
        )
    return out


# ---------------------------------------------------------------------------
# shared-customer affinity
# ---------------------------------------------------------------------------


def build_affinity(
    log: TransactionLog, train_ids: Sequence[int], num_merchants: Optional[int] = None
) -> List[AffinityVector]:
    """Shared-customer counts of every merchant against ``train_ids``.

    Customers count once per merchant over the whole window; a merchant's
    own column is forced to zero.  Returns one vector per merchant id in
    [0, num_merchants).
    """
    train_ids = np.asarray(train_ids, dtype=np.int64)
    if np.unique(train_ids).size != train_ids.size:
        raise UsageError("train_ids must be duplicate-free")
    if num_merchants is None:
        num_merchants = int(log.merchant_id.max()) + 1 if len(log) else 0
        num_merchants = max(num_merchants, int(train_ids.max()) + 1 if train_ids.size else 0)
    k = train_ids.size
    if len(log) == 0 or k == 0:
        return [AffinityVector(k, np.zeros(0, np.int64), np.zeros(0, np.int64))
                for _ in range(num_merchants)]
    span = int(log.customer_id.max()) + 1
    key = log.merchant_id.astype(np.int64) * span + log.customer_id
    pairs = np.unique(key)
    mids = (pairs // span).astype(np.int64)
    cids = pairs % span
    incidence = sp.csr_matrix(
        (np.ones(pairs.size, dtype=np.int64), (mids, cids)),
        shape=(num_merchants, span),
    )
    shared = (incidence @ incidence[train_ids].T).toarray()
    col_of = {int(t): j for j, t in enumerate(train_ids)}
    vectors = []
    for merchant in range(num_merchants):
        row = shared[merchant]
        j = col_of.get(merchant)
        if j is not None:
            row = row.copy()
            row[j] = 0
        idx = np.nonzero(row)[0]
        vectors.append(AffinityVector(k, idx.astype(np.int64), row[idx].astype(np.int64)))
    return vectors
