"""Mini-batch SGD training loop with one-cycle scheduling and
lowest-validation-loss checkpoint selection."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .errors import UsageError
from .networks import Network, NetworkDims, build_network
from .optim import OneCycleSchedule, SgdState, one_cycle_at, sgd_step


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 128
    batch_size: int = 64
    lr_max: float = 0.08
    weight_decay: float = 1e-4
    momentum_max: float = 0.95
    momentum_min: float = 0.85
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    dropout: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise UsageError("epochs must be at least 1")
        if self.batch_size < 1:
            raise UsageError("batch_size must be at least 1")
        if not 0.0 <= self.dropout < 1.0:
            raise UsageError("dropout must lie in [0, 1)")


@dataclass
class SplitData:
    """One dataset split, already preprocessed for the network.

    ``affinity`` entries are (local_indices, weights) pairs referring to the
    embedding rows of the model being trained; ``None`` when unused.
    """

    time_series: Optional[np.ndarray]
    affinity: Optional[Sequence[Tuple[np.ndarray, np.ndarray]]]
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def batch(self, idx: np.ndarray):
        ts = self.time_series[idx] if self.time_series is not None else None
        aff = [self.affinity[i] for i in idx] if self.affinity is not None else None
        return ts, aff, self.labels[idx]


@dataclass
class TrainResult:
    network: Network
    best_epoch: int
    best_valid_loss: float
    valid_history: List[float] = field(default_factory=list)
    mean_step_seconds: float = 0.0


def _batch_indices(count: int, batch_size: int):
    for start in range(0, count, batch_size):
        yield np.arange(start, min(start + batch_size, count))


def predict_proba(net: Network, data: SplitData, batch_size: int = 64) -> np.ndarray:
    """Probabilities for every sample, batched, graph-free, dropout off."""
    out = []
    with no_grad():
        for idx in _batch_indices(len(data), batch_size):
            ts, aff, _ = data.batch(idx)
            out.append(net.forward(ts, aff, train=False).data)
    return np.concatenate(out, axis=0)


def mean_nll(net: Network, data: SplitData, batch_size: int = 64) -> float:
    probs = predict_proba(net, data, batch_size)
    picked = probs[np.arange(len(data)), data.labels]
    return float(-np.log(np.maximum(picked, ad.PROB_FLOOR)).mean())


def train(
    kind: str,
    train_data: SplitData,
    valid_data: SplitData,
    dims: NetworkDims,
    config: TrainConfig,
    seed: int,
) -> TrainResult:
    """Train ``kind`` on ``train_data``; return the epoch checkpoint with the
    lowest validation loss.  Deterministic given the seed."""
    m = len(train_data)
    if m == 0:
        raise UsageError("training set is empty")
    if len(valid_data) == 0:
        raise UsageError("validation set is empty")
    init_rng, shuffle_rng, drop_rng = [
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)
    ]
    net = build_network(kind, dims, init_rng, keep_prob=1.0 - config.dropout)
    steps_per_epoch = math.ceil(m / config.batch_size)
    schedule = OneCycleSchedule(
        total_steps=config.epochs * steps_per_epoch,
        lr_max=config.lr_max,
        div_factor=config.div_factor,
        final_div_factor=config.final_div_factor,
        pct_start=config.pct_start,
        momentum_max=config.momentum_max,
        momentum_min=config.momentum_min,
    )
    state = SgdState.for_params(net.params, weight_decay=config.weight_decay)
    best_loss = math.inf
    best_epoch = -1
    best_params = net.ps.snapshot()
    history: List[float] = []
    step = 0
    step_seconds = 0.0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(m)
        for idx in _batch_indices(m, config.batch_size):
            ts, aff, labels = train_data.batch(order[idx])
            state.learning_rate, state.momentum = one_cycle_at(schedule, step)
            t0 = time.perf_counter()
            probs = net.forward(ts, aff, train=True, rng=drop_rng)
            loss = ad.nll_loss(probs, labels)
            ad.zero_grads(net.params)
            loss.backward()
            sgd_step(net.params, state)
            step_seconds += time.perf_counter() - t0
            step += 1
        valid_loss = mean_nll(net, valid_data, config.batch_size)
        if not math.isfinite(valid_loss):
            raise FloatingPointError(
                f"validation loss became non-finite at epoch {epoch}"
            )
        history.append(valid_loss)
        if valid_loss < best_loss:
            best_loss = valid_loss
            best_epoch = epoch
            best_params = net.ps.snapshot()
    net.ps.restore(best_params)
    return TrainResult(
        network=net,
        best_epoch=best_epoch,
        best_valid_loss=best_loss,
        valid_history=history,
        mean_step_seconds=step_seconds / max(step, 1),
    )
