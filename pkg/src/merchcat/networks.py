"""Classifier architectures.

Two encoders produce 64-dimensional merchant representations: a stack of
residual 1-D convolution blocks over the daily feature matrix (temporal),
and a normalized weighted sum of known-merchant embeddings (affinity).
The flagship head turns the affinity representation into a per-merchant
weight matrix and bias, i.e. it generates a logistic-regression classifier
for the (transformed) temporal representation.  Alternative heads used in
ablations: plain concatenation into an MLP, and single-encoder heads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .affinity import aggregate_batch
from .autodiff import Tensor
from .errors import BundleFormatError, DimensionError, UsageError


@dataclass(frozen=True)
class NetworkDims:
    seq_len: int
    num_channels: int
    num_categories: int
    hidden_dim: int = 64
    num_blocks: int = 20
    num_known: int = 0  # embedding rows; only affinity-using models need it


class ParamSet:
    """Ordered, named registry of trainable tensors.

    The registration order is the declaration order used when flattening to
    and from checkpoint files.
    """

    def __init__(self):
        self.names: List[str] = []
        self.tensors: List[Tensor] = []

    def add(self, name: str, array: np.ndarray) -> Tensor:
        t = ad.parameter(array)
        self.names.append(name)
        self.tensors.append(t)
        return t

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors])

    def load_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        expected = sum(t.data.size for t in self.tensors)
        if flat.size != expected:
            raise BundleFormatError(
                f"parameter block has {flat.size} values, model needs {expected}"
            )
        offset = 0
        for t in self.tensors:
            n = t.data.size
            t.data = flat[offset : offset + n].reshape(t.data.shape).copy()
            offset += n

    def snapshot(self) -> List[np.ndarray]:
        return [t.data.copy() for t in self.tensors]

    def restore(self, snap: Sequence[np.ndarray]) -> None:
        for t, arr in zip(self.tensors, snap):
            t.data = arr.copy()


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# temporal encoder
# ---------------------------------------------------------------------------


@dataclass
class ResidualBlock:
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    shortcut_w: Optional[Tensor] = None
    shortcut_b: Optional[Tensor] = None


def init_temporal_blocks(
    ps: ParamSet, in_channels: int, hidden: int, num_blocks: int, rng
) -> List[ResidualBlock]:
    blocks = []
    for i in range(num_blocks):
        cin = in_channels if i == 0 else hidden
        block = ResidualBlock(
            conv1_w=ps.add(f"block{i}.conv1.w", _uniform(rng, (hidden, cin, 3), cin * 3)),
            conv1_b=ps.add(f"block{i}.conv1.b", np.zeros(hidden)),
            conv2_w=ps.add(f"block{i}.conv2.w", _uniform(rng, (hidden, hidden, 3), hidden * 3)),
            conv2_b=ps.add(f"block{i}.conv2.b", np.zeros(hidden)),
        )
        if cin != hidden:
            # channel-matching 1x1 conv; needed in the first block only
            block.shortcut_w = ps.add(f"block{i}.shortcut.w", _uniform(rng, (hidden, cin, 1), cin))
            block.shortcut_b = ps.add(f"block{i}.shortcut.b", np.zeros(hidden))
        blocks.append(block)
    return blocks


def temporal_encode(
    x,
    blocks: Sequence[ResidualBlock],
    keep_prob: float = 1.0,
    train: bool = False,
    rng=None,
) -> Tensor:
    """Residual conv stack plus global average pooling.

    ``x``: (T, d) or (B, T, d) array or tensor; returns (hidden,) or
    (B, hidden).  Sequences shorter than the kernel are rejected.
    """
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.data.shape[-2] < 3:
        raise DimensionError(
            f"sequence length {h.data.shape[-2]} is shorter than the kernel (3)"
        )
    for block in blocks:
        main = ad.conv1d(h, block.conv1_w, block.conv1_b, padding=1)
        main = ad.dropout(ad.relu(main), keep_prob, train, rng)
        main = ad.conv1d(main, block.conv2_w, block.conv2_b, padding=1)
        main = ad.dropout(ad.relu(main), keep_prob, train, rng)
        if block.shortcut_w is not None:
            short = ad.conv1d(h, block.shortcut_w, block.shortcut_b, padding=0)
        else:
            short = h
        h = ad.relu(ad.add(main, short))
    return ad.global_avg_pool(h)


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------


def fuse_and_classify(
    h_aff: Tensor,
    h_temp: Tensor,
    post_w: Tensor,
    post_b: Tensor,
    wgen_w: Tensor,
    wgen_b: Tensor,
    bgen_w: Tensor,
    bgen_b: Tensor,
) -> Tensor:
    """Affinity-generated classifier applied to the temporal representation.

    The affinity representation is mapped (through ReLU linears) to a
    nonnegative weight matrix and bias, which classify the transformed
    temporal representation.
    """
    single = h_aff.data.ndim == 1
    if single:
        h_aff = ad.reshape(h_aff, (1, -1))
        h_temp = ad.reshape(h_temp, (1, -1))
    batch, hidden = h_temp.data.shape
    num_cat = bgen_b.data.shape[0]
    h_bar = ad.relu(ad.linear(h_temp, post_w, post_b))
    w_flat = ad.relu(ad.linear(h_aff, wgen_w, wgen_b))
    b_gen = ad.relu(ad.linear(h_aff, bgen_w, bgen_b))
    assert w_flat.data.min() >= 0.0 and b_gen.data.min() >= 0.0
    w_gen = ad.reshape(w_flat, (batch, hidden, num_cat))
    logits = ad.add(ad.rowwise_bmm(h_bar, w_gen), b_gen)
    probs = ad.softmax(logits)
    return ad.reshape(probs, (num_cat,)) if single else probs


def simple_concat_classify(
    h_aff: Tensor, h_temp: Tensor, fc1_w: Tensor, fc1_b: Tensor,
    fc2_w: Tensor, fc2_b: Tensor,
) -> Tensor:
    """Baseline fusion: concatenate (affinity, temporal) into a small MLP."""
    single = h_aff.data.ndim == 1
    joint = ad.concat([h_aff, h_temp], axis=-1)
    hid = ad.relu(ad.linear(joint, fc1_w, fc1_b))
    return ad.softmax(ad.linear(hid, fc2_w, fc2_b))


def single_encoder_classify(
    h: Tensor, fc1_w: Tensor, fc1_b: Tensor, fc2_w: Tensor, fc2_b: Tensor
) -> Tensor:
    """Linear-ReLU-Linear-Softmax head over one representation."""
    hid = ad.relu(ad.linear(h, fc1_w, fc1_b))
    return ad.softmax(ad.linear(hid, fc2_w, fc2_b))


# ---------------------------------------------------------------------------
# full networks
# ---------------------------------------------------------------------------

MODEL_KINDS = ("proposed", "simple_concat", "temporal_only", "affinity_only", "lr")


class Network:
    """Base container: a ParamSet plus a forward pass over a mini-batch."""

    kind = ""
    uses_time_series = True
    uses_affinity = False

    def __init__(self, dims: NetworkDims, rng: np.random.Generator):
        self.dims = dims
        self.ps = ParamSet()
        self._build(rng)

    def _build(self, rng):
        raise NotImplementedError

    @property
    def params(self) -> List[Tensor]:
        return self.ps.tensors

    def forward(self, ts, aff, train: bool = False, rng=None) -> Tensor:
        raise NotImplementedError

    def _embed_affinity(self, aff) -> Tensor:
        return aggregate_batch(self.embedding, aff)


class TemporalOnlyNetwork(Network):
    kind = "temporal_only"

    def _build(self, rng):
        d = self.dims
        self.blocks = init_temporal_blocks(self.ps, d.num_channels, d.hidden_dim, d.num_blocks, rng)
        self.fc1_w = self.ps.add("head.fc1.w", _uniform(rng, (d.hidden_dim, d.hidden_dim), d.hidden_dim))
        self.fc1_b = self.ps.add("head.fc1.b", np.zeros(d.hidden_dim))
        self.fc2_w = self.ps.add("head.fc2.w", _uniform(rng, (d.hidden_dim, d.num_categories), d.hidden_dim))
        self.fc2_b = self.ps.add("head.fc2.b", np.zeros(d.num_categories))
        self.keep_prob = 1.0

    def forward(self, ts, aff, train=False, rng=None):
        h = temporal_encode(ts, self.blocks, self.keep_prob, train, rng)
        return single_encoder_classify(h, self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b)


class AffinityOnlyNetwork(Network):
    kind = "affinity_only"
    uses_time_series = False
    uses_affinity = True

    def _build(self, rng):
        d = self.dims
        if d.num_known < 1:
            raise UsageError("affinity models need at least one known merchant")
        self.embedding = self.ps.add(
            "embedding", _uniform(rng, (d.num_known, d.hidden_dim), d.hidden_dim)
        )
        self.fc1_w = self.ps.add("head.fc1.w", _uniform(rng, (d.hidden_dim, d.hidden_dim), d.hidden_dim))
        self.fc1_b = self.ps.add("head.fc1.b", np.zeros(d.hidden_dim))
        self.fc2_w = self.ps.add("head.fc2.w", _uniform(rng, (d.hidden_dim, d.num_categories), d.hidden_dim))
        self.fc2_b = self.ps.add("head.fc2.b", np.zeros(d.num_categories))

    def forward(self, ts, aff, train=False, rng=None):
        h = self._embed_affinity(aff)
        return single_encoder_classify(h, self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b)


class ProposedNetwork(Network):
    kind = "proposed"
    uses_affinity = True

    def _build(self, rng):
        d = self.dims
        if d.num_known < 1:
            raise UsageError("affinity models need at least one known merchant")
        self.embedding = self.ps.add(
            "embedding", _uniform(rng, (d.num_known, d.hidden_dim), d.hidden_dim)
        )
        self.blocks = init_temporal_blocks(self.ps, d.num_channels, d.hidden_dim, d.num_blocks, rng)
        h = d.hidden_dim
        c = d.num_categories
        self.post_w = self.ps.add("post.w", _uniform(rng, (h, h), h))
        self.post_b = self.ps.add("post.b", np.zeros(h))
        self.wgen_w = self.ps.add("wgen.w", _uniform(rng, (h, h * c), h))
        self.wgen_b = self.ps.add("wgen.b", np.zeros(h * c))
        self.bgen_w = self.ps.add("bgen.w", _uniform(rng, (h, c), h))
        self.bgen_b = self.ps.add("bgen.b", np.zeros(c))
        self.keep_prob = 1.0

    def forward(self, ts, aff, train=False, rng=None):
        h_temp = temporal_encode(ts, self.blocks, self.keep_prob, train, rng)
        h_aff = self._embed_affinity(aff)
        return fuse_and_classify(
            h_aff, h_temp, self.post_w, self.post_b,
            self.wgen_w, self.wgen_b, self.bgen_w, self.bgen_b,
        )


class SimpleConcatNetwork(Network):
    kind = "simple_concat"
    uses_affinity = True

    def _build(self, rng):
        d = self.dims
        if d.num_known < 1:
            raise UsageError("affinity models need at least one known merchant")
        self.embedding = self.ps.add(
            "embedding", _uniform(rng, (d.num_known, d.hidden_dim), d.hidden_dim)
        )
        self.blocks = init_temporal_blocks(self.ps, d.num_channels, d.hidden_dim, d.num_blocks, rng)
        h = d.hidden_dim
        self.fc1_w = self.ps.add("head.fc1.w", _uniform(rng, (2 * h, h), 2 * h))
        self.fc1_b = self.ps.add("head.fc1.b", np.zeros(h))
        self.fc2_w = self.ps.add("head.fc2.w", _uniform(rng, (h, d.num_categories), h))
        self.fc2_b = self.ps.add("head.fc2.b", np.zeros(d.num_categories))
        self.keep_prob = 1.0

    def forward(self, ts, aff, train=False, rng=None):
        h_temp = temporal_encode(ts, self.blocks, self.keep_prob, train, rng)
        h_aff = self._embed_affinity(aff)
        return simple_concat_classify(
            h_aff, h_temp, self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b
        )


class LinearSoftmaxNetwork(Network):
    """Multinomial logistic regression over the flattened feature matrix."""

    kind = "lr"

    def _build(self, rng):
        d = self.dims
        n_in = d.seq_len * d.num_channels
        self.w = self.ps.add("w", _uniform(rng, (n_in, d.num_categories), n_in))
        self.b = self.ps.add("b", np.zeros(d.num_categories))

    def forward(self, ts, aff, train=False, rng=None):
        x = ts if isinstance(ts, Tensor) else Tensor(ts)
        flat = ad.reshape(x, (x.data.shape[0], -1))
        return ad.softmax(ad.linear(flat, self.w, self.b))


_NETWORKS = {
    cls.kind: cls
    for cls in (
        ProposedNetwork,
        SimpleConcatNetwork,
        TemporalOnlyNetwork,
        AffinityOnlyNetwork,
        LinearSoftmaxNetwork,
    )
}


def build_network(kind: str, dims: NetworkDims, rng: np.random.Generator,
                  keep_prob: float = 1.0) -> Network:
    if kind not in _NETWORKS:
        raise UsageError(f"unknown model kind {kind!r}; pick one of {sorted(_NETWORKS)}")
    net = _NETWORKS[kind](dims, rng)
    if hasattr(net, "keep_prob"):
        net.keep_prob = keep_prob
    return net


# ---------------------------------------------------------------------------
# checkpoint format: magic, header length, JSON header, float64 LE parameters
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"MCATCKP1"


def save_checkpoint(path, header: dict, flat_params: np.ndarray) -> None:
    header = dict(header)
    header["param_count"] = int(flat_params.size)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(flat_params, dtype="<f8").tobytes())


def load_checkpoint(path) -> Tuple[dict, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise BundleFormatError("checkpoint magic: not a model checkpoint file")
        raw_len = fh.read(8)
        if len(raw_len) != 8:
            raise BundleFormatError("checkpoint header length: file truncated")
        (hlen,) = struct.unpack("<Q", raw_len)
        blob = fh.read(hlen)
        if len(blob) != hlen:
            raise BundleFormatError("checkpoint header: file truncated")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise BundleFormatError(f"checkpoint header: invalid JSON ({exc})") from exc
        payload = fh.read()
    count = header.get("param_count")
    if count is None:
        raise BundleFormatError("checkpoint header field param_count: missing")
    if len(payload) != 8 * count:
        raise BundleFormatError(
            f"checkpoint parameter block: expected {8 * count} bytes, found {len(payload)}"
        )
    params = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return header, params
