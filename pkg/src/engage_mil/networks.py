"""Dense multi-instance ranking network and LSTM sequence network.

Both models score a bag of M segment vectors with a single real number and
expose per-segment intensities for localization.  Forward, backward, and the
SGD loop are written directly in numpy; gradients are exact analytic
derivatives of the squared-error bag loss (the test suite checks them against
central finite differences).
"""

from __future__ import annotations

import copy
import json
import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audit import note_read
from .bags import Bag, Dataset
from .errors import ParseError, TrainingDivergedError

NET_MAGIC = b"EMNN"
NET_VERSION = 1

_ACTIVATIONS = ("relu", "sigmoid", "linear")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "sigmoid":
        return _sigmoid(z)
    return z


def _activation_grad(z, a, activation):
    """d(activation)/dz expressed with the already-computed output a."""
    if activation == "relu":
        return (z > 0.0).astype(np.float64)
    if activation == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "linear"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError("weights must be (out, in) with a matching bias")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ValueError("layer parameters must be finite")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[0]


_GATES = ("input", "forget", "output", "candidate")


@dataclass
class LstmLayer:
    """Single LSTM layer; each gate maps the concatenated [x_t, h_{t-1}]."""

    w_input: np.ndarray
    b_input: np.ndarray
    w_forget: np.ndarray
    b_forget: np.ndarray
    w_output: np.ndarray
    b_output: np.ndarray
    w_candidate: np.ndarray
    b_candidate: np.ndarray

    def __post_init__(self):
        for gate in _GATES:
            w = np.asarray(getattr(self, f"w_{gate}"), dtype=np.float64)
            b = np.asarray(getattr(self, f"b_{gate}"), dtype=np.float64)
            setattr(self, f"w_{gate}", w)
            setattr(self, f"b_{gate}", b)
        shapes_w = {getattr(self, f"w_{gate}").shape for gate in _GATES}
        shapes_b = {getattr(self, f"b_{gate}").shape for gate in _GATES}
        if len(shapes_w) != 1 or len(shapes_b) != 1:
            raise ValueError("all four gates must share parameter shapes")
        h, total = self.w_input.shape
        if self.b_input.shape != (h,) or total <= h:
            raise ValueError("gate weights must be (H, in_dim + H)")
        for gate in _GATES:
            if not (
                np.isfinite(getattr(self, f"w_{gate}")).all()
                and np.isfinite(getattr(self, f"b_{gate}")).all()
            ):
                raise ValueError("gate parameters must be finite")

    @property
    def hidden(self):
        return self.w_input.shape[0]

    @property
    def in_dim(self):
        return self.w_input.shape[1] - self.hidden


@dataclass
class MilNet:
    """Shared dense stack scoring each instance, then top-k or mean pooling."""

    layers: list[DenseLayer]
    pooling: str = "topk"
    k: int = 10
    label_scaling: bool = False

    def __post_init__(self):
        if not self.layers or self.layers[-1].out_dim != 1:
            raise ValueError("the final (ranking) stage must output one value")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.in_dim != prev.out_dim:
                raise ValueError("consecutive layer dimensions must chain")
        if self.pooling not in ("topk", "mean"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.pooling == "topk" and self.k < 1:
            raise ValueError("k must be at least 1")

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.bias))
        return out


@dataclass
class SeqNet:
    """LSTM over the segment sequence, flattened into a sigmoid dense head."""

    lstm: LstmLayer
    dense: list[DenseLayer]
    m: int
    label_scaling: bool = True

    def __post_init__(self):
        if len(self.dense) != 3:
            raise ValueError("the head must have exactly three dense stages")
        if any(layer.activation != "sigmoid" for layer in self.dense):
            raise ValueError("head stages must use sigmoid activations")
        if self.dense[0].in_dim != self.m * self.lstm.hidden:
            raise ValueError("head input must be the flattened M x H states")
        if self.dense[-1].out_dim != self.m:
            raise ValueError("head output must have one value per segment")
        for prev, nxt in zip(self.dense, self.dense[1:]):
            if nxt.in_dim != prev.out_dim:
                raise ValueError("consecutive layer dimensions must chain")

    @property
    def in_dim(self):
        return self.lstm.in_dim

    def parameters(self) -> list[np.ndarray]:
        out = []
        for gate in _GATES:
            out.extend((getattr(self.lstm, f"w_{gate}"), getattr(self.lstm, f"b_{gate}")))
        for layer in self.dense:
            out.extend((layer.weights, layer.bias))
        return out


@dataclass
class InstanceIntensities:
    """Per-segment scores for one bag, in original segment order."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("intensities must be a vector")
        if not np.isfinite(self.values).all():
            raise ValueError("intensities must be finite")

    def __len__(self):
        return self.values.shape[0]

    def sorted_view(self) -> np.ndarray:
        """The intensities in descending order (ties keep lower index first)."""
        return self.values[np.argsort(-self.values, kind="stable")]


@dataclass(frozen=True)
class TrainConfig:
    step_size: float = 0.01
    epochs: int = 300
    batch_size: int = 16
    seed: int = 0
    scale_labels: bool | None = None  # None: keep the net's own setting
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.clip_norm <= 0:
            raise ValueError("clip norm must be positive")


# ---------------------------------------------------------------------------
# construction


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_mil_net(
    in_dim: int,
    hidden=(128, 64, 32),
    pooling: str = "topk",
    k: int = 10,
    seed: int = 0,
    label_scaling: bool = False,
) -> MilNet:
    rng = np.random.default_rng(seed)
    sizes = [in_dim, *hidden, 1]
    layers = []
    for idx, (d_in, d_out) in enumerate(zip(sizes, sizes[1:])):
        activation = "linear" if idx == len(sizes) - 2 else "relu"
        layers.append(
            DenseLayer(
                weights=_uniform(rng, (d_out, d_in), d_in),
                bias=_uniform(rng, (d_out,), d_in),
                activation=activation,
            )
        )
    return MilNet(layers=layers, pooling=pooling, k=k, label_scaling=label_scaling)


def build_seq_net(
    in_dim: int,
    m: int,
    hidden: int = 32,
    dense=(64, 32),
    seed: int = 0,
    label_scaling: bool = True,
) -> SeqNet:
    rng = np.random.default_rng(seed)
    gate_in = in_dim + hidden
    gates = {}
    for gate in _GATES:
        gates[f"w_{gate}"] = _uniform(rng, (hidden, gate_in), gate_in)
        gates[f"b_{gate}"] = _uniform(rng, (hidden,), gate_in)
    lstm = LstmLayer(**gates)
    sizes = [m * hidden, *dense, m]
    head = []
    for d_in, d_out in zip(sizes, sizes[1:]):
        head.append(
            DenseLayer(
                weights=_uniform(rng, (d_out, d_in), d_in),
                bias=_uniform(rng, (d_out,), d_in),
                activation="sigmoid",
            )
        )
    return SeqNet(lstm=lstm, dense=head, m=m, label_scaling=label_scaling)


# ---------------------------------------------------------------------------
# pooling


def _intensity_values(r) -> np.ndarray:
    if isinstance(r, InstanceIntensities):
        return r.values
    return np.asarray(r, dtype=np.float64)


def topk_pool(r, k: int = 10) -> float:
    """Mean of the k largest intensities (ties resolved toward lower index)."""
    values = _intensity_values(r)
    m = values.shape[0]
    if not 1 <= k <= m:
        raise ValueError(f"k must lie in [1, {m}], got {k}")
    if k == m:
        return mean_pool(values)
    top = values[np.argsort(-values, kind="stable")[:k]]
    return float(top.mean())


def mean_pool(r) -> float:
    values = _intensity_values(r)
    if values.shape[0] < 1:
        raise ValueError("need at least one intensity")
    return float(values.mean())


def mil_loss(pred: float, label: float) -> float:
    return float((pred - label) ** 2)


# ---------------------------------------------------------------------------
# forward passes (batched internally over bags)


def _bag_matrix(net, bag) -> np.ndarray:
    x = bag.instances if isinstance(bag, Bag) else np.asarray(bag, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ValueError(f"expected (m, {net.in_dim}) instances, got {x.shape}")
    return np.asarray(x, dtype=np.float64)


def _dense_stack_forward(layers, h):
    caches = []
    for layer in layers:
        z = h @ layer.weights.T + layer.bias
        a = _activate(z, layer.activation)
        caches.append((h, z, a))
        h = a
    return h, caches

def _dense_stack_backward(layers, caches, d_out, grads_out):
    """Backprop d_out through the stack; writes (dW, db) pairs into grads_out."""
    dh = d_out
    for layer, (h_in, z, a) in zip(reversed(layers), reversed(caches)):
        dz = dh * _activation_grad(z, a, layer.activation)
        grads_out.appendleft((dz.T @ h_in, dz.sum(axis=0)))
        dh = dz @ layer.weights
    return dh


def _pool_matrix(net: MilNet, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scores and d(score)/dr for a (B, M) intensity matrix."""
    b, m = r.shape
    if net.pooling == "mean" or net.k >= m:
        if net.pooling == "topk" and net.k > m:
            raise ValueError(f"k={net.k} exceeds bag size {m}")
        return r.mean(axis=1), np.full((b, m), 1.0 / m)
    idx = np.argsort(-r, axis=1, kind="stable")[:, : net.k]
    mask = np.zeros((b, m))
    np.put_along_axis(mask, idx, 1.0 / net.k, axis=1)
    scores = np.take_along_axis(r, idx, axis=1).mean(axis=1)
    return scores, mask


def forward_mil(net: MilNet, bag) -> tuple[float, InstanceIntensities]:
    x = _bag_matrix(net, bag)
    out, _ = _dense_stack_forward(net.layers, x)
    r = out[:, 0]
    score = topk_pool(r, net.k) if net.pooling == "topk" else mean_pool(r)
    return score, InstanceIntensities(values=r)


def _seq_forward(net: SeqNet, x: np.ndarray):
    """LSTM recurrence + dense head for a (B, M, D) batch."""
    b, m, _ = x.shape
    h_dim = net.lstm.hidden
    h = np.zeros((b, h_dim))
    c = np.zeros((b, h_dim))
    states = []
    hs = np.empty((b, m, h_dim))
    lstm = net.lstm
    for t in range(m):
        zcat = np.concatenate([x[:, t, :], h], axis=1)
        gi = _sigmoid(zcat @ lstm.w_input.T + lstm.b_input)
        gf = _sigmoid(zcat @ lstm.w_forget.T + lstm.b_forget)
        go = _sigmoid(zcat @ lstm.w_output.T + lstm.b_output)
        gc = np.tanh(zcat @ lstm.w_candidate.T + lstm.b_candidate)
        c_prev = c
        c = gf * c_prev + gi * gc
        tanh_c = np.tanh(c)
        h = go * tanh_c
        states.append((zcat, gi, gf, go, gc, c_prev, tanh_c))
        hs[:, t, :] = h
    flat = hs.reshape(b, m * h_dim)
    out, dense_caches = _dense_stack_forward(net.dense, flat)
    scores = out.mean(axis=1)
    return scores, hs, states, dense_caches, out


def forward_seq(net: SeqNet, bag) -> tuple[float, np.ndarray]:
    x = _bag_matrix(net, bag)
    if x.shape[0] != net.m:
        raise ValueError(f"expected {net.m} segments, got {x.shape[0]}")
    scores, hs, _, _, _ = _seq_forward(net, x[None, :, :])
    return float(scores[0]), hs[0]


# ---------------------------------------------------------------------------
# backward passes


def _mil_batch_grads(net: MilNet, x: np.ndarray, y: np.ndarray):
    """Mean squared-error loss and its gradients over a (B, M, D) batch."""
    b, m, d = x.shape
    flat_in = x.reshape(b * m, d)
    out, caches = _dense_stack_forward(net.layers, flat_in)
    r = out[:, 0].reshape(b, m)
    scores, mask = _pool_matrix(net, r)
    losses = (scores - y) ** 2
    d_scores = 2.0 * (scores - y) / b
    dr = d_scores[:, None] * mask
    grads = deque()
    _dense_stack_backward(net.layers, caches, dr.reshape(b * m, 1), grads)
    return float(losses.mean()), [g for pair in grads for g in pair], scores


def _seq_batch_grads(net: SeqNet, x: np.ndarray, y: np.ndarray):
    b, m, _ = x.shape
    h_dim = net.lstm.hidden
    scores, hs, states, dense_caches, _ = _seq_forward(net, x)
    losses = (scores - y) ** 2
    d_scores = 2.0 * (scores - y) / b
    d_out = np.repeat(d_scores[:, None], net.dense[-1].out_dim, axis=1) / net.dense[-1].out_dim

    head_grads = deque()
    d_flat = _dense_stack_backward(net.dense, dense_caches, d_out, head_grads)
    d_hs = d_flat.reshape(b, m, h_dim)

    lstm = net.lstm
    gw = {gate: np.zeros_like(getattr(lstm, f"w_{gate}")) for gate in _GATES}
    gb = {gate: np.zeros_like(getattr(lstm, f"b_{gate}")) for gate in _GATES}
    dh_next = np.zeros((b, h_dim))
    dc_next = np.zeros((b, h_dim))
    for t in range(m - 1, -1, -1):
        zcat, gi, gf, go, gc, c_prev, tanh_c = states[t]
        dh = d_hs[:, t, :] + dh_next
        d_go = dh * tanh_c
        dc = dh * go * (1.0 - tanh_c**2) + dc_next
        d_gi = dc * gc
        d_gc = dc * gi
        d_gf = dc * c_prev
        dz = {
            "input": d_gi * gi * (1.0 - gi),
            "forget": d_gf * gf * (1.0 - gf),
            "output": d_go * go * (1.0 - go),
            "candidate": d_gc * (1.0 - gc**2),
        }
        d_zcat = np.zeros_like(zcat)
        for gate in _GATES:
            gw[gate] += dz[gate].T @ zcat
            gb[gate] += dz[gate].sum(axis=0)
            d_zcat += dz[gate] @ getattr(lstm, f"w_{gate}")
        dh_next = d_zcat[:, -h_dim:]
        dc_next = dc * gf
    grads = []
    for gate in _GATES:
        grads.extend((gw[gate], gb[gate]))
    grads.extend(g for pair in head_grads for g in pair)
    return float(losses.mean()), grads, scores


def backward(net, bag, label: float) -> list[np.ndarray]:
    """Gradients of (score - label)^2, aligned with net.parameters()."""
    x = _bag_matrix(net, bag)[None, :, :]
    y = np.array([float(label)])
    if isinstance(net, MilNet):
        _, grads, _ = _mil_batch_grads(net, x, y)
    else:
        _, grads, _ = _seq_batch_grads(net, x, y)
    return grads


# ---------------------------------------------------------------------------
# training


def _batch_grads(net, x, y):
    if isinstance(net, MilNet):
        return _mil_batch_grads(net, x, y)
    return _seq_batch_grads(net, x, y)


def train(net, dataset: Dataset, config: TrainConfig):
    """SGD on the bag-level squared error; returns (trained copy, loss trace).

    Per-epoch shuffling, mini-batches of config.batch_size bags, global
    gradient-norm clipping.  The trace holds each epoch's mean batch loss in
    the (possibly rescaled) label space being optimized.
    """
    if len(dataset) == 0:
        raise ValueError("dataset must be nonempty")
    net = copy.deepcopy(net)
    if config.scale_labels is not None:
        net.label_scaling = config.scale_labels
    x_all = dataset.tensor()
    y_all = np.array([float(bag.label) for bag in dataset.bags])
    if net.label_scaling:
        y_all = y_all / 3.0
    params = net.parameters()
    rng = np.random.default_rng(config.seed)
    trace: list[float] = []
    n = len(dataset)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            rows = order[start : start + config.batch_size]
            loss, grads, _ = _batch_grads(net, x_all[rows], y_all[rows])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {len(trace)}", trace=trace
                )
            total = np.sqrt(sum(float((g**2).sum()) for g in grads))
            if total > config.clip_norm:
                scale = config.clip_norm / total
                grads = [g * scale for g in grads]
            for p, g in zip(params, grads):
                p -= config.step_size * g
            epoch_losses.append(loss)
        trace.append(float(np.mean(epoch_losses)))
    return net, trace


# ---------------------------------------------------------------------------
# prediction and localization


def predict_score(net, bag) -> float:
    """Bag score in the 0-3 label range (rescaled if the net trains on [0,1])."""
    if isinstance(net, MilNet):
        score, _ = forward_mil(net, bag)
    else:
        score, _ = forward_seq(net, bag)
    return score * 3.0 if net.label_scaling else score


def predict_dataset(net, dataset: Dataset) -> np.ndarray:
    return np.array([predict_score(net, bag) for bag in dataset.bags])


def localize(net, bag) -> InstanceIntensities:
    """Per-segment intensity estimates in the 0-3 label range.

    MilNet exposes its ranking-layer outputs directly.  For SeqNet each
    segment is attributed the head's response to the flattened state vector
    with every other segment's activations zeroed.
    """
    scale = 3.0 if net.label_scaling else 1.0
    if isinstance(net, MilNet):
        _, intensities = forward_mil(net, bag)
        return InstanceIntensities(values=intensities.values * scale)
    x = _bag_matrix(net, bag)
    if x.shape[0] != net.m:
        raise ValueError(f"expected {net.m} segments, got {x.shape[0]}")
    _, hs = forward_seq(net, bag)
    h_dim = net.lstm.hidden
    isolated = np.zeros((net.m, net.m * h_dim))
    for j in range(net.m):
        isolated[j, j * h_dim : (j + 1) * h_dim] = hs[j]
    out, _ = _dense_stack_forward(net.dense, isolated)
    return InstanceIntensities(values=out.mean(axis=1) * scale)


# ---------------------------------------------------------------------------
# persistence


def _describe(net) -> dict:
    if isinstance(net, MilNet):
        return {
            "kind": "mil",
            "pooling": net.pooling,
            "k": net.k,
            "label_scaling": net.label_scaling,
            "layers": [
                {"in": layer.in_dim, "out": layer.out_dim, "activation": layer.activation}
                for layer in net.layers
            ],
        }
    return {
        "kind": "seq",
        "m": net.m,
        "hidden": net.lstm.hidden,
        "in_dim": net.lstm.in_dim,
        "label_scaling": net.label_scaling,
        "layers": [
            {"in": layer.in_dim, "out": layer.out_dim, "activation": layer.activation}
            for layer in net.dense
        ],
    }


def save_net(net, path, meta: dict | None = None) -> None:
    descriptor = _describe(net)
    blob = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", NET_MAGIC, NET_VERSION, len(blob)))
        fh.write(blob)
        for p in net.parameters():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    sidecar = dict(descriptor)
    sidecar["meta"] = meta or {}
    Path(str(path) + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n"
    )


def _empty_net(descriptor) -> "MilNet | SeqNet":
    if descriptor["kind"] == "mil":
        layers = [
            DenseLayer(
                weights=np.zeros((spec["out"], spec["in"])),
                bias=np.zeros(spec["out"]),
                activation=spec["activation"],
            )
            for spec in descriptor["layers"]
        ]
        return MilNet(
            layers=layers,
            pooling=descriptor["pooling"],
            k=descriptor["k"],
            label_scaling=descriptor["label_scaling"],
        )
    h, d = descriptor["hidden"], descriptor["in_dim"]
    gates = {}
    for gate in _GATES:
        gates[f"w_{gate}"] = np.zeros((h, d + h))
        gates[f"b_{gate}"] = np.zeros(h)
    dense = [
        DenseLayer(
            weights=np.zeros((spec["out"], spec["in"])),
            bias=np.zeros(spec["out"]),
            activation=spec["activation"],
        )
        for spec in descriptor["layers"]
    ]
    return SeqNet(
        lstm=LstmLayer(**gates),
        dense=dense,
        m=descriptor["m"],
        label_scaling=descriptor["label_scaling"],
    )


def load_net(path):
    note_read(path)
    data = Path(path).read_bytes()
    head = struct.Struct("<4sII")
    if len(data) < head.size:
        raise ParseError(path, 1, "truncated network file")
    magic, version, blob_len = head.unpack_from(data)
    if magic != NET_MAGIC or version != NET_VERSION:
        raise ParseError(path, 1, f"not a supported network file: {magic!r} v{version}")
    try:
        descriptor = json.loads(data[head.size : head.size + blob_len])
    except json.JSONDecodeError as exc:
        raise ParseError(path, 1, exc.msg) from None
    net = _empty_net(descriptor)
    params = net.parameters()
    expected = head.size + blob_len + sum(p.size for p in params) * 8
    if len(data) != expected:
        raise ParseError(path, 1, "payload size mismatch")
    offset = head.size + blob_len
    for p in params:
        block = np.frombuffer(data[offset : offset + p.size * 8], dtype="<f8")
        p[...] = block.reshape(p.shape)
        offset += p.size * 8
    sidecar_path = Path(str(path) + ".json")
    meta = {}
    if sidecar_path.exists():
        meta = json.loads(sidecar_path.read_text()).get("meta", {})
    return net, meta
