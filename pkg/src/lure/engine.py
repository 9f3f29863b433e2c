"""Dense feed-forward networks in float64 with hand-written reverse mode.

A :class:`Network` owns an ordered list of :class:`ParamEntry` objects
(weight then bias for every layer, input layer first).  That order is fixed
for the lifetime of the network and defines the global flat parameter index
used by saliency masks.

Weights are stored as ``(fan_in, fan_out)`` so a layer computes
``h @ W + b``.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

from .errors import ConfigurationError, DivergenceError, InputError, ParseError, ProtocolError

DTYPE = np.float64
KINDS = ("weight", "bias")
CHECKPOINT_MAGIC = b"LURE1"


@dataclass(frozen=True)
class NetworkSpec:
    """Layer widths ``[d_in, h_1, ..., h_L, C]`` with ReLU between layers."""

    layer_dims: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ConfigurationError(f"need at least input and output widths, got {dims}")
        if any(d < 1 for d in dims):
            raise ConfigurationError(f"layer widths must be positive, got {dims}")
        if self.activation != "relu":
            raise ConfigurationError(f"unsupported activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def n_inputs(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_steps: tuple[int, ...] = (20, 40)
    lr_gamma: float = 0.1
    decay_biases: bool = True

    def __post_init__(self):
        object.__setattr__(self, "lr_steps", tuple(int(s) for s in self.lr_steps))
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if not 0 < self.lr_gamma <= 1:
            raise ConfigurationError("lr_gamma must lie in (0, 1]")
        if any(b <= a for a, b in zip(self.lr_steps, self.lr_steps[1:])):
            raise ConfigurationError("lr_steps must be strictly increasing")


@dataclass(eq=False)
class ParamEntry:
    layer: int  # 1-based
    kind: str
    values: np.ndarray
    grad: np.ndarray = field(default=None)
    momentum: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown parameter kind {self.kind!r}")
        self.values = np.ascontiguousarray(self.values, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        if self.momentum is None:
            self.momentum = np.zeros_like(self.values)

    @property
    def size(self) -> int:
        return self.values.size


def init_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """Draw i.i.d. values uniform on ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``."""
    if fan_in < 1:
        raise InputError(f"fan_in must be >= 1, got {fan_in}")
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE, copy=False)


class Network:
    """A dense ReLU network together with its parameters and optimizer state."""

    def __init__(self, spec: NetworkSpec, entries: Sequence[ParamEntry]):
        self.spec = spec
        self.entries = list(entries)
        expected = []
        for layer, (d_in, d_out) in enumerate(zip(spec.layer_dims, spec.layer_dims[1:]), start=1):
            expected.append((layer, "weight", (d_in, d_out)))
            expected.append((layer, "bias", (d_out,)))
        got = [(e.layer, e.kind, e.values.shape) for e in self.entries]
        if got != expected:
            raise ConfigurationError(f"parameter entries {got} do not match spec {expected}")
        self._cache = None

    @classmethod
    def initialize(cls, spec: NetworkSpec, rng: np.random.Generator) -> "Network":
        entries = []
        for layer, (d_in, d_out) in enumerate(zip(spec.layer_dims, spec.layer_dims[1:]), start=1):
            entries.append(ParamEntry(layer, "weight", init_uniform((d_in, d_out), d_in, rng)))
            entries.append(ParamEntry(layer, "bias", init_uniform((d_out,), d_in, rng)))
        return cls(spec, entries)

    @classmethod
    def zeros(cls, spec: NetworkSpec) -> "Network":
        entries = []
        for layer, (d_in, d_out) in enumerate(zip(spec.layer_dims, spec.layer_dims[1:]), start=1):
            entries.append(ParamEntry(layer, "weight", np.zeros((d_in, d_out))))
            entries.append(ParamEntry(layer, "bias", np.zeros(d_out)))
        return cls(spec, entries)

    # -- parameter access -------------------------------------------------

    def fan_in(self, layer: int) -> int:
        return self.spec.layer_dims[layer - 1]

    def weight(self, layer: int) -> ParamEntry:
        return self.entries[2 * (layer - 1)]

    def bias(self, layer: int) -> ParamEntry:
        return self.entries[2 * (layer - 1) + 1]

    def maskable(self, include_biases: bool = True) -> list[ParamEntry]:
        return [e for e in self.entries if include_biases or e.kind == "weight"]

    def n_params(self, include_biases: bool = True) -> int:
        return sum(e.size for e in self.maskable(include_biases))

    def layer_ranges(self, include_biases: bool = True) -> list[tuple[int, int, int]]:
        """``(layer, start, stop)`` slices of the flat maskable index per layer."""
        ranges, pos = [], 0
        for layer in range(1, self.spec.n_layers + 1):
            start = pos
            pos += self.weight(layer).size
            if include_biases:
                pos += self.bias(layer).size
            ranges.append((layer, start, pos))
        return ranges

    def flat_values(self, include_biases: bool = True) -> np.ndarray:
        return np.concatenate([e.values.ravel() for e in self.maskable(include_biases)])

    def flat_grads(self, include_biases: bool = True) -> np.ndarray:
        return np.concatenate([e.grad.ravel() for e in self.maskable(include_biases)])

    def set_flat_values(self, flat: np.ndarray, include_biases: bool = True) -> None:
        flat = np.asarray(flat, dtype=DTYPE)
        if flat.size != self.n_params(include_biases):
            raise ConfigurationError(
                f"flat vector has {flat.size} entries, network has {self.n_params(include_biases)}"
            )
        pos = 0
        for e in self.maskable(include_biases):
            e.values[...] = flat[pos:pos + e.size].reshape(e.values.shape)
            pos += e.size
        self._cache = None

    def zero_momentum(self) -> None:
        for e in self.entries:
            e.momentum[...] = 0.0

    def copy(self) -> "Network":
        entries = [
            ParamEntry(e.layer, e.kind, e.values.copy(), e.grad.copy(), e.momentum.copy())
            for e in self.entries
        ]
        return Network(self.spec, entries)

    def same_parameters(self, other: "Network") -> bool:
        """Bitwise equality of all parameter values."""
        return self.spec == other.spec and all(
            a.values.tobytes() == b.values.tobytes() for a, b in zip(self.entries, other.entries)
        )

    # -- numerics ---------------------------------------------------------

    def forward(self, inputs: np.ndarray) -> np.ndarray:
        """Pre-softmax logits of shape ``(batch, C)``."""
        x = np.asarray(inputs, dtype=DTYPE)
        if x.ndim != 2 or x.shape[1] != self.spec.n_inputs:
            raise ConfigurationError(
                f"layer 1 expects inputs of width {self.spec.n_inputs}, got shape {x.shape}"
            )
        acts, pre = [x], []
        h = x
        for layer in range(1, self.spec.n_layers + 1):
            z = h @ self.weight(layer).values + self.bias(layer).values
            pre.append(z)
            h = np.maximum(z, 0.0) if layer < self.spec.n_layers else z
            acts.append(h)
        self._cache = (x, acts, pre)
        return h

    def backward(self, inputs: np.ndarray, dlogits: np.ndarray) -> np.ndarray:
        """Write parameter gradients for ``dlogits``; return the input gradient.

        Must follow a :meth:`forward` on the same inputs.  Gradients are
        overwritten, never accumulated.
        """
        if self._cache is None:
            raise ProtocolError("backward called without a matching forward")
        x, acts, pre = self._cache
        inputs = np.asarray(inputs, dtype=DTYPE)
        if inputs is not x and (inputs.shape != x.shape or not np.array_equal(inputs, x)):
            raise ProtocolError("backward inputs differ from the last forward inputs")
        dz = np.asarray(dlogits, dtype=DTYPE)
        if dz.shape != acts[-1].shape:
            raise ConfigurationError(f"dlogits shape {dz.shape} != logits shape {acts[-1].shape}")
        for layer in range(self.spec.n_layers, 0, -1):
            w = self.weight(layer)
            np.matmul(acts[layer - 1].T, dz, out=w.grad)
            np.sum(dz, axis=0, out=self.bias(layer).grad)
            dh = dz @ w.values.T
            dz = dh * (pre[layer - 2] > 0) if layer > 1 else dh
        return dz


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_ce(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if n < 1:
        raise InputError("empty batch")
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise InputError(f"labels must lie in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))
    probs = np.exp(z - logsum[:, None])
    probs[rows, labels] -= 1.0
    return loss, probs / n


def lr_at(config: OptimizerConfig, epoch: int) -> float:
    """Step schedule: decay by ``lr_gamma`` at every step index <= epoch."""
    if epoch < 0:
        raise InputError("epoch must be >= 0")
    passed = sum(1 for s in config.lr_steps if s <= epoch)
    return config.learning_rate * config.lr_gamma ** passed


def sgd_step(net: Network, config: OptimizerConfig, current_lr: float) -> None:
    """Heavy-ball SGD with L2 weight decay, in place."""
    for e in net.entries:
        g = e.grad
        if config.weight_decay and (e.kind == "weight" or config.decay_biases):
            g = g + config.weight_decay * e.values
        if config.momentum:
            e.momentum *= config.momentum
            e.momentum += g
            step = e.momentum
        else:
            e.momentum[...] = g
            step = g
        e.values -= current_lr * step
        if not np.isfinite(e.values).all():
            raise DivergenceError(f"non-finite {e.kind} in layer {e.layer} after SGD step")
    net._cache = None


# -- checkpoints ------------------------------------------------------------

def write_checkpoint(net: Network, fh: BinaryIO, include_momentum: bool = False) -> None:
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<B", 1 if include_momentum else 0))
    dims = net.spec.layer_dims
    fh.write(struct.pack(f"<I{len(dims)}I", len(dims), *dims))
    fh.write(struct.pack("<I", len(net.entries)))
    for e in net.entries:
        shape = e.values.shape
        fh.write(struct.pack(f"<IBI{len(shape)}I", e.layer, KINDS.index(e.kind), len(shape), *shape))
        fh.write(e.values.astype("<f8").tobytes())
        if include_momentum:
            fh.write(e.momentum.astype("<f8").tobytes())


def checkpoint_bytes(net: Network, include_momentum: bool = False) -> bytes:
    buf = io.BytesIO()
    write_checkpoint(net, buf, include_momentum)
    return buf.getvalue()


def save_checkpoint(net: Network, path, include_momentum: bool = False) -> None:
    with open(path, "wb") as fh:
        write_checkpoint(net, fh, include_momentum)


def read_checkpoint(data: bytes) -> Network:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ParseError(f"checkpoint truncated at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(5) != CHECKPOINT_MAGIC:
        raise ParseError("bad checkpoint magic at byte 0")
    (flags,) = struct.unpack("<B", take(1))
    (n_dims,) = struct.unpack("<I", take(4))
    dims = struct.unpack(f"<{n_dims}I", take(4 * n_dims))
    spec = NetworkSpec(dims)
    (n_entries,) = struct.unpack("<I", take(4))
    entries = []
    for _ in range(n_entries):
        layer, kind, ndim = struct.unpack("<IBI", take(9))
        if kind >= len(KINDS):
            raise ParseError(f"bad parameter kind {kind} at byte {pos - 5}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = math.prod(shape)
        values = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(DTYPE)
        momentum = None
        if flags & 1:
            momentum = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(DTYPE)
        entries.append(ParamEntry(layer, KINDS[kind], values, momentum=momentum))
    if pos != len(data):
        raise ParseError(f"trailing bytes after checkpoint at byte {pos}")
    return Network(spec, entries)


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        return read_checkpoint(fh.read())
