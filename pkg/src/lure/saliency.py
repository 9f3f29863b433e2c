"""Parameter importance scores and top-k retention masks.

Scores are flat vectors over the network's maskable parameters, in the
order given by :meth:`Network.maskable`.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .datastream import Dataset
from .engine import Network, loss_ce
from .errors import InputError, ParseError

METHODS = ("snip", "fisher", "magnitude", "random")
MASK_MAGIC = b"LMSK"


@dataclass(frozen=True, eq=False)
class SensitivityMask:
    bits: np.ndarray
    saliencies: np.ndarray
    retention: float
    method: str = "snip"
    megabatch: int = 0

    @property
    def retained_count(self) -> int:
        return int(np.count_nonzero(self.bits))

    @property
    def size(self) -> int:
        return self.bits.size

    def to_bytes(self) -> bytes:
        header = MASK_MAGIC + struct.pack(
            "<QdBI", self.size, self.retention, METHODS.index(self.method), self.megabatch
        )
        return header + np.packbits(self.bits.astype(bool), bitorder="little").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "SensitivityMask":
        if data[:4] != MASK_MAGIC:
            raise ParseError("bad mask magic at byte 0")
        m, k, tag, mb = struct.unpack("<QdBI", data[4:25])
        if tag >= len(METHODS):
            raise ParseError(f"bad method tag {tag} at byte 20")
        packed = np.frombuffer(data[25:], dtype=np.uint8)
        if packed.size != (m + 7) // 8:
            raise ParseError(f"mask payload has {packed.size} bytes, expected {(m + 7) // 8} (byte 25)")
        bits = np.unpackbits(packed, count=m, bitorder="little").astype(bool)
        return cls(bits, np.full(m, np.nan), k, METHODS[tag], mb)


def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


def _mean_gradient(net: Network, data: Dataset, batch_size: int, include_biases: bool,
                   square: bool = False) -> np.ndarray:
    if len(data) == 0:
        raise InputError("importance estimation needs a nonempty subset")
    total = np.zeros(net.n_params(include_biases))
    n = len(data)
    for sl in _batches(n, batch_size):
        x, y = data.inputs[sl], data.labels[sl]
        _, dlogits = loss_ce(net.forward(x), y)
        net.backward(x, dlogits)
        g = net.flat_grads(include_biases)
        weight = (sl.stop - sl.start) / n
        total += weight * (g * g if square else g)
    return total


def snip_sensitivity(net: Network, subset: Dataset, batch_size: int = 64,
                     include_biases: bool = True) -> np.ndarray:
    """Connection sensitivity ``theta * dL/dtheta`` of the mean loss over ``subset``.

    This is the derivative of ``L(M * theta)`` with respect to the mask ``M``
    at ``M = 1``.  Mini-batch gradients are weighted by batch size so the
    result is the gradient of the full-subset mean loss.
    """
    grad = _mean_gradient(net, subset, batch_size, include_biases)
    return net.flat_values(include_biases) * grad


def fisher_importance(net: Network, subset: Dataset, batch_size: int = 64,
                      include_biases: bool = True) -> np.ndarray:
    """Empirical diagonal Fisher: mean over mini-batches of the squared gradient."""
    return _mean_gradient(net, subset, batch_size, include_biases, square=True)


def magnitude_importance(net: Network, include_biases: bool = True) -> np.ndarray:
    return np.abs(net.flat_values(include_biases))


def random_importance(m: int, rng: np.random.Generator) -> np.ndarray:
    return rng.random(m)


def normalize_saliency(g) -> np.ndarray:
    """``|g| / sum |g|``; uniform when every score is zero."""
    a = np.abs(np.asarray(g, dtype=np.float64))
    if a.size == 0:
        raise InputError("empty score vector")
    total = math.fsum(a)
    if total == 0:
        return np.full(a.size, 1.0 / a.size)
    return a / total


def retained_count(k: float, m: int) -> int:
    # Round away representation noise such as 0.29 * 100 = 28.999999999999996.
    return int(math.floor(round(k * m, 6)))


def topk_mask(s, k: float, method: str = "snip", megabatch: int = 0) -> SensitivityMask:
    """Keep the ``floor(k * m)`` largest saliencies; ties go to the lower index."""
    s = np.asarray(s, dtype=np.float64)
    if not 0 < k <= 1:
        raise InputError("retention fraction k must lie in (0, 1]")
    n_keep = retained_count(k, s.size)
    if n_keep == 0:
        raise InputError(f"k = {k} retains no parameters out of {s.size}")
    bits = np.zeros(s.size, dtype=bool)
    if n_keep == s.size:
        bits[:] = True
    else:
        order = np.argsort(-s, kind="stable")
        bits[order[:n_keep]] = True
    return SensitivityMask(bits, s, k, method, megabatch)


def importance(method: str, net: Network, subset: Optional[Dataset], rng: np.random.Generator,
               batch_size: int = 64, include_biases: bool = True) -> np.ndarray:
    """Dispatch to one of the importance criteria by name."""
    if method == "snip":
        return snip_sensitivity(net, subset, batch_size, include_biases)
    if method == "fisher":
        return fisher_importance(net, subset, batch_size, include_biases)
    if method == "magnitude":
        return magnitude_importance(net, include_biases)
    if method == "random":
        return random_importance(net.n_params(include_biases), rng)
    raise InputError(f"unknown importance method {method!r}; expected one of {METHODS}")


def sensitivity_mask(method: str, net: Network, subset: Optional[Dataset], k: float,
                     rng: np.random.Generator, batch_size: int = 64, include_biases: bool = True,
                     megabatch: int = 0) -> SensitivityMask:
    scores = importance(method, net, subset, rng, batch_size, include_biases)
    return topk_mask(normalize_saliency(scores), k, method, megabatch)
