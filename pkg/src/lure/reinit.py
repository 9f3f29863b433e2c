"""Between-mega-batch reinitialization strategies.

Each ``apply_*`` function mutates the network in place and returns the
number of parameter entries it redrew or rescaled.  Redrawn entries use the
same fan-in uniform initializer as network construction, and their momentum
buffers are cleared.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .engine import Network, init_uniform
from .errors import ConfigurationError
from .saliency import METHODS, SensitivityMask


@dataclass(frozen=True)
class WarmStart:
    tag = "warm"


@dataclass(frozen=True)
class ColdStart:
    tag = "cold"


@dataclass(frozen=True)
class Lure:
    k: float = 0.8
    method: str = "snip"
    include_biases: bool = True
    tag = "lure"

    def __post_init__(self):
        if not 0 < self.k <= 1:
            raise ConfigurationError("LURE retention k must lie in (0, 1]")
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown importance method {self.method!r}")


@dataclass(frozen=True)
class Rifle:
    tag = "rifle"


@dataclass(frozen=True)
class Llf:
    split_layer: Optional[int] = None  # None -> default_split(L)
    tag = "llf"


@dataclass(frozen=True)
class ShrinkPerturb:
    shrink: float = 0.4
    noise_std: float = 0.001
    include_biases: bool = True
    tag = "sp"

    def __post_init__(self):
        if not 0 <= self.shrink <= 1:
            raise ConfigurationError("shrink must lie in [0, 1]")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")


Strategy = Union[WarmStart, ColdStart, Lure, Rifle, Llf, ShrinkPerturb]


def default_split(n_layers: int) -> int:
    return math.ceil(n_layers / 2) + 1


def _redraw_layers(net: Network, layers, rng: np.random.Generator) -> int:
    count = 0
    for layer in layers:
        fan_in = net.fan_in(layer)
        for e in (net.weight(layer), net.bias(layer)):
            e.values[...] = init_uniform(e.values.shape, fan_in, rng)
            e.momentum[...] = 0.0
            count += e.size
    net._cache = None
    return count


def apply_warm(net: Network) -> int:
    return 0


def apply_cold(net: Network, rng: np.random.Generator) -> int:
    return _redraw_layers(net, range(1, net.spec.n_layers + 1), rng)


def apply_rifle(net: Network, rng: np.random.Generator) -> int:
    """Redraw only the classification layer."""
    return _redraw_layers(net, [net.spec.n_layers], rng)


def apply_llf(net: Network, split_layer: Optional[int], rng: np.random.Generator) -> int:
    """Redraw every layer with index >= ``split_layer`` (1-based)."""
    n_layers = net.spec.n_layers
    split = default_split(n_layers) if split_layer is None else split_layer
    # L + 1 is allowed: nothing qualifies and LLF degenerates to a warm start.
    if not 1 <= split <= n_layers + 1:
        raise ConfigurationError(f"LLF split layer {split} outside 1..{n_layers + 1}")
    return _redraw_layers(net, range(split, n_layers + 1), rng)


def apply_shrink_perturb(net: Network, shrink: float, noise_std: float, rng: np.random.Generator,
                         include_biases: bool = True) -> int:
    count = 0
    for e in net.maskable(include_biases):
        noise = rng.normal(0.0, noise_std, size=e.values.shape) if noise_std > 0 else 0.0
        e.values[...] = shrink * e.values + noise
        count += e.size
    net._cache = None
    return count


def apply_lure(net: Network, mask: SensitivityMask, rng: np.random.Generator,
               include_biases: bool = True) -> int:
    """Keep masked-in parameters bit for bit, redraw the rest."""
    entries = net.maskable(include_biases)
    m = sum(e.size for e in entries)
    if mask.size != m:
        raise ConfigurationError(f"mask covers {mask.size} parameters, network has {m}")
    pos, count = 0, 0
    for e in entries:
        drop = ~mask.bits[pos:pos + e.size].reshape(e.values.shape)
        pos += e.size
        fresh = init_uniform(e.values.shape, net.fan_in(e.layer), rng)
        if drop.any():
            e.values[drop] = fresh[drop]
            e.momentum[drop] = 0.0
            count += int(drop.sum())
    net._cache = None
    return count
