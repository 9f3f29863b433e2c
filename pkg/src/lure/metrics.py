"""Evaluation metrics and robustness probes."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .datastream import Dataset
from .engine import Network, loss_ce, softmax
from .errors import InputError
from .saliency import SensitivityMask

ECE_BINS = 15

# Severity s in 1..5 scales each corruption linearly.
CORRUPTION_TABLE = {
    "gaussian_noise": 0.1,   # additive N(0, (0.1 s)^2)
    "uniform_noise": 0.2,    # additive U(-0.2 s, 0.2 s)
    "feature_dropout": 0.1,  # each feature zeroed with probability 0.1 s
}


@dataclass
class MetricsRecord:
    megabatch: int
    test_accuracy: float
    error_count: int
    cumulative_cer: int
    train_accuracy: float
    val_accuracy: float
    generalization_gap: float
    ece: float
    wall_time_s: float = 0.0


@dataclass
class OverlapReport:
    pair: tuple
    layers: list
    percent: dict = field(default_factory=dict)  # layer -> percentage, undefined layers omitted


def cer(error_counts: Sequence[int]) -> list[int]:
    """Cumulative error counts (prefix sums)."""
    out, total = [], 0
    for c in error_counts:
        c = int(c)
        if c < 0:
            raise InputError("error counts must be >= 0")
        total += c
        out.append(total)
    return out


def generalization_gap(train_acc: float, val_acc: float) -> float:
    return train_acc - val_acc


def ece(confidences, correctness, n_bins: int = ECE_BINS) -> float:
    """Expected calibration error over equal-width, right-inclusive bins.

    Bin ``b`` covers ``(b/n, (b+1)/n]``; a confidence of exactly 0 falls in
    the first bin.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    corr = np.asarray(correctness, dtype=np.float64)
    if n_bins < 1:
        raise InputError("n_bins must be >= 1")
    if conf.shape != corr.shape or conf.ndim != 1:
        raise InputError("confidences and correctness must be equal-length vectors")
    if conf.size == 0:
        raise InputError("no samples")
    if conf.min() < 0 or conf.max() > 1:
        raise InputError("confidences must lie in [0, 1]")
    bins = np.clip(np.ceil(conf * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    n = conf.size
    total = 0.0
    for b in range(n_bins):
        sel = bins == b
        size = np.count_nonzero(sel)
        if size == 0:
            continue
        gap = abs(corr[sel].mean() - conf[sel].mean())
        total += (size / n) * gap
    return float(total)


def reliability_table(confidences, correctness, n_bins: int = ECE_BINS) -> list[dict]:
    """Per-bin count, accuracy and mean confidence (plot data for reliability diagrams)."""
    conf = np.asarray(confidences, dtype=np.float64)
    corr = np.asarray(correctness, dtype=np.float64)
    bins = np.clip(np.ceil(conf * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    rows = []
    for b in range(n_bins):
        sel = bins == b
        size = int(np.count_nonzero(sel))
        rows.append({
            "bin": b,
            "lower": b / n_bins,
            "upper": (b + 1) / n_bins,
            "count": size,
            "accuracy": float(corr[sel].mean()) if size else float("nan"),
            "confidence": float(conf[sel].mean()) if size else float("nan"),
        })
    return rows


def mask_overlap(prev: SensitivityMask, curr: SensitivityMask, layer_ranges,
                 pair: tuple = (0, 0)) -> OverlapReport:
    """Per-layer percentage of ``prev``'s retained entries that ``curr`` also retains.

    The denominator is ``prev``'s retained count in the layer, so the measure
    is not symmetric.  Layers where ``prev`` retains nothing are omitted.
    """
    if prev.size != curr.size:
        raise InputError(f"mask sizes differ: {prev.size} vs {curr.size}")
    report = OverlapReport(pair=pair, layers=[layer for layer, _, _ in layer_ranges])
    for layer, start, stop in layer_ranges:
        a = prev.bits[start:stop]
        denom = np.count_nonzero(a)
        if denom == 0:
            continue
        both = np.count_nonzero(a & curr.bits[start:stop])
        report.percent[layer] = 100.0 * both / denom
    return report


def predict(net: Network, inputs: np.ndarray, batch_size: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Argmax predictions (ties to the lowest class) and max-softmax confidences."""
    preds, confs = [], []
    for start in range(0, len(inputs), batch_size):
        logits = net.forward(inputs[start:start + batch_size])
        preds.append(np.argmax(logits, axis=1))
        confs.append(softmax(logits).max(axis=1))
    if not preds:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    return np.concatenate(preds), np.concatenate(confs)


def accuracy(net: Network, inputs: np.ndarray, labels: np.ndarray) -> float:
    preds, _ = predict(net, inputs)
    return float(np.mean(preds == labels))


def input_gradient(net: Network, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    logits = net.forward(x)
    _, dlogits = loss_ce(logits, y)
    return net.backward(x, dlogits)


def pgd_attack(net: Network, x: np.ndarray, y: np.ndarray, epsilon: float,
               rng: np.random.Generator, steps: int = 10, step_size: Optional[float] = None,
               clip: Optional[tuple] = None) -> np.ndarray:
    """L-infinity PGD with one uniform random start inside the epsilon ball.

    ``step_size`` defaults to ``2.5 * epsilon / steps``.  ``clip`` restricts
    the result to a valid input box such as ``(0.0, 1.0)``.
    """
    if epsilon < 0:
        raise InputError("epsilon must be >= 0")
    if steps < 1:
        raise InputError("steps must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if epsilon == 0:
        return x.copy()
    if step_size is None:
        step_size = 2.5 * epsilon / steps
    lo, hi = x - epsilon, x + epsilon
    if clip is not None:
        lo, hi = np.maximum(lo, clip[0]), np.minimum(hi, clip[1])
    adv = _project(np.clip(x + rng.uniform(-epsilon, epsilon, size=x.shape), lo, hi), x, epsilon)
    for _ in range(steps):
        grad = input_gradient(net, adv, y)
        adv = _project(np.clip(adv + step_size * np.sign(grad), lo, hi), x, epsilon)
    return adv


def _project(adv: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    # x + eps can round so that (x + eps) - x > eps; step such entries toward x.
    over = np.abs(adv - x) > epsilon
    while over.any():
        adv[over] = np.nextafter(adv[over], x[over])
        over = np.abs(adv - x) > epsilon
    return adv


def adversarial_accuracy(net: Network, data: Dataset, epsilon: float, rng: np.random.Generator,
                         steps: int = 10, step_size: Optional[float] = None,
                         clip: Optional[tuple] = None, batch_size: int = 1024) -> float:
    correct = 0
    for start in range(0, len(data), batch_size):
        x = data.inputs[start:start + batch_size]
        y = data.labels[start:start + batch_size]
        adv = pgd_attack(net, x, y, epsilon, rng, steps, step_size, clip)
        correct += int(np.sum(predict(net, adv)[0] == y))
    return correct / len(data)


def perturb_parameters(net: Network, noise_std: float, rng: np.random.Generator) -> Network:
    """Copy of ``net`` with i.i.d. Gaussian noise added to every parameter."""
    if noise_std < 0:
        raise InputError("noise_std must be >= 0")
    out = net.copy()
    if noise_std > 0:
        for e in out.entries:
            e.values += rng.normal(0.0, noise_std, size=e.values.shape)
    return out


def perturbation_curve(net: Network, data: Dataset, sigmas: Sequence[float],
                       rng: np.random.Generator, repeats: int = 5) -> list[dict]:
    """Mean and std of accuracy under parameter noise for each sigma."""
    rows = []
    for sigma in sigmas:
        accs = [accuracy(perturb_parameters(net, sigma, rng), data.inputs, data.labels)
                for _ in range(repeats)]
        rows.append({"sigma": float(sigma), "accuracy_mean": float(np.mean(accs)),
                     "accuracy_std": float(np.std(accs))})
    return rows


def corrupt_inputs(x: np.ndarray, kind: str, severity: int, rng: np.random.Generator) -> np.ndarray:
    if kind not in CORRUPTION_TABLE:
        raise InputError(f"unknown corruption {kind!r}; expected one of {sorted(CORRUPTION_TABLE)}")
    if severity not in (1, 2, 3, 4, 5):
        raise InputError(f"severity must be an integer in 1..5, got {severity!r}")
    x = np.asarray(x, dtype=np.float64)
    scale = CORRUPTION_TABLE[kind] * severity
    if kind == "gaussian_noise":
        return x + rng.normal(0.0, scale, size=x.shape)
    if kind == "uniform_noise":
        return x + rng.uniform(-scale, scale, size=x.shape)
    return np.where(rng.random(x.shape) < scale, 0.0, x)


def corruption_accuracies(net: Network, data: Dataset, kinds: Sequence[str],
                          severities: Sequence[int], rng: np.random.Generator) -> list[dict]:
    rows = []
    for kind in kinds:
        for s in severities:
            acc = accuracy(net, corrupt_inputs(data.inputs, kind, s, rng), data.labels)
            rows.append({"kind": kind, "severity": int(s), "accuracy": acc})
    return rows


def mean_corruption_accuracy(rows: Sequence[dict]) -> float:
    """Uniform mean over every (kind, severity) cell."""
    if not rows:
        raise InputError("empty corruption grid")
    return float(np.mean([r["accuracy"] for r in rows]))
