"""Anytime-learning driver: train on each mega-batch, evaluate, forget, repeat."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .datastream import (
    BufferedReplay,
    Dataset,
    FullReplay,
    MegaBatchStream,
    ReplayBuffer,
    ReplayPolicy,
    assemble_training_set,
    sample_subset,
    update_buffer,
)
from .engine import Network, NetworkSpec, OptimizerConfig, checkpoint_bytes, loss_ce, lr_at, sgd_step
from .errors import ConfigurationError, DivergenceError, InputError
from .metrics import MetricsRecord, ece, generalization_gap, predict
from .reinit import (
    ColdStart,
    Llf,
    Lure,
    Rifle,
    ShrinkPerturb,
    Strategy,
    WarmStart,
    apply_cold,
    apply_llf,
    apply_lure,
    apply_rifle,
    apply_shrink_perturb,
    apply_warm,
)
from .saliency import SensitivityMask, sensitivity_mask

log = logging.getLogger(__name__)

SEED_STREAMS = ("data", "init", "strategy", "shuffle", "probe")


def seed_streams(master_seed: int) -> dict[str, np.random.Generator]:
    """Independent generators keyed by purpose.

    Stream ``i`` is seeded with the entropy pair ``(master_seed, i)`` in the
    order of ``SEED_STREAMS``.
    """
    return {name: np.random.default_rng([int(master_seed), i]) for i, name in enumerate(SEED_STREAMS)}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    strategy: Strategy = field(default_factory=Lure)
    replay: ReplayPolicy = field(default_factory=FullReplay)
    subset_fraction: Optional[float] = 0.2
    subset_count: Optional[int] = None
    reset_optimizer: bool = True
    ece_bins: int = 15
    # Optional per-mini-batch input transform ``augment(x, rng) -> x``; None trains on raw inputs.
    augment: Optional[Callable[[np.ndarray, np.random.Generator], np.ndarray]] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if (self.subset_fraction is None) == (self.subset_count is None):
            raise ConfigurationError("set exactly one of subset_fraction and subset_count")


@dataclass
class ExperimentResult:
    records: list
    masks: list  # SensitivityMask per strategy application (LURE only)
    checkpoints: list  # checkpoint bytes after training on each mega-batch
    strategy_log: list
    network: Network
    train_sizes: list = field(default_factory=list)


@dataclass
class Evaluation:
    accuracy: float
    error_count: int
    confidences: np.ndarray
    correctness: np.ndarray


def evaluate(net: Network, data: Dataset) -> Evaluation:
    if len(data) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    preds, confs = predict(net, data.inputs)
    correct = preds == data.labels
    n_correct = int(correct.sum())
    return Evaluation(n_correct / len(data), len(data) - n_correct, confs, correct)


def train_megabatch(net: Network, data: Dataset, config: TrainConfig, rng: np.random.Generator,
                    megabatch: int = 0) -> float:
    """Run ``config.epochs`` epochs of mini-batch SGD; return last-epoch running accuracy.

    The learning-rate schedule restarts at epoch 0 on every call; with
    ``reset_optimizer`` the momentum buffers are cleared too.  The final
    partial mini-batch is trained on.
    """
    n = len(data)
    if n == 0:
        raise InputError("cannot train on an empty dataset")
    if config.reset_optimizer:
        net.zero_momentum()
    opt = config.optimizer
    bs = config.batch_size
    train_acc = 0.0
    for epoch in range(config.epochs):
        lr = lr_at(opt, epoch)
        order = rng.permutation(n)
        correct = 0
        for step, start in enumerate(range(0, n, bs)):
            rows = order[start:start + bs]
            x, y = data.inputs[rows], data.labels[rows]
            if config.augment is not None:
                x = config.augment(x, rng)
            logits = net.forward(x)
            loss, dlogits = loss_ce(logits, y)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at mega-batch {megabatch}, epoch {epoch}, step {step}"
                )
            correct += int(np.sum(np.argmax(logits, axis=1) == y))
            net.backward(x, dlogits)
            sgd_step(net, opt, lr)
        train_acc = correct / n
    return train_acc


def apply_strategy(net: Network, strategy: Strategy, train_split: Dataset, config: TrainConfig,
                   rng: np.random.Generator, megabatch: int) -> tuple[int, Optional[SensitivityMask]]:
    """Apply a reinitialization strategy; return (modified entries, mask or None)."""
    if isinstance(strategy, WarmStart):
        return apply_warm(net), None
    if isinstance(strategy, ColdStart):
        return apply_cold(net, rng), None
    if isinstance(strategy, Rifle):
        return apply_rifle(net, rng), None
    if isinstance(strategy, Llf):
        return apply_llf(net, strategy.split_layer, rng), None
    if isinstance(strategy, ShrinkPerturb):
        return apply_shrink_perturb(net, strategy.shrink, strategy.noise_std, rng,
                                    strategy.include_biases), None
    if isinstance(strategy, Lure):
        subset = None
        if strategy.method in ("snip", "fisher"):
            subset = sample_subset(train_split, rng, config.subset_fraction, config.subset_count)
        mask = sensitivity_mask(strategy.method, net, subset, strategy.k, rng, config.batch_size,
                                strategy.include_biases, megabatch)
        return apply_lure(net, mask, rng, strategy.include_biases), mask
    raise ConfigurationError(f"unknown strategy {strategy!r}")


def run_alma(stream: MegaBatchStream, spec: NetworkSpec, config: TrainConfig,
             rngs: dict[str, np.random.Generator], strategy_hook: bool = True) -> ExperimentResult:
    """Train through the stream, applying the strategy between mega-batches.

    ``rngs`` needs ``init``, ``strategy``, ``shuffle`` and ``data`` generators
    (see :func:`seed_streams`); ``data`` drives replay-buffer sampling.
    """
    if spec.n_inputs != stream.test.dim:
        raise ConfigurationError(f"network input width {spec.n_inputs} != data width {stream.test.dim}")
    net = Network.initialize(spec, rngs["init"])
    t = len(stream)
    buffer = ReplayBuffer(config.replay.capacity) if isinstance(config.replay, BufferedReplay) else None
    records, masks, checkpoints, slog, sizes = [], [], [], [], []
    errors = []
    for i in range(1, t + 1):
        started = time.perf_counter()
        mb = stream.mega_batches[i - 1]
        data = assemble_training_set(stream, i, config.replay, buffer)
        sizes.append(len(data))
        train_acc = train_megabatch(net, data, config, rngs["shuffle"], megabatch=i)
        checkpoints.append(checkpoint_bytes(net))
        test = evaluate(net, stream.test)
        val_acc = evaluate(net, mb.val).accuracy if len(mb.val) else float("nan")
        errors.append(test.error_count)
        records.append(MetricsRecord(
            megabatch=i,
            test_accuracy=test.accuracy,
            error_count=test.error_count,
            cumulative_cer=sum(errors),
            train_accuracy=train_acc,
            val_accuracy=val_acc,
            generalization_gap=generalization_gap(train_acc, val_acc),
            ece=ece(test.confidences, test.correctness, config.ece_bins),
        ))
        if i < t and strategy_hook:
            modified, mask = apply_strategy(net, config.strategy, mb.train, config, rngs["strategy"], i)
            if mask is not None:
                masks.append(mask)
            slog.append({"megabatch": i, "strategy": config.strategy.tag, "modified": modified})
            log.info("mega-batch %d: %s modified %d entries", i, config.strategy.tag, modified)
        if buffer is not None and i < t:
            buffer = update_buffer(buffer, mb.train, i, rngs["data"])
        records[-1].wall_time_s = time.perf_counter() - started
    return ExperimentResult(records, masks, checkpoints, slog, net, sizes)
