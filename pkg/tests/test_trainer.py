import numpy as np
import pytest

from lure.datastream import Dataset, FullReplay, NoReplay, make_stream, synth_blobs
from lure.engine import Network, NetworkSpec, OptimizerConfig, loss_ce, lr_at, sgd_step
from lure.errors import ConfigurationError, DivergenceError
from lure.reinit import ColdStart, Lure, WarmStart
from lure.trainer import (
    SEED_STREAMS,
    TrainConfig,
    evaluate,
    run_alma,
    seed_streams,
    train_megabatch,
)

OPT = OptimizerConfig(learning_rate=0.05, momentum=0.9, weight_decay=1e-4, lr_steps=(2,), lr_gamma=0.1)


def blob_stream(t=3, per_class=40, seed=0):
    rng = np.random.default_rng(seed)
    source = synth_blobs(3, per_class, 4, 4.0, rng)
    test = synth_blobs(3, 20, 4, 4.0, rng)
    return make_stream(source, t, 0.1, test, rng)


def config(**kw):
    base = dict(epochs=3, batch_size=16, optimizer=OPT, strategy=WarmStart(), replay=FullReplay())
    base.update(kw)
    return TrainConfig(**base)


SPEC = NetworkSpec((4, 8, 3))


def test_seed_streams_are_distinct_and_stable():
    a, b = seed_streams(3), seed_streams(3)
    assert list(a) == list(SEED_STREAMS)
    draws = {name: a[name].random() for name in a}
    assert draws == {name: b[name].random() for name in b}
    assert len(set(draws.values())) == len(draws)
    assert np.random.default_rng([3, 1]).random() == draws["init"]


def test_single_megabatch_never_applies_strategy():
    stream = blob_stream(t=1)
    result = run_alma(stream, SPEC, config(strategy=Lure()), seed_streams(0))
    assert len(result.records) == 1 and result.strategy_log == [] and result.masks == []


def _manual_warm(stream, cfg, rngs):
    """Reference loop: plain SGD over each cumulative training set, no strategy."""
    net = Network.initialize(SPEC, rngs["init"])
    opt = cfg.optimizer
    for i in range(1, len(stream) + 1):
        data = Dataset.concat([mb.train for mb in stream.mega_batches[:i]])
        for e in net.entries:
            e.momentum[...] = 0.0
        for epoch in range(cfg.epochs):
            order = rngs["shuffle"].permutation(len(data))
            for start in range(0, len(data), cfg.batch_size):
                rows = order[start:start + cfg.batch_size]
                _, d = loss_ce(net.forward(data.inputs[rows]), data.labels[rows])
                net.backward(data.inputs[rows], d)
                sgd_step(net, opt, lr_at(opt, epoch))
    return net


def test_warm_run_matches_reference_loop():
    stream = blob_stream(t=2)
    cfg = config()
    result = run_alma(stream, SPEC, cfg, seed_streams(1))
    ref = _manual_warm(stream, cfg, seed_streams(1))
    assert result.network.same_parameters(ref)


def test_strategy_applied_t_minus_one_times():
    stream = blob_stream(t=8, per_class=60)
    result = run_alma(stream, SPEC, config(epochs=1, strategy=Lure(k=0.8)), seed_streams(0))
    assert len(result.strategy_log) == 7 and len(result.masks) == 7
    assert [r["megabatch"] for r in result.strategy_log] == list(range(1, 8))
    m = SPEC.layer_dims
    n_params = m[0] * m[1] + m[1] + m[1] * m[2] + m[2]
    assert all(mask.retained_count == int(0.8 * n_params) for mask in result.masks)


def test_step_count():
    # ceil(n / B) steps per epoch, partial batch included.
    calls = []
    data = Dataset(np.random.default_rng(0).normal(size=(50, 4)), np.arange(50) % 3, 3)
    net = Network.initialize(SPEC, np.random.default_rng(0))
    orig = net.backward

    def counting(x, d):
        calls.append(len(x))
        return orig(x, d)

    net.backward = counting
    train_megabatch(net, data, config(epochs=2), np.random.default_rng(0))
    assert len(calls) == 2 * 4 and calls[:4] == [16, 16, 16, 2]


def test_learns_separable_data():
    rng = np.random.default_rng(0)
    data = synth_blobs(3, 100, 4, 8.0, rng)
    net = Network.initialize(SPEC, rng)
    train_megabatch(net, data, config(epochs=10), rng)
    assert evaluate(net, data).accuracy > 0.98


def test_run_is_deterministic():
    stream = blob_stream()
    a = run_alma(stream, SPEC, config(strategy=Lure()), seed_streams(4))
    b = run_alma(stream, SPEC, config(strategy=Lure()), seed_streams(4))
    assert a.checkpoints == b.checkpoints
    assert [m.bits.tolist() for m in a.masks] == [m.bits.tolist() for m in b.masks]


def test_strategy_seed_does_not_touch_training_order():
    # Replacing the strategy stream leaves the first mega-batch's training intact.
    stream = blob_stream()
    base = seed_streams(4)
    other = seed_streams(4)
    other["strategy"] = np.random.default_rng(123)
    a = run_alma(stream, SPEC, config(strategy=ColdStart()), base)
    b = run_alma(stream, SPEC, config(strategy=ColdStart()), other)
    assert a.checkpoints[0] == b.checkpoints[0]
    assert a.checkpoints[1] != b.checkpoints[1]


def test_hook_disabled_equals_warm():
    stream = blob_stream()
    a = run_alma(stream, SPEC, config(strategy=ColdStart()), seed_streams(2), strategy_hook=False)
    b = run_alma(stream, SPEC, config(strategy=WarmStart()), seed_streams(2))
    assert a.checkpoints == b.checkpoints


def test_records_and_cer():
    stream = blob_stream()
    result = run_alma(stream, SPEC, config(replay=NoReplay()), seed_streams(0))
    errs = [r.error_count for r in result.records]
    assert [r.cumulative_cer for r in result.records] == list(np.cumsum(errs))
    for r in result.records:
        assert r.test_accuracy == 1 - r.error_count / len(stream.test)
        assert r.generalization_gap == r.train_accuracy - r.val_accuracy
        assert 0 <= r.ece <= 1
    assert result.train_sizes == [len(mb.train) for mb in stream.mega_batches]


def test_evaluate_ties_go_to_lowest_class():
    net = Network.zeros(NetworkSpec((2, 3)))
    data = Dataset(np.ones((4, 2)), [0, 1, 2, 0], 3)
    ev = evaluate(net, data)
    assert ev.error_count == 2 and ev.accuracy == 0.5
    np.testing.assert_allclose(ev.confidences, 1 / 3)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_location():
    data = Dataset(np.full((8, 4), 1e200), np.zeros(8, dtype=int), 3)
    net = Network.initialize(SPEC, np.random.default_rng(0))
    cfg = config(optimizer=OptimizerConfig(learning_rate=1e10, lr_steps=()))
    with pytest.raises(DivergenceError, match=r"mega-batch 5, epoch \d+, step \d+"):
        train_megabatch(net, data, cfg, np.random.default_rng(0), megabatch=5)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(subset_fraction=None, subset_count=None)
    with pytest.raises(ConfigurationError):
        run_alma(blob_stream(), NetworkSpec((5, 3)), config(), seed_streams(0))


def test_augment_hook():
    stream = blob_stream()
    seen = []

    def identity(x, rng):
        seen.append(x.shape)
        return x

    a = run_alma(stream, SPEC, config(augment=identity), seed_streams(0))
    b = run_alma(stream, SPEC, config(), seed_streams(0))
    assert a.checkpoints == b.checkpoints and seen

    def zero(x, rng):
        return np.zeros_like(x)

    c = run_alma(stream, SPEC, config(augment=zero), seed_streams(0))
    assert c.checkpoints != b.checkpoints
