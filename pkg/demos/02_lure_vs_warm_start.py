"""
Selective forgetting versus plain warm starting
===============================================

Data arrives in four mega-batches.  After each one, a warm-started model
simply keeps training, while LURE keeps the 80% most sensitive weights and
redraws the rest before training on the grown dataset.
"""

import numpy as np

from lure import (
    Lure,
    NetworkSpec,
    OptimizerConfig,
    TrainConfig,
    WarmStart,
    corrupt_labels,
    make_stream,
    run_alma,
    seed_streams,
    synth_blobs,
)


def stream_for(seed):
    rngs = seed_streams(seed)
    source = synth_blobs(10, 300, 20, 5.0, rngs["data"])
    test = synth_blobs(10, 200, 20, 5.0, rngs["data"])
    # a tenth of the training labels are wrong
    source = corrupt_labels(source, 0.1, rngs["data"])
    return make_stream(source, 4, 0.1, test, rngs["data"]), rngs


spec = NetworkSpec((20, 64, 32, 10))
optimizer = OptimizerConfig(learning_rate=0.05, lr_steps=(8, 16))

for name, strategy in [("warm start", WarmStart()), ("LURE k=0.8", Lure(k=0.8))]:
    accs, cers = [], []
    for seed in range(5):
        stream, rngs = stream_for(seed)
        config = TrainConfig(epochs=20, optimizer=optimizer, strategy=strategy)
        result = run_alma(stream, spec, config, rngs)
        accs.append(result.records[-1].test_accuracy)
        cers.append(result.records[-1].cumulative_cer)
    print(f"{name:<12} final accuracy {100 * np.mean(accs):.2f}%  cumulative errors {np.mean(cers):.1f}")

# The test set holds 2000 samples, so the cumulative error count after four
# mega-batches is at most 8000.
