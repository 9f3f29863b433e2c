"""
Which connections survive from one mega-batch to the next
=========================================================

Each LURE step produces a retention mask.  Comparing consecutive masks
layer by layer shows where the retained set is stable.
"""

from lure import Lure, NetworkSpec, OptimizerConfig, TrainConfig, make_stream, run_alma, seed_streams, synth_blobs
from lure.metrics import mask_overlap

rngs = seed_streams(1)
source = synth_blobs(10, 300, 20, 5.0, rngs["data"])
test = synth_blobs(10, 200, 20, 5.0, rngs["data"])
stream = make_stream(source, 6, 0.1, test, rngs["data"])
config = TrainConfig(epochs=10, optimizer=OptimizerConfig(0.05, lr_steps=(5,)), strategy=Lure(k=0.8))
result = run_alma(stream, NetworkSpec((20, 64, 32, 10)), config, rngs)

ranges = result.network.layer_ranges()
for prev, curr in zip(result.masks, result.masks[1:]):
    report = mask_overlap(prev, curr, ranges, pair=(prev.megabatch, curr.megabatch))
    cells = "  ".join(f"layer {layer}: {pct:5.1f}%" for layer, pct in report.percent.items())
    print(f"masks {report.pair[0]} -> {report.pair[1]}   {cells}")

# The overlap is measured against the earlier mask's retained set, so
# swapping the two masks generally gives a different number.
