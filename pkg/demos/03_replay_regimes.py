"""
How much of the past to replay
==============================

Full replay trains on everything seen so far.  A buffered learner keeps a
class-balanced reservoir of 186 old samples.  With no replay, only the
newest mega-batch is used.
"""

from lure import (
    BufferedReplay,
    FullReplay,
    Lure,
    NetworkSpec,
    NoReplay,
    OptimizerConfig,
    TrainConfig,
    make_stream,
    run_alma,
    seed_streams,
    synth_blobs,
)

for replay in (FullReplay(), BufferedReplay(186), NoReplay()):
    rngs = seed_streams(0)
    source = synth_blobs(10, 300, 20, 5.0, rngs["data"])
    test = synth_blobs(10, 200, 20, 5.0, rngs["data"])
    stream = make_stream(source, 4, 0.1, test, rngs["data"])
    config = TrainConfig(epochs=10, optimizer=OptimizerConfig(0.05, lr_steps=(5,)),
                         strategy=Lure(), replay=replay)
    result = run_alma(stream, NetworkSpec((20, 64, 10)), config, rngs)
    print(f"{replay.tag:<9} training-set sizes {result.train_sizes}")
    for r in result.records:
        print(f"    mega-batch {r.megabatch}: accuracy {100 * r.test_accuracy:5.1f}%  CER {r.cumulative_cer}")
