"""
Probing a trained model
=======================

Calibration, adversarial inputs, noisy weights and corrupted inputs all
look at the same network from different angles.
"""

import numpy as np

from lure import NetworkSpec, OptimizerConfig, TrainConfig, make_stream, run_alma, seed_streams, synth_blobs
from lure.metrics import (
    adversarial_accuracy,
    corruption_accuracies,
    ece,
    mean_corruption_accuracy,
    perturbation_curve,
    predict,
)

rngs = seed_streams(3)
source = synth_blobs(10, 300, 20, 5.0, rngs["data"])
test = synth_blobs(10, 200, 20, 5.0, rngs["data"])
stream = make_stream(source, 4, 0.1, test, rngs["data"])
config = TrainConfig(epochs=10, optimizer=OptimizerConfig(0.05, lr_steps=(5,)))
net = run_alma(stream, NetworkSpec((20, 64, 10)), config, rngs).network

preds, confs = predict(net, test.inputs)
print(f"clean accuracy {100 * np.mean(preds == test.labels):.2f}%")
print(f"ECE (15 bins)  {ece(confs, preds == test.labels):.4f}")

# Ten-step PGD inside an L-infinity ball of growing radius.
probe = rngs["probe"]
for eps in (0.01, 0.03, 0.1, 0.3):
    print(f"PGD eps={eps:<5} accuracy {100 * adversarial_accuracy(net, test, eps, probe):.2f}%")

# A flat minimum tolerates Gaussian noise on every weight.
for row in perturbation_curve(net, test, [0.0, 0.01, 0.05, 0.1], probe, repeats=3):
    print(f"weight noise sigma={row['sigma']:<5} accuracy {100 * row['accuracy_mean']:.2f}%")

rows = corruption_accuracies(net, test, ["gaussian_noise", "uniform_noise", "feature_dropout"],
                             [1, 2, 3, 4, 5], probe)
print(f"mean corruption accuracy {100 * mean_corruption_accuracy(rows):.2f}%")
