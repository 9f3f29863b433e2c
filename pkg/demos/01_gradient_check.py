"""
Checking the backward pass by finite differences
================================================

The network computes its gradients by hand, so it is worth seeing them
agree with a numerical derivative before trusting anything else.
"""

import numpy as np

from lure import Network, NetworkSpec, loss_ce

rng = np.random.default_rng(0)
net = Network.initialize(NetworkSpec((4, 8, 3)), rng)
x = rng.normal(size=(5, 4))
y = rng.integers(0, 3, 5)

# One forward and one backward pass give the analytic gradient.
_, dlogits = loss_ce(net.forward(x), y)
net.backward(x, dlogits)
analytic = net.flat_grads()

# Nudge each parameter up and down and watch the loss move.
theta = net.flat_values()
numeric = np.empty_like(theta)
h = 1e-6
for j in range(theta.size):
    up, down = theta.copy(), theta.copy()
    up[j] += h
    down[j] -= h
    net.set_flat_values(up)
    loss_up = loss_ce(net.forward(x), y)[0]
    net.set_flat_values(down)
    loss_down = loss_ce(net.forward(x), y)[0]
    numeric[j] = (loss_up - loss_down) / (2 * h)
net.set_flat_values(theta)

print(f"{theta.size} parameters")
print(f"largest absolute disagreement: {np.abs(analytic - numeric).max():.2e}")
