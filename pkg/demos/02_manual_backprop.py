"""
Hand-written backward passes against central differences
========================================================

Every op carries its own backward function. fd_check perturbs coordinates
in float64 and reports the worst relative error.
"""
from uda_forge.gradcheck import kink_margin, objective_grad_error, smooth_instance
from uda_forge.numerics import Rng, conv2d, conv2d_backward, fd_check

# a strided convolution, scalar loss = <y, R>
r = Rng(0)
p = {"x": r.normal(2 * 64).reshape(2, 8, 8), "k": r.normal(4 * 18).reshape(4, 2, 3, 3), "b": r.normal(4)}
R = r.normal(4 * 16).reshape(4, 4, 4)


def loss(q):
    y = conv2d(q["x"], q["k"], q["b"], stride=2)
    dx, dk, db = conv2d_backward(R, q["x"], q["k"], stride=2)
    return float((y * R).sum()), {"x": dx, "k": dk, "b": db}


print(f"conv2d stride 2: max relative error {fd_check(loss, p):.2e}")

# the full student objective: detection, pseudo-label, adversarial (through
# the reversal) and masked reconstruction terms in one backward pass.
# Instances are redrawn until no ReLU input sits within 0.05 of its kink.
params, batch = smooth_instance(seed=3)
print(f"kink margin of the drawn instance: {kink_margin(params, batch):.3f}")
for seed in range(3):
    print(f"full objective, instance {seed}: max relative error {objective_grad_error(seed):.2e}")
