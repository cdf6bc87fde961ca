"""Positive and negative implicit targets.

Given the current logits and a reference, the log-space deviation delta is
pushed further (pi_plus) or reversed (pi_minus).  The loss pulls the policy
toward pi_plus in proportion to the reward and toward pi_minus in proportion
to its complement, so no likelihood of the full sequence is ever needed.
"""

import numpy as np

from lfpo.objective import Mode, deviation, implicit_targets, lfpo_logit_gradient, lfpo_position_loss
from lfpo.simplex import softmax

rng = np.random.default_rng(1)
z_ref = rng.normal(size=5)
z_theta = z_ref + np.array([0.8, 0.0, -0.5, 0.2, 0.0])

print("deviation    ", np.round(deviation(z_theta, z_ref), 3))
print("pi_ref       ", np.round(softmax(z_ref), 3))
print("pi_theta     ", np.round(softmax(z_theta), 3))
for beta in (0.5, 1.0, 2.0):
    plus, minus = implicit_targets(z_theta, z_ref, beta)
    print(f"beta={beta:<4} pi+ {np.round(plus, 3)}  pi- {np.round(minus, 3)}")

# at beta = 1 the positive target is the policy itself
plus, minus = implicit_targets(z_theta, z_ref, 1.0)
print("beta=1: max |pi+ - pi_theta| =", np.abs(plus - softmax(z_theta)).max())

# the reference is the normalized geometric mean of the two targets
g = np.sqrt(plus * minus)
print("geometric mean vs pi_ref:", np.abs(g / g.sum() - softmax(z_ref)).max())

print("\nloss by reward (beta=2):")
for r in (0.0, 0.5, 1.0):
    losses = {m.value: round(lfpo_position_loss(z_theta, z_ref, 2.0, r, m), 4) for m in Mode}
    print(f"  r={r}: {losses}")

print("\ndetached gradient at zero deviation:",
      lfpo_logit_gradient(z_ref, z_ref, 2.0, 0.7, detach_targets=True))
