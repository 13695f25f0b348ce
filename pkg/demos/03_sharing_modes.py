#!/usr/bin/env python3
"""The three parameter-sharing modes and what they cost.

Fixed mode learns one transform per (input, output) pair. Dropping the
input index shares weights across inputs (any number of capsules can
arrive); dropping both indexes shares one transform across all pairs,
with symmetry broken by a caller-supplied per-output bias. Output values
are identical in expectation; parameter counts are not.
"""

import numpy as np

from capsem import (CapsuleBatch, RoutingConfig, init_params, param_count,
                    route)

dims = dict(d_cov=4, d_in=4, d_out=4)
n_in, n_out = 24, 8

fixed = RoutingConfig(n_out=n_out, n_in=n_in, **dims)
var_in = RoutingConfig(n_out=n_out, **dims)
var_out = RoutingConfig(n_out="variable", **dims)

print(f"{'mode':<16} {'weights':>8} {'biases':>8} {'betas':>6} {'total':>8}")
for name, cfg in [("fixed", fixed), ("variable_input", var_in),
                  ("variable_output", var_out)]:
    c = param_count(cfg)
    print(f"{name:<16} {c.weights:>8} {c.biases:>8} {c.betas:>6} {c.total:>8}")

cf, cvi, cvo = param_count(fixed), param_count(var_in), param_count(var_out)
print(f"\nsharing over inputs divides everything by n_in: "
      f"{cf.total} / {cvi.total} = {cf.total / cvi.total:g}")
print(f"sharing over both divides the weights by n_in*n_out: "
      f"{cf.weights} / {cvo.weights} = {cf.weights / cvo.weights:g}")

# Variable-input mode accepts any number of capsules with one parameter set
rng = np.random.default_rng(1)
params = init_params(var_in, seed=7)
params.beta_use += 0.3  # freshly initialized betas are zero; give scores life
for n in (5, 24, 100):
    caps = CapsuleBatch(rng.uniform(-2, 2, size=(1, n)),
                        rng.normal(size=(1, n, 4, 4)))
    out = route(params, caps, var_in)
    print(f"variable-input layer on {n:>3} capsules -> "
          f"{out.scores.data.shape[1]} outputs, "
          f"first score {out.scores.data[0, 0]:+.3f}")

# Variable-output mode: the caller picks n_out per call via the bias
params_vo = init_params(var_out, seed=7)
caps = CapsuleBatch(rng.uniform(-2, 2, size=(1, 10)),
                    rng.normal(size=(1, 10, 4, 4)))
for n_out_call in (3, 6):
    bias = rng.normal(0, 0.5, size=(n_out_call, 4, 4))
    out = route(params_vo, caps, var_out, out_bias=bias)
    print(f"variable-output layer with a {n_out_call}-way bias -> "
          f"{out.scores.data.shape[1]} outputs")

# Padding: a capsule gated off with score -30 is indistinguishable from
# an absent capsule, which is how shorter samples join a batch
from capsem import LOGIT_MAX
scores = rng.uniform(-2, 2, size=(1, 6))
poses = rng.normal(size=(1, 6, 4, 4))
padded = CapsuleBatch(np.concatenate([scores, [[-LOGIT_MAX]]], axis=1),
                      np.concatenate([poses, np.zeros((1, 1, 4, 4))], axis=1))
out_a = route(params, CapsuleBatch(scores, poses), var_in)
out_b = route(params, padded, var_in)
delta = np.abs(out_a.scores.data - out_b.scores.data).max()
print(f"\npadding with score -{LOGIT_MAX:g} changes outputs by {delta:.2e}")
