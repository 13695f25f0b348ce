#!/usr/bin/env python3
"""Capsule files on disk, and the scalar reference implementation.

Round-trips a batch through the binary container and its JSON twin,
peeks at the header bytes, stores layer parameters, and then checks the
vectorized routing loop against the plain-Python scalar-loop reference
on a small instance.
"""

import json

import numpy as np

from capsem import CapsuleBatch, RoutingConfig, init_params, route
from capsem import route_reference
from capsem.data import (read_capsules, read_params, write_capsules,
                         write_params)

rng = np.random.default_rng(0)

# --- the binary container --------------------------------------------------
batch = CapsuleBatch(rng.uniform(-3, 3, size=(2, 5)),
                     rng.normal(size=(2, 5, 3, 3)))
labels = np.array([1, 4])
write_capsules("demo_batch.caps", batch, labels)

blob = open("demo_batch.caps", "rb").read()
print(f"binary container: {len(blob)} bytes; header "
      + " ".join(f"{b:02x}" for b in blob[:8])
      + '  (magic "CAPS", version, kind, dtype)')

back, back_labels = read_capsules("demo_batch.caps")
print("bit-identical after the round trip:",
      np.array_equal(np.asarray(back.scores), np.asarray(batch.scores))
      and np.array_equal(np.asarray(back.poses), np.asarray(batch.poses))
      and np.array_equal(back_labels, labels))

# --- the JSON twin, for files meant to be read by people -------------------
write_capsules("demo_batch.json", batch, labels)
doc = json.load(open("demo_batch.json"))
print(f"JSON twin keys: {sorted(doc)}")

# --- layer parameters travel in the same container -------------------------
cfg = RoutingConfig(n_out=3, n_in=4, d_cov=2, d_in=3, d_out=2, n_iters=3)
params = init_params(cfg, seed=5)
write_params("demo_layer.caps", params, cfg)
params_back, cfg_back = read_params("demo_layer.caps")
print("layer round trip preserves config and weights:",
      cfg_back == cfg
      and np.array_equal(params_back.weights, params.weights))

# --- the scalar-loop reference is the numerical ground truth ---------------
params.weights += rng.normal(0, 0.4, size=params.weights.shape)
params.biases += rng.normal(0, 0.4, size=params.biases.shape)
params.beta_use += rng.normal(0, 0.4, size=params.beta_use.shape)
params.beta_ign += rng.normal(0, 0.4, size=params.beta_ign.shape)
caps = CapsuleBatch(rng.uniform(-2, 2, size=(1, 4)),
                    rng.normal(size=(1, 4, 2, 3)))

fast = route(params, caps, cfg)
slow = route_reference(params, caps, cfg)
gap = max(np.abs(fast.scores.data - slow.scores.data).max(),
          np.abs(fast.poses.data - slow.poses.data).max(),
          np.abs(fast.variances.data - slow.variances.data).max())
print(f"vectorized loop vs scalar reference: max |difference| = {gap:.2e}")
