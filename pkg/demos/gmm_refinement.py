"""
Snapping noisy actions to demonstrated poses
============================================

Fit a six-component mixture to the joint labels of a synthetic
demonstration set, then refine noisy predictions with both modes.
"""

import numpy as np

from rgmp.gmm import em_fit, refine
from rgmp.harness import SceneSpec, generate_dataset

train = generate_dataset(40, SceneSpec(seed=0))
theta, trace = em_fit(train.labels, k=6, seed=0)
print(f"EM stopped after {len(trace)} iterations, mean log-likelihood {trace[-1]:.2f}")

rng = np.random.default_rng(1)
label = train.labels[0]
noisy = label + rng.normal(scale=0.03, size=6)
print("label    ", np.round(label, 3))
print("noisy    ", np.round(noisy, 3))
print("nearest  ", np.round(refine(noisy, theta, "nearest"), 3))
print("aggregate", np.round(refine(noisy, theta, "aggregate"), 3))
