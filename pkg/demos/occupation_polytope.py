"""
Controlled noise and the occupation polytope
============================================

When the chain is controlled, the averaged field is a set: one point for each
stationary policy's occupation measure. Its extreme points come from the
deterministic policies, ``nU ** nS`` of them.
"""

import numpy as np

from salab import MarkovModel, StationaryPolicy, VectorField
from salab.markov import hat_h_eval, invariant_measure, occupation_measure, occupation_vertices

K = np.zeros((2, 2, 2))
K[:, 0] = [[0.9, 0.1], [0.2, 0.8]]     # control 0
K[:, 1] = [[0.5, 0.5], [0.6, 0.4]]     # control 1
model = MarkovModel(K)

print("invariant measure under control 0:", invariant_measure(K[:, 0]))

# %%
# Four deterministic policies, four vertices.
for nu in occupation_vertices(model):
    print(np.round(nu.weights, 4))

# %%
# A randomised policy lands inside the hull of the vertices.
mixed = occupation_measure(model, StationaryPolicy(np.array([[0.3, 0.7], [0.5, 0.5]])))
print("mixed policy marginal:", np.round(mixed.marginal, 4))

# %%
# The averaged driver at a point is the hull of the vertex averages.
field = VectorField.affine([-np.eye(1), -2 * np.eye(1)], [[1.0], [-1.0]])
print(hat_h_eval(field, model, [0.5]).generators.ravel())
