"""
Detecting instability
=====================

With ``h(x) = x + 1`` the origin repels. The recursion with steps ``4/(n+1)``
overflows, the contraction ratios of the rescaled iterates stay above one, the
scale factors ``r(n)`` are unbounded, and the attractor check on the unit ball
fails. (With steps ``1/(n+1)`` the iterates satisfy ``x_n + 1 = (x_0 + 1)(n + 1)``:
they grow without bound but stay finite for any practical horizon.)
"""

import numpy as np

from salab import MarkovModel, StationaryPolicy, VectorField
from salab.di import LinearHullMap, verify_S2
from salab.engine import NoiseModel, StepSchedule, run_sa
from salab.rescaling import build_segments, rescaled_view, stability_ratio_audit

field = VectorField.affine([[[1.0]]], [[1.0]])
one = MarkovModel.uncontrolled([[1.0]])
pol = StationaryPolicy.uniform(1, 1)

# %%
# Harmonic steps: linear growth, no overflow.
tr = run_sa(field, one, pol, StepSchedule(), NoiseModel(), x0=[0.0], N=1000)
print(tr.xs[[10, 100, 1000], 0])      # 10, 100, 1000

# %%
# Four times larger steps: the divergence detector fires.
tr = run_sa(field, one, pol, StepSchedule("harmonic", 4.0), NoiseModel(), x0=[1.0], N=100_000)
print("diverged at step", tr.diverged_at, "after", tr.N, "steps")

rep = stability_ratio_audit(rescaled_view(tr, build_segments(tr, 1.0)), burn_in=2)
print(rep.status, {k: rep.details[k] for k in ("fraction_ratio_ge_1", "r_bounded")})

# %%
# No bounded attractor: flows from the unit ball leave every neighbourhood of 0.
s2 = verify_S2(LinearHullMap([[[1.0]]]), [[0.0]], 1e-2, horizon=10.0)
print("S2", s2.status, s2.witness)
