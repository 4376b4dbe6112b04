"""
TD recursion with a Hurwitz matrix
==================================

A two-dimensional recursion ``x <- x + a(n) (M x + b(y) + noise)`` driven by a
three-state Markov chain. The averaged field ``M x + b_bar`` has a unique
zero, and the iterates settle there. The rescaled view confirms the picture:
the gap between the rescaled iterates and the limiting ODE shrinks along the
segment grid.
"""

import numpy as np

from salab import MarkovModel, StationaryPolicy
from salab.engine import NoiseModel, StepSchedule, run_sa_batch
from salab.rescaling import build_segments, difftozero_gap, rescaled_view
from salab.td import AffineFamily, check_S1_affine, hurwitz_check, td_equilibrium

# %%
# The driver: constant ``M``, one offset ``b(y)`` per chain state.
M = np.diag([-1.0, -2.0])
fam = AffineFamily.constant(M, [[1.0, 0.0], [0.0, 2.0], [2.0, 2.0]])
chain = MarkovModel.uncontrolled([[0.5, 0.3, 0.2], [0.2, 0.6, 0.2], [0.3, 0.3, 0.4]])
print(hurwitz_check(M).details["spectral_abscissa"])   # -1.0
print(check_S1_affine(fam).status)                       # pass

x_star = td_equilibrium(M, chain, fam)
print("equilibrium", x_star)

# %%
# Twenty seeds of the recursion with harmonic steps and Gaussian noise.
trajs = run_sa_batch(fam.field(), chain, StationaryPolicy.uniform(3, 1), StepSchedule(),
                     NoiseModel("gaussian", 0.1), x0=[5.0, -5.0], N=50_000, seeds=range(20))
for N in (500, 5_000, 50_000):
    err = np.median([np.linalg.norm(t.xs[N] - x_star) for t in trajs])
    print(f"N={N:6d}  median |x_N - x*| = {err:.4f}")

# %%
# Rescaled view of one seed: segments of ODE time 0.5, iterates divided by
# ``r(n) = max(1, |x(T_n)|)`` at each segment start.
view = rescaled_view(trajs[0], build_segments(trajs[0], 0.5))
gaps = [difftozero_gap(view, fam.field(), n) for n in range(view.segments.complete)]
print("segments", view.segments.complete)
print("gap on first / last five segments:", np.round(gaps[:5], 4), np.round(gaps[-5:], 5))
