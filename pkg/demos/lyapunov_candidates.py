"""
Choosing a Lyapunov candidate
=============================

Every eigenvalue of ``M = [[-1, 4], [0, -1]]`` equals -1, yet ``|x|`` grows
along ``x' = M x`` from ``x = (1, 1)/sqrt(2)``: ``d/dt |x|^2 = 2 x^T M x = 2``.
The norm is therefore not a Lyapunov function, while the quadratic form from
``M^T P + P M = -I`` is.
"""

import numpy as np

from salab.td import LyapunovCandidate, build_T2_audit, hurwitz_check, lyapunov_matrix

M = np.array([[-1.0, 4.0], [0.0, -1.0]])
print("Hurwitz:", hurwitz_check(M).passed)

# %%
# The norm candidate fails, and the report carries the analytic witness.
rep = build_T2_audit(M, LyapunovCandidate("norm"))
print(rep.status, "-", rep.justification)
print(rep.clauses["iii"].details["analytic_witness"])

# %%
# The quadratic candidate passes every clause.
P = lyapunov_matrix(M)
print("P =\n", P)
print("residual", np.abs(M.T @ P + P @ M + np.eye(2)).max())
rep = build_T2_audit(M, LyapunovCandidate("quadratic", P=P))
print(rep.status, {k: c.status for k, c in rep.clauses.items()})
