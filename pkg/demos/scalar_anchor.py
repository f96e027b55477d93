"""Single-node transport problem with a closed-form answer.

With one quadrature node at omega = 1/2, c = 1/2 and symmetric scattering,
the matrix equation collapses to the scalar quadratic x^2 - 6x + 1 = 0 whose
smaller root is 3 - 2*sqrt(2).  Every solver in the package should land on
it, so this is the first thing to run after an install.  The default
residual tolerance of 1e-12 leaves ~1e-13 in the root (the residual slope
is 2x - 6); tightening it buys one more doubling step and two more digits.
"""

import numpy as np

from transport_nare.dense_sda import dense_sda_solve
from transport_nare.modified_sda_ls import msda_solve
from transport_nare.sda_ls import SolverConfig, sda_ls_solve
from transport_nare.transport_problem import assemble_dense, make_instance

inst = make_instance(1, 0.5, 0.0)
print("instance: n=1, c=0.5, alpha=0.0")
print("node %.3f  weight %.3f" % (inst.quad.omega[0], inst.quad.weights[0]))

A, B, C, E = assemble_dense(inst)
print("assembled scalars: A=%g B=%g C=%g E=%g" % (A[0, 0], B[0, 0], C[0, 0], E[0, 0]))

# evaluate the root as 1/(3 + 2*sqrt(2)): same number, but no cancellation
exact = 1.0 / (3.0 + 2.0 * np.sqrt(2.0))
print("closed form: x = 3 - 2*sqrt(2) =", repr(exact))
print()

Xd, Yd, rep = dense_sda_solve(inst)
print("dense doubling     x=%.17f  err=%.2e  iters=%d"
      % (Xd[0, 0], abs(Xd[0, 0] - exact), rep.iterations))

Hl, rep = sda_ls_solve(inst)
print("low-rank doubling  x=%.17f  err=%.2e  iters=%d"
      % (Hl.entry(0, 0), abs(Hl.entry(0, 0) - exact), rep.iterations))

Xm, rep = msda_solve(inst)
print("balanced variant   x=%.17f  err=%.2e  iters=%d"
      % (Xm.entry(0, 0), abs(Xm.entry(0, 0) - exact), rep.iterations))

tight = SolverConfig(tol_residual=1e-14)
Hl, rep = sda_ls_solve(inst, config=tight)
print("tol 1e-14          x=%.17f  err=%.2e  iters=%d"
      % (Hl.entry(0, 0), abs(Hl.entry(0, 0) - exact), rep.iterations))

print()
print("the dual solution Y solves the transposed equation; here it equals X:")
print("dense Y =", repr(Yd[0, 0]))
