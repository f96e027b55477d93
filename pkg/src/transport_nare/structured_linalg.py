"""Structured O(n) kernels shared by all solvers.

Everything here exploits the same shape: coefficient matrices that are diagonal
plus a rank-one outer product.  Shifted inverses then collapse to Sherman-Morrison
corrections over diagonal solves, the doubling base operators become fused
"diagonal times block plus rank-one correction" applications, and residuals of
low-rank iterates can be evaluated without ever forming an n-by-n matrix.

The flop counters follow the kernels defined here so that the two large-scale
solvers can be compared on counted work rather than wall time.
"""

import csv

import numpy as np
import scipy.linalg as sla

__all__ = [
    "NearCriticalError",
    "RankOverflowError",
    "LowRankBilinear",
    "ShiftedSolver",
    "BaseOperators",
    "ImplicitIterate",
    "FlopModel",
    "gamma_select",
    "make_base_operators",
    "truncated_svd",
    "orthonormalize_against",
    "residual_norm",
]

#: relative threshold below which a pivot in the block-QR remainder is treated
#: as numerically null and the corresponding direction is discarded.
QR_NULL_REL = 1e-14

#: |1 - v^T D^-1 u| below this means the Sherman-Morrison denominator vanished,
#: which for transport instances happens only toward the critical parameter pair.
SMW_DENOM_TOL = 1e-14


class NearCriticalError(RuntimeError):
    """A structured solve hit a (near-)singular Sherman-Morrison denominator."""


class RankOverflowError(RuntimeError):
    """Truncated factor rank exceeded the configured cap."""


# ---------------------------------------------------------------------------
# low-rank container
# ---------------------------------------------------------------------------

class LowRankBilinear:
    """Triple factorization ``left @ diag(core) @ right.T``.

    Solver iterates keep ``left`` and ``right`` column-orthonormal with a
    nonnegative, nonincreasing ``core``.  The back-transformed solution reuses
    the container with row-scaled (hence no longer orthonormal) factors, so
    orthonormality checking is a method rather than a constructor hard error.
    """

    def __init__(self, left, core, right):
        left = np.asarray(left, dtype=float)
        right = np.asarray(right, dtype=float)
        core = np.asarray(core, dtype=float).ravel()
        if left.ndim != 2 or right.ndim != 2:
            raise ValueError("factors must be 2-d")
        if left.shape[1] != core.size or right.shape[1] != core.size:
            raise ValueError("factor widths and core length disagree")
        if left.shape[0] != right.shape[0]:
            raise ValueError("factor row dimensions disagree")
        self.left = left
        self.core = core
        self.right = right

    @property
    def n(self):
        return self.left.shape[0]

    @property
    def rank(self):
        return self.core.size

    def dense(self):
        return self.left @ (self.core[:, None] * self.right.T)

    def entry(self, i, j):
        """Single entry without forming the dense matrix."""
        return float(self.left[i] @ (self.core * self.right[j]))

    def min_entry(self):
        """Exact elementwise minimum, formed blockwise to stay O(n * rank) in memory."""
        n = self.n
        best = np.inf
        step = max(1, 2 ** 22 // max(1, n))
        scaled = self.core[:, None] * self.right.T
        for lo in range(0, n, step):
            block = self.left[lo:lo + step] @ scaled
            best = min(best, float(block.min()))
        return best

    def frobenius(self):
        """||X||_F from the small Gram matrices of the factors."""
        g = (self.left.T @ self.left) * self.core[:, None]
        h = (self.right.T @ self.right) * self.core[None, :]
        val = float(np.sum(g * h.T))
        return np.sqrt(max(val, 0.0))

    def orthonormality_defect(self):
        r = self.rank
        if r == 0:
            return 0.0
        rl = self.left.T @ self.left - np.eye(r)
        rr = self.right.T @ self.right - np.eye(r)
        return max(np.abs(rl).max(initial=0.0), np.abs(rr).max(initial=0.0))

    def validate(self, tol=1e-12):
        """Check the solver-iterate invariants (orthonormal factors, sorted core)."""
        if self.orthonormality_defect() > tol:
            raise ValueError("factor blocks are not column-orthonormal")
        if np.any(self.core < -tol):
            raise ValueError("core entries must be nonnegative")
        if np.any(np.diff(self.core) > tol):
            raise ValueError("core entries must be nonincreasing")
        return self


# ---------------------------------------------------------------------------
# flop accounting
# ---------------------------------------------------------------------------

# Counting conventions (multiply+add = 2 flops):
#   gemm (p,q)@(q,r)           2*p*q*r
#   diagonal scale of (p,q)    p*q
#   fused base apply, n x m    5*n*m   (diagonal scale + rank-one correction)
# Small dense factorizations use the usual leading-order constants
# (QR of (n,m): 2*n*m^2, SVD of (m,m): 12*m^3).  The constants only matter
# relative to each other: the acceptance comparison is a ratio of totals
# accumulated with identical formulas in both solvers.

class FlopModel:
    """Per-iteration, per-kernel counted work for one solve.

    Counters are keyed by (iteration, kernel label).  ``event`` tracks discrete
    happenings (block applications of the implicit operators, base-operator
    column applications) that acceptance checks assert on exactly.
    """

    def __init__(self):
        self.flops = {}
        self.events = {}
        self.k = 0
        self._base_flops = 0.0
        self._base_cols = 0

    def add(self, label, amount):
        key = (self.k, label)
        self.flops[key] = self.flops.get(key, 0.0) + float(amount)

    def event(self, label, count=1):
        key = (self.k, label)
        self.events[key] = self.events.get(key, 0) + int(count)

    def add_base_apply(self, flops, cols):
        self.add("base_apply", flops)
        self.event("base_apply_cols", cols)
        self._base_flops += flops
        self._base_cols += cols

    @property
    def c_gamma(self):
        """Measured cost of one base-operator application per column."""
        if self._base_cols == 0:
            return 0.0
        return self._base_flops / self._base_cols

    def snapshot(self, k):
        return {label: f for (kk, label), f in sorted(self.flops.items()) if kk == k}

    def iteration_total(self, k, exclude=()):
        return sum(f for (kk, label), f in self.flops.items()
                   if kk == k and label not in exclude)

    def iteration_events(self, k, label):
        return self.events.get((k, label), 0)

    def total(self, exclude=()):
        return sum(f for (_, label), f in self.flops.items() if label not in exclude)

    def iterations(self):
        return sorted({k for (k, _) in self.flops})

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "kernel", "count"])
            for (k, label), f in sorted(self.flops.items()):
                w.writerow([k, label, f"{f:.0f}"])


# ---------------------------------------------------------------------------
# shifted Sherman-Morrison solves
# ---------------------------------------------------------------------------

class _RankOneShifted:
    """Solves with diag(dd) - u v^T via one Sherman-Morrison correction."""

    def __init__(self, dd, u, v):
        self.inv_d = 1.0 / dd
        self.u = u
        self.v = v
        self._du = self.inv_d * u
        self._dv = self.inv_d * v
        self.denom = 1.0 - v @ self._du
        self.denom_t = 1.0 - u @ self._dv
        if min(abs(self.denom), abs(self.denom_t)) < SMW_DENOM_TOL:
            raise NearCriticalError(
                "Sherman-Morrison denominator %.3e is numerically singular; "
                "the instance is at or near the critical parameter pair" % self.denom)

    def solve(self, b):
        y = self.inv_d[:, None] * b
        return y + self._du[:, None] * ((self.v @ y) / self.denom)

    def solve_t(self, b):
        # transpose system: diag(dd) - v u^T
        y = self.inv_d[:, None] * b
        return y + self._dv[:, None] * ((self.u @ y) / self.denom_t)

    def matvec(self, b):
        dd = 1.0 / self.inv_d
        return dd[:, None] * b - np.outer(self.u, self.v @ b)

    def matvec_t(self, b):
        dd = 1.0 / self.inv_d
        return dd[:, None] * b - np.outer(self.v, self.u @ b)


def gamma_select(inst):
    """Doubling shift: the largest diagonal entry over both coefficient matrices.

    For transport instances the two diagonals are delta_i - q_i and d_i - q_i
    (the same values before and after balancing), and d_i >= delta_i, so the max
    is attained on the d side; both are scanned to keep the contract literal.
    """
    q = inst.phi ** 2 if inst.is_balanced else inst.q
    return float(max(np.max(inst.delta - q), np.max(inst.d - q)))


class ShiftedSolver:
    """Shifted inverses for one instance at a fixed doubling shift gamma.

    Provides solves with E+gamma*I, A+gamma*I and the Schur-type combinations
    W = A + gamma*I - B (E+gamma*I)^-1 C   and
    V = E + gamma*I - C (A+gamma*I)^-1 B.
    For the transport structure B (E+gamma*I)^-1 C collapses to a scalar
    multiple of the same rank-one pattern as in A, so W (and V) stay
    diagonal-minus-rank-one and every solve costs O(n) per column.  On the
    balanced form the rank-one vectors are split symmetrically, making the W and
    V solves self-transpose down to the last bit.
    """

    WHICH = ("E", "A", "W", "V")

    def __init__(self, inst, gamma):
        n = inst.n
        self.n = n
        self.gamma = float(gamma)
        self.balanced = inst.is_balanced
        if not self.balanced:
            e = np.ones(n)
            q = inst.q
            self._eg = _RankOneShifted(inst.d + gamma, q, e)
            self._ag = _RankOneShifted(inst.delta + gamma, e, q)
            # B (E+gI)^-1 C = (1+s) e q^T with s = e^T (E+gI)^-1 q
            s = float(e @ self._eg.solve(q[:, None])[:, 0])
            self._w = _RankOneShifted(inst.delta + gamma, (1.0 + s) * e, q)
            t = float(q @ self._ag.solve(e[:, None])[:, 0])
            self._v = _RankOneShifted(inst.d + gamma, (1.0 + t) * q, e)
        else:
            ph = inst.phi
            self._eg = _RankOneShifted(inst.d + gamma, ph, ph)
            self._ag = _RankOneShifted(inst.delta + gamma, ph, ph)
            s = float(ph @ self._eg.solve(ph[:, None])[:, 0])
            t = float(ph @ self._ag.solve(ph[:, None])[:, 0])
            if 1.0 + s < 0 or 1.0 + t < 0:
                raise NearCriticalError("balanced Schur correction lost positivity")
            r = np.sqrt(1.0 + s) * ph
            self._w = _RankOneShifted(inst.delta + gamma, r, r)
            r2 = np.sqrt(1.0 + t) * ph
            self._v = _RankOneShifted(inst.d + gamma, r2, r2)

    def _pick(self, which):
        try:
            return {"E": self._eg, "A": self._ag, "W": self._w, "V": self._v}[which]
        except KeyError:
            raise ValueError("which must be one of %r" % (self.WHICH,)) from None

    def solve(self, which, block, transpose=False, flops=None):
        block = np.atleast_2d(np.asarray(block, dtype=float))
        if block.shape[0] != self.n:
            raise ValueError("block has %d rows, expected %d" % (block.shape[0], self.n))
        op = self._pick(which)
        if flops is not None:
            flops.add("smw_solve", 5 * block.size)
        return op.solve_t(block) if transpose else op.solve(block)

    def apply(self, which, block, transpose=False):
        """Multiply by the shifted operator itself (round-trip checks)."""
        op = self._pick(which)
        block = np.atleast_2d(np.asarray(block, dtype=float))
        return op.matvec_t(block) if transpose else op.matvec(block)

    def roundtrip_error(self, which, probes=10, seed=0):
        """max_j ||Op(solve(Op, x_j)) - x_j|| / ||x_j|| over random probes."""
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((self.n, probes))
        y = self.apply(which, self.solve(which, x))
        return float(np.max(np.linalg.norm(y - x, axis=0) / np.linalg.norm(x, axis=0)))


class BaseOperators:
    """Fused doubling base operators at level zero.

    E0 = I - 2*gamma*V^-1 and F0 = I - 2*gamma*W^-1 are themselves diagonal plus
    rank-one, so each application is one diagonal scale and one rank-one
    correction (about 5n flops per column) instead of a full shifted solve.
    """

    def __init__(self, solver):
        g2 = 2.0 * solver.gamma
        self.n = solver.n
        self._ops = {}
        for name, sm in (("E", solver._v), ("F", solver._w)):
            a = 1.0 - g2 * sm.inv_d
            p = -(g2 / sm.denom) * (sm.inv_d * sm.u)
            w = sm.inv_d * sm.v
            pt = -(g2 / sm.denom_t) * (sm.inv_d * sm.v)
            wt = sm.inv_d * sm.u
            self._ops[name] = (a[:, None], p, w, pt, wt)

    def flops_per_column(self):
        return 5 * self.n

    def apply(self, name, block, transpose=False):
        a, p, w, pt, wt = self._ops[name]
        if transpose:
            return a * block + pt[:, None] * (wt @ block)[None, :]
        return a * block + p[:, None] * (w @ block)[None, :]

    def dense(self, name):
        """Exact dense image of the fused operator (oracle and mirror setup)."""
        a, p, w, _, _ = self._ops[name]
        return np.diag(a[:, 0]) + np.outer(p, w)


def make_base_operators(solver):
    """Build the fused E0/F0 application handles for one shifted solver."""
    return BaseOperators(solver)


# ---------------------------------------------------------------------------
# implicit doubling iterate
# ---------------------------------------------------------------------------

class ImplicitIterate:
    """The never-assembled doubling operator E_k (or F_k).

    Level k is defined recursively by squaring the previous level and adding a
    low-rank correction, so apply() at level k costs exactly 2^k base
    applications per column plus the per-level corrections.  Only apply and
    apply_transpose are public.  For small problems (row dimension at or below
    ``mirror_threshold``) an internal dense image is maintained and served
    instead, which changes nothing observable except speed and flop labels;
    every large-scale measurement runs with the mirror disabled.
    """

    def __init__(self, base, name, flops=None, mirror_threshold=0):
        self._base = base
        self._name = name
        self.n = base.n
        self.level = 0
        self.updates = []
        self.flops = flops
        self._mirror = base.dense(name) if base.n <= mirror_threshold else None

    @property
    def mirrored(self):
        return self._mirror is not None

    def push_update(self, u, v):
        """Advance one level: new operator = old @ old + u @ v.T."""
        if u.shape[0] != self.n or v.shape[0] != self.n or u.shape[1] != v.shape[1]:
            raise ValueError("update factors must be n x r with matching r")
        self.updates.append((u, v))
        self.level += 1
        if self._mirror is not None:
            self._mirror = self._mirror @ self._mirror + u @ v.T
            if self.flops is not None:
                self.flops.add("mirror_update",
                               2.0 * self.n ** 3 + 2.0 * self.n * u.size)

    def apply(self, block, transpose=False):
        block = np.asarray(block, dtype=float)
        if block.ndim == 1:
            block = block[:, None]
        if block.shape[0] != self.n:
            raise ValueError("block row dimension mismatch")
        if self.flops is not None:
            self.flops.event("implicit_block_apply")
        if self._mirror is not None:
            if self.flops is not None:
                self.flops.add("mirror_apply", 2.0 * self.n ** 2 * block.shape[1])
            m = self._mirror.T if transpose else self._mirror
            return m @ block
        return self._recurse(self.level, block, transpose)

    def apply_transpose(self, block):
        return self.apply(block, transpose=True)

    def _recurse(self, level, block, transpose):
        if level == 0:
            if self.flops is not None:
                self.flops.add_base_apply(
                    self._base.flops_per_column() * block.shape[1], block.shape[1])
            return self._base.apply(self._name, block, transpose=transpose)
        u, v = self.updates[level - 1]
        y = self._recurse(level - 1, self._recurse(level - 1, block, transpose), transpose)
        if transpose:
            corr = v @ (u.T @ block)
        else:
            corr = u @ (v.T @ block)
        if self.flops is not None:
            self.flops.add("implicit_correction",
                           4.0 * self.n * u.shape[1] * block.shape[1])
        return y + corr


# ---------------------------------------------------------------------------
# orthogonalization and deterministic truncated SVD
# ---------------------------------------------------------------------------

def orthonormalize_against(Q, Z, null_rel=QR_NULL_REL, max_new=None, flops=None):
    """Extend the orthonormal basis Q by the fresh directions of Z.

    Two-pass classical Gram-Schmidt against Q, then a pivoted QR of the
    remainder.  Remainder directions whose pivot falls below ``null_rel`` times
    the block scale are numerical noise and are dropped; the basis is also never
    grown past ``max_new`` columns (default: up to full dimension n).  Without
    the drop rule, no-truncation runs keep resurrecting roundoff directions
    once the basis saturates and the combined basis stops being orthonormal.

    Returns (Q_new, S, R) with Z ~= Q @ S + Q_new @ R.
    """
    n, m = Z.shape
    nq = Q.shape[1]
    if max_new is None:
        max_new = n - nq
    S = Q.T @ Z
    Zp = Z - Q @ S
    S2 = Q.T @ Zp
    Zp = Zp - Q @ S2
    S = S + S2
    if flops is not None:
        flops.add("orthogonalize", 8.0 * n * nq * m + 2.0 * n * m * m)
    empty = (np.zeros((n, 0)), S, np.zeros((0, m)))
    if m == 0 or max_new <= 0:
        return empty
    colscale = float(np.linalg.norm(Z, axis=0).max(initial=0.0))
    if colscale == 0.0:
        return empty
    Qf, Rf, piv = sla.qr(Zp, mode="economic", pivoting=True)
    diag = np.abs(np.diag(Rf))
    thresh = null_rel * max(diag[0] if diag.size else 0.0, colscale)
    r = min(int(np.sum(diag > thresh)), max_new)
    if r == 0:
        return empty
    # undo column pivoting and fix signs so the factorization is deterministic
    sgn = np.sign(np.diag(Rf)[:r])
    sgn[sgn == 0] = 1.0
    Qh = Qf[:, :r] * sgn[None, :]
    R = np.zeros((r, m))
    R[:, piv] = sgn[:, None] * Rf[:r, :]
    if nq == 0:
        return Qh, S, R
    # Cleanup pass.  A direction whose pivot sits near the Gram-Schmidt noise
    # floor (about eps * colscale) is contaminated by an in-span component of
    # relative size eps * colscale / pivot, which can reach percent level at
    # the admission threshold and silently destroys basis orthonormality.
    # Re-project against Q, re-factor, and drop directions that lost most of
    # their length to the projection (they were noise, not content).
    C2 = Q.T @ Qh
    Uf, Tf, piv2 = sla.qr(Qh - Q @ C2, mode="economic", pivoting=True)
    tdiag = np.abs(np.diag(Tf))
    r2 = int(np.sum(tdiag > 0.1))
    if flops is not None:
        flops.add("orthogonalize", 4.0 * n * r * (r + nq))
    if r2 == 0:
        return empty
    T = np.zeros((r2, r))
    T[:, piv2] = Tf[:r2, :]
    sgn2 = np.sign(np.diag(Tf)[:r2])
    sgn2[sgn2 == 0] = 1.0
    Uh = Uf[:, :r2] * sgn2[None, :]
    TR = (sgn2[:, None] * T) @ R
    return Uh, S + C2 @ R, TR


def truncated_svd(M, trunc_rel, flops=None):
    """Deterministic truncated SVD of a small core matrix.

    Returns (U, s, V) with M ~= U @ diag(s) @ V.T.  Exact zeros are always
    dropped; otherwise singular values below trunc_rel * s[0] are discarded
    (values exactly at the threshold are kept).  Signs are fixed so that the
    largest-magnitude entry of each concatenated pair [u; v] is positive, a
    convention that commutes with transposition -- the symmetry audit relies on
    svd(M) and svd(M.T) agreeing factor-for-factor.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if flops is not None:
        flops.add("svd", 12.0 * max(M.shape) ** 3)
    if M.size == 0:
        return np.zeros((M.shape[0], 0)), np.zeros(0), np.zeros((M.shape[1], 0))
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    keep = s > 0.0
    if s.size and s[0] > 0.0 and trunc_rel > 0.0:
        keep &= s >= trunc_rel * s[0]
    U, s, V = U[:, keep], s[keep], Vt[keep].T
    if s.size:
        stacked = np.vstack([U, V])
        idx = np.argmax(np.abs(stacked), axis=0)
        sgn = np.sign(stacked[idx, np.arange(s.size)])
        sgn[sgn == 0] = 1.0
        U = U * sgn[None, :]
        V = V * sgn[None, :]
    return U, s, V


# ---------------------------------------------------------------------------
# residual without dense assembly
# ---------------------------------------------------------------------------

def residual_stacks(inst, X):
    """Stacks U_hat, V_hat with U_hat @ V_hat.T == X C X - X E - A X + B.

    Width is 2*rank + 2: both diagonal actions ride on the factor blocks, the
    quadratic term is rank one, and the two remaining rank-one pieces share the
    same right-hand vector and merge.
    """
    n = inst.n
    L, sig, R = X.left, X.core, X.right
    LS = L * sig[None, :]
    if inst.is_balanced:
        a_l = a_r = e_l = e_r = b_l = c_l = c_r = inst.phi
    else:
        e = np.ones(n)
        q = inst.q
        a_l, a_r = e, q       # A = diag(delta) - a_l a_r^T
        e_l, e_r = q, e       # E = diag(d)     - e_l e_r^T
        b_l = e               # B = b_l e_r^T   (shares e_r with the E term)
        c_l, c_r = q, q       # C = c_l c_r^T
    xcl = LS @ (R.T @ c_l)                  # X c_l
    xcr = R @ (LS.T @ c_r)                  # X^T c_r
    xel = LS @ (R.T @ e_l)                  # X e_l
    # -A X folded through the left factor: (-delta .* LS + a_l (a_r^T LS)) R^T
    W1 = -(inst.delta[:, None] * LS) + a_l[:, None] * (a_r @ LS)[None, :]
    U_hat = np.column_stack([W1, -LS, xcl, xel + b_l])
    V_hat = np.column_stack([R, inst.d[:, None] * R, xcr, e_r])
    return U_hat, V_hat


def residual_norm(inst, X, flops=None):
    """Frobenius norm of X C X - X E - A X + B for a low-rank X.

    Every term is a short combination of outer products of available n-vectors
    with the factor columns of X, so the residual is ||U_hat @ V_hat.T||_F with
    stacks of width 2*rank+2.  Both stacks are QR-factored and the norm taken on
    the small triangular product; a Gram-matrix evaluation would cancel
    catastrophically at machine-level residuals.

    Returns (absolute_norm, normalized_norm); the normalization divides by
    ||B||_F, which is n for the original all-ones B and sum(q) after balancing.
    """
    if X.n != inst.n:
        raise ValueError("solution dimension does not match the instance")
    b_fro = float(inst.phi @ inst.phi) if inst.is_balanced else float(inst.n)
    U_hat, V_hat = residual_stacks(inst, X)
    if flops is not None:
        w = U_hat.shape[1]
        flops.add("residual", 8.0 * inst.n * w * w)
    _, ru = np.linalg.qr(U_hat)
    _, rv = np.linalg.qr(V_hat)
    absnorm = float(np.linalg.norm(ru @ rv.T))
    return absnorm, absnorm / b_fro
