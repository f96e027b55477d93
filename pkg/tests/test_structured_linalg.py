"""Shifted solves, fused base operators, implicit iterates, QR/SVD, residuals."""

import numpy as np
import pytest

from transport_nare.structured_linalg import (
    FlopModel,
    ImplicitIterate,
    LowRankBilinear,
    ShiftedSolver,
    gamma_select,
    make_base_operators,
    orthonormalize_against,
    residual_norm,
    truncated_svd,
)
from transport_nare.transport_problem import (
    TransportParams,
    NareInstance,
    assemble_dense,
    balance,
    gauss_legendre,
    make_instance,
)

SCALAR = make_instance(1, 0.5, 0.0)
X_SCALAR = 3.0 - 2.0 * np.sqrt(2.0)


def dense_shifted(inst, gamma):
    A, B, C, E = assemble_dense(inst)
    n = inst.n
    Eg = E + gamma * np.eye(n)
    Ag = A + gamma * np.eye(n)
    W = Ag - B @ np.linalg.solve(Eg, C)
    V = Eg - C @ np.linalg.solve(Ag, B)
    return {"E": Eg, "A": Ag, "W": W, "V": V}


# ---------------------------------------------------------------------------
# LowRankBilinear
# ---------------------------------------------------------------------------

def test_low_rank_container_consistency():
    rng = np.random.default_rng(0)
    left, _ = np.linalg.qr(rng.standard_normal((10, 3)))
    right, _ = np.linalg.qr(rng.standard_normal((10, 3)))
    core = np.array([2.0, 1.0, 0.25])
    X = LowRankBilinear(left, core, right)
    D = X.dense()
    assert X.n == 10 and X.rank == 3
    assert abs(X.entry(4, 7) - D[4, 7]) <= 1e-14
    assert abs(X.min_entry() - D.min()) <= 1e-14
    assert abs(X.frobenius() - np.linalg.norm(D)) <= 1e-12
    assert X.orthonormality_defect() <= 1e-14
    X.validate()


def test_low_rank_container_validation():
    with pytest.raises(ValueError):
        LowRankBilinear(np.ones((4, 2)), np.ones(3), np.ones((4, 2)))
    with pytest.raises(ValueError):
        LowRankBilinear(np.ones((4, 2)), np.ones(2), np.ones((5, 2)))
    bad = LowRankBilinear(np.ones((4, 1)), np.array([1.0]), np.ones((4, 1)))
    with pytest.raises(ValueError):
        bad.validate()     # all-ones factors are not orthonormal
    increasing = LowRankBilinear(np.eye(4)[:, :2], np.array([1.0, 2.0]), np.eye(4)[:, :2])
    with pytest.raises(ValueError):
        increasing.validate()


def test_low_rank_rank_zero():
    X = LowRankBilinear(np.zeros((5, 0)), np.zeros(0), np.zeros((5, 0)))
    assert X.rank == 0
    np.testing.assert_array_equal(X.dense(), np.zeros((5, 5)))
    assert X.orthonormality_defect() == 0.0


# ---------------------------------------------------------------------------
# flop model
# ---------------------------------------------------------------------------

def test_flop_model_accumulates_by_iteration():
    fm = FlopModel()
    assert fm.snapshot(0) == {}
    fm.add("gemm", 100)
    fm.add("gemm", 50)
    fm.k = 1
    fm.add("gemm", 7)
    fm.add("residual", 3)
    assert fm.snapshot(0) == {"gemm": 150.0}
    assert fm.iteration_total(1) == 10.0
    assert fm.iteration_total(1, exclude=("residual",)) == 7.0
    assert fm.total() == 160.0
    assert fm.total(exclude=("gemm",)) == 3.0
    assert fm.iterations() == [0, 1]


def test_flop_model_events_and_base_cost():
    fm = FlopModel()
    fm.event("implicit_block_apply")
    fm.event("implicit_block_apply")
    fm.add_base_apply(400.0, 5)
    assert fm.iteration_events(0, "implicit_block_apply") == 2
    assert fm.iteration_events(0, "base_apply_cols") == 5
    assert fm.c_gamma == 80.0
    assert FlopModel().c_gamma == 0.0


def test_flop_model_csv(tmp_path):
    fm = FlopModel()
    fm.add("gemm", 12)
    fm.k = 1
    fm.add("svd", 5)
    path = tmp_path / "flops.csv"
    fm.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "k,kernel,count"
    assert lines[1] == "0,gemm,12"
    assert lines[2] == "1,svd,5"


# ---------------------------------------------------------------------------
# shift selection
# ---------------------------------------------------------------------------

def test_gamma_select_scalar():
    assert gamma_select(SCALAR) == 3.0


def test_gamma_select_matches_dense_diagonals():
    inst = make_instance(8, 0.9, 0.1)
    A, _, _, E = assemble_dense(inst)
    assert gamma_select(inst) == max(np.diag(A).max(), np.diag(E).max())


def test_gamma_select_balanced_equals_original():
    inst = make_instance(13, 0.77, 0.21)
    assert gamma_select(balance(inst)) == gamma_select(inst)


# ---------------------------------------------------------------------------
# shifted Sherman-Morrison solves
# ---------------------------------------------------------------------------

def test_shifted_solver_scalar_values():
    sol = ShiftedSolver(SCALAR, gamma_select(SCALAR))
    one = np.ones((1, 1))
    assert abs(sol.solve("E", one)[0, 0] - 1.0 / 6.0) <= 1e-16
    assert abs(sol.solve("A", one)[0, 0] - 1.0 / 6.0) <= 1e-16
    assert abs(sol.solve("W", one)[0, 0] - 6.0 / 35.0) <= 1e-16
    assert abs(sol.solve("V", one)[0, 0] - 6.0 / 35.0) <= 1e-16


@pytest.mark.parametrize("balanced", [False, True])
def test_shifted_solver_matches_dense(balanced):
    inst = make_instance(16, 0.9, 0.1)
    if balanced:
        inst = balance(inst)
    gamma = gamma_select(inst)
    sol = ShiftedSolver(inst, gamma)
    mats = dense_shifted(inst, gamma)
    rng = np.random.default_rng(3)
    X = rng.standard_normal((16, 4))
    for which in ShiftedSolver.WHICH:
        got = sol.solve(which, X)
        np.testing.assert_allclose(got, np.linalg.solve(mats[which], X),
                                   rtol=1e-11, atol=1e-13)
        gott = sol.solve(which, X, transpose=True)
        np.testing.assert_allclose(gott, np.linalg.solve(mats[which].T, X),
                                   rtol=1e-11, atol=1e-13)
        np.testing.assert_allclose(sol.apply(which, X), mats[which] @ X,
                                   rtol=1e-12, atol=1e-13)


def test_shifted_solver_roundtrip():
    inst = make_instance(16, 0.9, 0.1)
    sol = ShiftedSolver(inst, gamma_select(inst))
    for which in ShiftedSolver.WHICH:
        assert sol.roundtrip_error(which) <= 1e-12


def test_shifted_solver_balanced_is_self_transpose():
    binst = balance(make_instance(12, 0.8, 0.2))
    sol = ShiftedSolver(binst, gamma_select(binst))
    X = np.random.default_rng(1).standard_normal((12, 3))
    for which in ShiftedSolver.WHICH:
        np.testing.assert_array_equal(sol.solve(which, X),
                                      sol.solve(which, X, transpose=True))


def test_shifted_solver_decoupled_limit():
    # with q = 0 every operator is plain diagonal division
    base = make_instance(4, 0.5, 0.5)
    inst = NareInstance(delta=base.delta, d=base.d, q=np.zeros(4),
                        params=base.params, quad=base.quad)
    sol = ShiftedSolver(inst, 2.0)
    X = np.random.default_rng(2).standard_normal((4, 3))
    np.testing.assert_allclose(sol.solve("E", X), X / (inst.d + 2.0)[:, None],
                               rtol=1e-15)
    np.testing.assert_allclose(sol.solve("W", X), X / (inst.delta + 2.0)[:, None],
                               rtol=1e-15)


def test_shifted_solver_argument_errors():
    sol = ShiftedSolver(SCALAR, 3.0)
    with pytest.raises(ValueError):
        sol.solve("Z", np.ones((1, 1)))
    with pytest.raises(ValueError):
        sol.solve("E", np.ones((2, 1)))


def test_shifted_solver_counts_flops():
    fm = FlopModel()
    sol = ShiftedSolver(make_instance(8, 0.5, 0.5), 5.0)
    sol.solve("E", np.ones((8, 3)), flops=fm)
    assert fm.snapshot(0)["smw_solve"] == 5 * 24


# ---------------------------------------------------------------------------
# fused base operators
# ---------------------------------------------------------------------------

def test_base_operators_scalar_value():
    sol = ShiftedSolver(SCALAR, 3.0)
    base = make_base_operators(sol)
    one = np.ones((1, 1))
    assert abs(base.apply("E", one)[0, 0] + 1.0 / 35.0) <= 1e-15
    assert abs(base.apply("F", one)[0, 0] + 1.0 / 35.0) <= 1e-15
    assert abs(base.dense("E")[0, 0] + 1.0 / 35.0) <= 1e-15


def test_base_operators_zero_block():
    sol = ShiftedSolver(make_instance(6, 0.9, 0.1), 9.0)
    base = make_base_operators(sol)
    np.testing.assert_array_equal(base.apply("E", np.zeros((6, 2))),
                                  np.zeros((6, 2)))


@pytest.mark.parametrize("balanced", [False, True])
def test_base_operators_match_dense(balanced):
    inst = make_instance(16, 0.9, 0.1)
    if balanced:
        inst = balance(inst)
    gamma = gamma_select(inst)
    sol = ShiftedSolver(inst, gamma)
    base = make_base_operators(sol)
    mats = dense_shifted(inst, gamma)
    eye = np.eye(16)
    e0 = eye - 2.0 * gamma * np.linalg.inv(mats["V"])
    f0 = eye - 2.0 * gamma * np.linalg.inv(mats["W"])
    np.testing.assert_allclose(base.dense("E"), e0, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(base.dense("F"), f0, rtol=1e-12, atol=1e-12)
    X = np.random.default_rng(5).standard_normal((16, 3))
    np.testing.assert_allclose(base.apply("E", X), e0 @ X, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(base.apply("F", X, transpose=True), f0.T @ X,
                               rtol=1e-12, atol=1e-12)
    assert base.flops_per_column() == 80


# ---------------------------------------------------------------------------
# implicit doubling iterate
# ---------------------------------------------------------------------------

def make_level2(n=16, seed=7, mirror_threshold=0, flops=None):
    inst = make_instance(n, 0.9, 0.1)
    sol = ShiftedSolver(inst, gamma_select(inst))
    base = make_base_operators(sol)
    imp = ImplicitIterate(base, "E", flops=flops, mirror_threshold=mirror_threshold)
    rng = np.random.default_rng(seed)
    M = base.dense("E")
    for _ in range(2):
        u = rng.standard_normal((n, 2))
        v = rng.standard_normal((n, 2))
        imp.push_update(u, v)
        M = M @ M + u @ v.T
    return imp, M


def test_implicit_level_zero_delegates():
    sol = ShiftedSolver(make_instance(8, 0.5, 0.5), 7.0)
    base = make_base_operators(sol)
    imp = ImplicitIterate(base, "F")
    X = np.random.default_rng(0).standard_normal((8, 3))
    np.testing.assert_array_equal(imp.apply(X), base.apply("F", X))
    np.testing.assert_array_equal(imp.apply_transpose(X),
                                  base.apply("F", X, transpose=True))


def test_implicit_zero_updates_is_repeated_squaring():
    sol = ShiftedSolver(make_instance(8, 0.5, 0.5), 7.0)
    base = make_base_operators(sol)
    imp = ImplicitIterate(base, "E")
    for _ in range(2):
        imp.push_update(np.zeros((8, 1)), np.zeros((8, 1)))
    M = base.dense("E")
    M4 = np.linalg.matrix_power(M, 4)
    X = np.random.default_rng(1).standard_normal((8, 2))
    np.testing.assert_allclose(imp.apply(X), M4 @ X, rtol=1e-12, atol=1e-12)


def test_implicit_level2_matches_dense():
    imp, M = make_level2()
    X = np.random.default_rng(11).standard_normal((16, 4))
    scale = np.abs(M @ X).max()
    np.testing.assert_allclose(imp.apply(X), M @ X, rtol=0, atol=1e-12 * scale)
    np.testing.assert_allclose(imp.apply(X, transpose=True), M.T @ X,
                               rtol=0, atol=1e-12 * scale)


def test_implicit_apply_counts_base_columns():
    fm = FlopModel()
    imp, _ = make_level2(flops=fm)
    before = fm.iteration_events(0, "base_apply_cols")
    imp.apply(np.ones((16, 3)))
    assert fm.iteration_events(0, "base_apply_cols") - before == 4 * 3
    applies = fm.iteration_events(0, "implicit_block_apply")
    imp.apply_transpose(np.ones((16, 2)))
    assert fm.iteration_events(0, "implicit_block_apply") == applies + 1


def test_implicit_mirror_is_equivalent():
    imp, M = make_level2(mirror_threshold=16)
    assert imp.mirrored
    X = np.random.default_rng(13).standard_normal((16, 3))
    scale = np.abs(M @ X).max()
    np.testing.assert_allclose(imp.apply(X), M @ X, rtol=0, atol=1e-11 * scale)
    plain, _ = make_level2(mirror_threshold=0)
    np.testing.assert_allclose(imp.apply(X), plain.apply(X), rtol=0,
                               atol=1e-11 * scale)


def test_implicit_update_shape_check():
    sol = ShiftedSolver(make_instance(8, 0.5, 0.5), 7.0)
    imp = ImplicitIterate(make_base_operators(sol), "E")
    with pytest.raises(ValueError):
        imp.push_update(np.ones((8, 2)), np.ones((8, 3)))
    with pytest.raises(ValueError):
        imp.push_update(np.ones((7, 2)), np.ones((8, 2)))


# ---------------------------------------------------------------------------
# block orthogonalization
# ---------------------------------------------------------------------------

def random_basis(n, k, seed):
    Q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((n, k)))
    return Q


def combined_defect(Q, Uh):
    full = np.column_stack([Q, Uh])
    return np.abs(full.T @ full - np.eye(full.shape[1])).max()


def test_orthonormalize_reconstructs():
    Q = random_basis(20, 5, 0)
    Z = np.random.default_rng(1).standard_normal((20, 4))
    Uh, S, R = orthonormalize_against(Q, Z)
    np.testing.assert_allclose(Q @ S + Uh @ R, Z, rtol=0,
                               atol=1e-13 * np.abs(Z).max())
    assert combined_defect(Q, Uh) <= 1e-13
    assert Uh.shape == (20, 4)


def test_orthonormalize_drops_in_span_content():
    Q = random_basis(20, 5, 2)
    Z = Q @ np.random.default_rng(3).standard_normal((5, 3))
    Uh, S, R = orthonormalize_against(Q, Z)
    assert Uh.shape[1] == 0
    np.testing.assert_allclose(Q @ S, Z, rtol=0, atol=1e-13)
    # tiny off-span noise below the null threshold is also dropped
    Zn = Z + 1e-16 * np.random.default_rng(4).standard_normal((20, 3))
    Uh, _, _ = orthonormalize_against(Q, Zn)
    assert Uh.shape[1] == 0


def test_orthonormalize_max_new_cap():
    Q = random_basis(20, 5, 5)
    Z = np.random.default_rng(6).standard_normal((20, 6))
    Uh, S, R = orthonormalize_against(Q, Z, max_new=2)
    assert Uh.shape[1] == 2
    assert combined_defect(Q, Uh) <= 1e-13
    # default cap: never grow past dimension n
    Qbig = random_basis(8, 8, 7)
    Uh, _, _ = orthonormalize_against(Qbig, np.random.default_rng(8).standard_normal((8, 3)))
    assert Uh.shape[1] == 0


def test_orthonormalize_deterministic():
    Q = random_basis(16, 4, 9)
    Z = np.random.default_rng(10).standard_normal((16, 5))
    first = orthonormalize_against(Q, Z)
    second = orthonormalize_against(Q, Z)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a, b)


def test_orthonormalize_near_span_noise_stays_orthonormal():
    # directions barely above the null threshold must not poison the basis
    Q = random_basis(24, 20, 12)
    rng = np.random.default_rng(13)
    Z = Q @ rng.standard_normal((20, 8)) + 1e-13 * rng.standard_normal((24, 8))
    Uh, S, R = orthonormalize_against(Q, Z)
    assert combined_defect(Q, Uh) <= 1e-12
    np.testing.assert_allclose(Q @ S + Uh @ R, Z, rtol=0,
                               atol=1e-12 * np.abs(Z).max())


def test_orthonormalize_empty_inputs():
    Q = np.zeros((10, 0))
    Z = np.random.default_rng(14).standard_normal((10, 3))
    Uh, S, R = orthonormalize_against(Q, Z)
    assert Uh.shape == (10, 3) and S.shape == (0, 3)
    np.testing.assert_allclose(Uh @ R, Z, rtol=0, atol=1e-13)
    Uh, S, R = orthonormalize_against(random_basis(10, 2, 15), np.zeros((10, 0)))
    assert Uh.shape[1] == 0 and R.shape == (0, 0)
    Uh, _, _ = orthonormalize_against(random_basis(10, 2, 16), np.zeros((10, 2)))
    assert Uh.shape[1] == 0


# ---------------------------------------------------------------------------
# deterministic truncated SVD
# ---------------------------------------------------------------------------

def test_truncated_svd_reconstruction_and_order():
    M = np.random.default_rng(0).standard_normal((6, 4))
    U, s, V = truncated_svd(M, 0.0)
    assert np.all(s > 0) and np.all(np.diff(s) <= 0)
    np.testing.assert_allclose(U @ (s[:, None] * V.T), M, rtol=0, atol=1e-13)


def test_truncated_svd_drops_exact_zeros():
    M = np.diag([3.0, 0.0, 0.0])
    U, s, V = truncated_svd(M, 0.0)
    assert s.tolist() == [3.0]
    assert U.shape == (3, 1)


def test_truncated_svd_threshold_is_inclusive():
    _, s, _ = truncated_svd(np.diag([1.0, 1e-6]), 1e-6)
    assert s.size == 2
    _, s, _ = truncated_svd(np.diag([1.0, 0.99e-6]), 1e-6)
    assert s.tolist() == [1.0]


def test_truncated_svd_sign_convention_commutes_with_transpose():
    M = np.random.default_rng(21).standard_normal((5, 5))
    U, s, V = truncated_svd(M, 0.0)
    Ut, st, Vt = truncated_svd(M.T, 0.0)
    np.testing.assert_allclose(st, s, rtol=1e-14)
    np.testing.assert_allclose(Ut, V, rtol=0, atol=1e-13)
    np.testing.assert_allclose(Vt, U, rtol=0, atol=1e-13)


def test_truncated_svd_empty():
    U, s, V = truncated_svd(np.zeros((3, 0)), 0.0)
    assert U.shape == (3, 0) and s.size == 0
    U, s, V = truncated_svd(np.zeros((2, 2)), 0.0)
    assert s.size == 0


# ---------------------------------------------------------------------------
# factored residual
# ---------------------------------------------------------------------------

def rank_r_candidate(n, r, seed):
    rng = np.random.default_rng(seed)
    left, _ = np.linalg.qr(rng.standard_normal((n, r)))
    right, _ = np.linalg.qr(rng.standard_normal((n, r)))
    core = np.sort(rng.uniform(0.1, 1.0, size=r))[::-1]
    return LowRankBilinear(left, core, right)


def dense_residual_norm(inst, Xd):
    A, B, C, E = assemble_dense(inst)
    return np.linalg.norm(Xd @ C @ Xd - Xd @ E - A @ Xd + B)


def test_residual_of_zero_solution():
    inst = make_instance(12, 0.8, 0.2)
    X = LowRankBilinear(np.zeros((12, 0)), np.zeros(0), np.zeros((12, 0)))
    absnorm, rel = residual_norm(inst, X)
    assert abs(absnorm - 12.0) <= 1e-12
    assert abs(rel - 1.0) <= 1e-13


def test_residual_scalar_solution():
    X = LowRankBilinear(np.ones((1, 1)), np.array([X_SCALAR]), np.ones((1, 1)))
    _, rel = residual_norm(SCALAR, X)
    assert rel <= 1e-14


@pytest.mark.parametrize("balanced", [False, True])
def test_residual_matches_dense(balanced):
    inst = make_instance(16, 0.9, 0.1)
    if balanced:
        inst = balance(inst)
    X = rank_r_candidate(16, 2, seed=3)
    absnorm, rel = residual_norm(inst, X)
    expect = dense_residual_norm(inst, X.dense())
    assert abs(absnorm - expect) <= 1e-12 * max(1.0, expect)


@pytest.mark.parametrize("n,r,seed", [(8, 1, 0), (32, 7, 1), (64, 20, 2)])
def test_residual_matches_dense_sweep(n, r, seed):
    inst = make_instance(n, 0.7, 0.3)
    X = rank_r_candidate(n, r, seed)
    absnorm, _ = residual_norm(inst, X)
    expect = dense_residual_norm(inst, X.dense())
    assert abs(absnorm - expect) <= 1e-11 * max(1.0, expect)


def test_residual_dimension_mismatch():
    X = rank_r_candidate(8, 2, 0)
    with pytest.raises(ValueError):
        residual_norm(make_instance(9, 0.5, 0.5), X)
