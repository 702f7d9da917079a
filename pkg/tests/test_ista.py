import numpy as np
import pytest

from unrolled_rpca import prox
from unrolled_rpca.ista import (
    DivergenceError,
    IstaConfig,
    ista_solve,
    ista_step,
    matrix_to_video,
    objective,
    video_to_matrix,
)
from unrolled_rpca.tensor import ContractViolation

from rpca_instances import sparse_instance, to_video


def naive_ista(dm, lam1, lam2, iters, sparsity):
    """Loop-level oracle built on numpy's dense SVD."""
    l = np.zeros_like(dm)
    s = np.zeros_like(dm)
    for _ in range(iters):
        zl = 0.5 * l - 0.5 * s + 0.5 * dm
        zs = 0.5 * s - 0.5 * l + 0.5 * dm
        u, sig, vt = np.linalg.svd(zl, full_matrices=False)
        l_new = (u * np.maximum(sig - lam1 / 2, 0)) @ vt
        if sparsity == "group":
            nr = np.linalg.norm(zs, axis=1, keepdims=True)
            s_new = zs * np.maximum(0, 1 - (lam2 / 2) / np.maximum(nr, 1e-300))
        else:
            s_new = np.sign(zs) * np.maximum(np.abs(zs) - lam2 / 2, 0)
        l, s = l_new, s_new
    return l, s


def test_video_matrix_layout_round_trip(rng):
    v = rng.standard_normal((5, 1, 3, 4))
    m = video_to_matrix(v)
    assert m.shape == (12, 5)
    np.testing.assert_array_equal(m[:, 2], v[2, 0].ravel())
    np.testing.assert_array_equal(matrix_to_video(m, v.shape), v)


@pytest.mark.parametrize("sparsity", ["group", "elementwise"])
def test_matches_loop_oracle(sparsity, rng):
    d = rng.standard_normal((6, 1, 4, 5))
    res = ista_solve(d, IstaConfig(1.0, 0.3, max_iters=7, tol=1e-300, sparsity=sparsity))
    l, s = naive_ista(video_to_matrix(d), 1.0, 0.3, 7, sparsity)
    np.testing.assert_allclose(video_to_matrix(res.l), l, atol=1e-5)
    np.testing.assert_allclose(video_to_matrix(res.s), s, atol=1e-5)
    assert res.iters_run == 7


def test_objective_monotone_and_histories_aligned(rng):
    l_true, s_true = sparse_instance(seed=1, h=16, w=16, t=8)
    d = to_video(l_true + s_true, 16, 16)
    cfg = IstaConfig(1.0, 0.1, max_iters=60, tol=1e-300)
    res = ista_solve(d, cfg)
    obj = np.array(res.objective_history)
    assert len(obj) == len(res.residual_history) == res.iters_run == 60
    assert np.all(np.diff(obj) <= 1e-6)
    assert obj[-1] == pytest.approx(objective(d, res.l.astype(np.float64), res.s.astype(np.float64), cfg), rel=1e-5)


def test_zero_penalty_fixed_point_split():
    # with no penalties every iterate splits D evenly after one step
    d = np.ones((3, 1, 2, 2))
    res = ista_solve(d, IstaConfig(0.0, 0.0, max_iters=5))
    np.testing.assert_allclose(res.l + res.s, d, atol=1e-6)


def test_huge_thresholds_give_zero():
    d = np.random.default_rng(0).standard_normal((4, 1, 3, 3))
    res = ista_solve(d, IstaConfig(1e6, 1e6, max_iters=3))
    assert not res.l.any() and not res.s.any()
    assert res.iters_run == 1  # the first step already leaves the zero start unchanged


def test_step_returns_nuclear_norm(rng):
    dm = rng.standard_normal((10, 4))
    l, s, nuc = ista_step(dm, np.zeros_like(dm), np.zeros_like(dm), IstaConfig(0.5, 0.5))
    assert nuc == pytest.approx(prox.nuclear_norm(l))


def test_contracts():
    with pytest.raises(ContractViolation):
        IstaConfig(-1.0, 0.0)
    with pytest.raises(ContractViolation):
        IstaConfig(1.0, 1.0, sparsity="rows")
    with pytest.raises(ContractViolation):
        ista_solve(np.full((2, 1, 2, 2), np.nan), IstaConfig(1.0, 1.0))
    with pytest.raises(ContractViolation):
        ista_solve(np.zeros((2, 2, 2, 2)), IstaConfig(1.0, 1.0))


def test_divergence_is_reported():
    # step 1/Lf with Lf far below the true constant overshoots and blows up
    d = np.random.default_rng(0).standard_normal((4, 1, 3, 3))
    with pytest.raises(DivergenceError, match="consecutive"):
        ista_solve(d, IstaConfig(0.0, 0.0, lipschitz=0.3, max_iters=200))


def test_zero_input_gives_zero():
    res = ista_solve(np.zeros((4, 1, 3, 3)), IstaConfig(1.0, 1.0))
    assert not res.l.any() and not res.s.any()


def test_objective_of_zero_decomposition(rng):
    d = rng.standard_normal((4, 1, 3, 3))
    z = np.zeros_like(d)
    assert objective(d, z, z, IstaConfig(1.0, 1.0)) == pytest.approx(0.5 * np.sum(d**2))


def test_dominant_sparse_threshold_keeps_s_zero(rng):
    d = rng.random((6, 1, 4, 4))
    lam2 = float(np.linalg.norm(video_to_matrix(d), axis=1).max())
    res = ista_solve(d, IstaConfig(0.1, lam2, max_iters=50))
    assert not res.s.any()
