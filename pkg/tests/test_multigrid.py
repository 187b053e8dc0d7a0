import numpy as np
import pytest

from paseig.linalg import OpCounter
from paseig.multigrid import MgConfig, energy_norm, measure_contraction, mg_solve, v_cycle

from conftest import cached_setup


def test_config_validation():
    with pytest.raises(ValueError):
        MgConfig(pre_smooth_steps=-1)
    with pytest.raises(ValueError):
        MgConfig(coarsest_rel_tol=0.0)
    with pytest.raises(ValueError):
        MgConfig(cycles_per_solve=1.5)


def test_level_zero_is_coarsest_solve(square4):
    ops = square4.ops
    rhs = np.random.default_rng(0).standard_normal(ops.dofs(0))
    x = v_cycle(ops, 0, rhs, np.zeros_like(rhs), MgConfig())
    assert np.linalg.norm(rhs - ops.stiffness[0] @ x) <= 1e-12 * np.linalg.norm(rhs)


def test_zero_rhs_zero_guess(square4):
    n = square4.ops.dofs(2)
    assert np.all(v_cycle(square4.ops, 2, np.zeros(n), np.zeros(n), MgConfig()) == 0)


def test_zero_cycles_returns_guess(square4):
    x0 = np.random.default_rng(1).standard_normal(square4.ops.dofs(2))
    out = mg_solve(square4.ops, 2, np.ones_like(x0), x0, MgConfig(cycles_per_solve=0))
    np.testing.assert_array_equal(out, x0)


def test_level_out_of_range(square4):
    with pytest.raises(IndexError):
        v_cycle(square4.ops, 7, np.zeros(3), np.zeros(3), MgConfig())


def test_contraction_heavy_smoothing_tiny_level(square4):
    cfg = MgConfig(pre_smooth_steps=60, post_smooth_steps=60)
    assert measure_contraction(square4.ops, 1, cfg, trials=3) < 1e-8


def test_contraction_coarse_correction_only(square4):
    theta = measure_contraction(square4.ops, 1, MgConfig(pre_smooth_steps=0, post_smooth_steps=0), trials=3)
    assert 0.0 < theta < 1.0


def test_contraction_default_level_four():
    setup = cached_setup(divisions=4, levels=5)
    assert measure_contraction(setup.ops, 4, MgConfig(), trials=3) < 1.0


def test_more_cycles_contract_more(square4):
    one = measure_contraction(square4.ops, 2, MgConfig(), trials=3)
    three = measure_contraction(square4.ops, 2, MgConfig(cycles_per_solve=3), trials=3)
    assert three < one


def test_homogeneity(square4):
    # CG smoothing is nonlinear in its input but positively homogeneous.
    ops = square4.ops
    rng = np.random.default_rng(2)
    rhs, x0 = rng.standard_normal((2, ops.dofs(2)))
    base = v_cycle(ops, 2, rhs, x0, MgConfig())
    for c in (0.5, 3.0, 1e4):
        np.testing.assert_allclose(v_cycle(ops, 2, c * rhs, c * x0, MgConfig()), c * base,
                                   rtol=1e-10, atol=1e-10 * c * np.abs(base).max())


def test_superposition_without_smoothing(square4):
    # With no smoothing steps the cycle is a linear coarse-grid correction.
    ops = square4.ops
    cfg = MgConfig(pre_smooth_steps=0, post_smooth_steps=0)
    rng = np.random.default_rng(3)
    r1, r2, x1, x2 = rng.standard_normal((4, ops.dofs(2)))
    lhs = v_cycle(ops, 2, r1 + 2 * r2, x1 + 2 * x2, cfg)
    rhs = v_cycle(ops, 2, r1, x1, cfg) + 2 * v_cycle(ops, 2, r2, x2, cfg)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9 * np.abs(lhs).max())


def test_counter_and_determinism(square4):
    ops = square4.ops
    rng = np.random.default_rng(4)
    rhs, x0 = rng.standard_normal((2, ops.dofs(2)))
    c1, c2 = OpCounter(), OpCounter()
    a = mg_solve(ops, 2, rhs, x0, MgConfig(), c1)
    b = mg_solve(ops, 2, rhs, x0, MgConfig(), c2)
    assert np.array_equal(a, b)
    assert c1 == c2 and c1.matvecs > 0 and c1.cg_steps >= 8


def test_energy_norm(square4):
    A = square4.ops.stiffness[1]
    v = np.ones(A.shape[0])
    assert energy_norm(A, v) == pytest.approx(np.sqrt(v @ (A @ v)))
