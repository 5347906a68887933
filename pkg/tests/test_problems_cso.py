"""Composition instances: closed forms, coupling, preset constants."""

import numpy as np
import pytest

from mlmc_grad.problems import cso_linear, cso_nonconvex, cso_toy, make_instance
from mlmc_grad.problems.cso import CsoInstance, _smoothed_hinge
from mlmc_grad.errors import ConfigError
from mlmc_grad.oracle import RateLaw


def _fd_grad(fn, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fn(x + e) - fn(x - e)) / (2.0 * h)
    return g


def test_smoothed_hinge_matches_monte_carlo():
    y = np.array([-1.0, -0.2, 0.0, 0.4, 1.5])
    sig = 0.7
    z = np.random.default_rng(0).standard_normal((400_000, 1))
    emp = np.maximum(y + sig * z, 0.0)
    sm = _smoothed_hinge(y, sig)
    np.testing.assert_allclose(sm.mean, emp.mean(axis=0), atol=3e-3)
    np.testing.assert_allclose(sm.mean_sq, (emp**2).mean(axis=0), atol=8e-3)
    sharp = _smoothed_hinge(y, 0.0)
    np.testing.assert_array_equal(sharp.mean, np.maximum(y, 0.0))
    np.testing.assert_array_equal(sharp.mean_sq, np.maximum(y, 0.0) ** 2)


@pytest.mark.parametrize("factory", [cso_toy, cso_linear, cso_nonconvex])
def test_gradients_match_finite_differences(factory):
    inst = factory()
    x = inst.x1_default + 0.3  # hinge margin ~0.89 here, FD steps are safe
    np.testing.assert_allclose(
        inst.grad_truth(x), _fd_grad(inst.value_truth, x), atol=1e-5)
    np.testing.assert_allclose(
        inst.grad_level(x, 3), _fd_grad(lambda z: inst.value_level(z, 3), x),
        atol=1e-5)


def test_level_quantities_converge_to_truth():
    inst = cso_toy()
    x = inst.x_probe + 0.2
    gaps = [abs(inst.value_level(x, l) - inst.value_truth(x)) for l in (0, 4, 12)]
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 1e-3
    g_gap = inst.grad_level(x, 12) - inst.grad_truth(x)
    assert float(g_gap @ g_gap) < 1e-6


def test_query_mean_matches_closed_form(rng):
    inst = cso_toy()
    x = inst.x_probe
    for level in (0, 3):
        qb = inst.query_batch(level, x, rng, 60_000)
        se = qb.h.std(axis=0, ddof=1) / np.sqrt(qb.n)
        np.testing.assert_array_less(
            np.abs(qb.h.mean(axis=0) - inst.grad_level(x, level)), 4.0 * se + 1e-12)
    qb = inst.query_batch(3, x, rng, 60_000)
    want_H = inst.grad_level(x, 3) - inst.grad_level(x, 2)
    se = qb.H.std(axis=0, ddof=1) / np.sqrt(qb.n)
    np.testing.assert_array_less(np.abs(qb.H.mean(axis=0) - want_H), 4.0 * se + 1e-12)


def test_coupling_variance_decays(rng):
    # two levels apart the H variance should drop by about 2^(-2b)
    for inst, factor in ((cso_toy(), 0.25), (cso_linear(), 0.0625)):
        tr = {}
        for level in (2, 4):
            qb = inst.query_batch(level, inst.x_probe, rng, 20_000)
            tr[level] = float(qb.H.var(axis=0, ddof=1).sum())
        assert tr[4] / tr[2] < 2.0 * factor, inst.name


def test_preset_constants_frozen():
    toy = cso_toy()
    assert toy.dim == 8 and toy.K == 3
    np.testing.assert_array_equal(toy.x1_default, np.zeros(8))
    assert toy.mu == pytest.approx(1.4809692197, rel=1e-9)
    assert toy.S_F == pytest.approx(6.4945645991, rel=1e-9)
    assert (toy.law.a, toy.law.b, toy.law.c) == (1.0, 1.0, 1.0)
    assert toy.law.M_b == toy.law.sigma2 == 16.0
    lin = cso_linear()
    assert lin.law.b == 2.0 and lin.beta == 0.0
    assert lin.mu == pytest.approx(1.2080227496, rel=1e-9)
    non = cso_nonconvex()
    assert non.mu is None  # indefinite curvature: no strong-convexity constant
    assert non.S_F == pytest.approx(6.4945645991, rel=1e-9)
    for inst in (toy, lin, non):
        for kind in ("grad_level", "grad_truth", "value_level", "value_truth"):
            assert inst.has_truth(kind)


def test_shape_and_parameter_validation():
    A = np.zeros((2, 3, 4))
    m = np.zeros((2, 3))
    w = np.ones(3)
    law = RateLaw(a=1.0, b=1.0, c=1.0)
    with pytest.raises(ValueError):
        CsoInstance(A, np.zeros((2, 4)), w, tau=0.5, beta=1.0, kappa=0.0,
                    x_probe=np.zeros(4), law=law)
    with pytest.raises(ValueError):
        CsoInstance(A, m, np.ones(4), tau=0.5, beta=1.0, kappa=0.0,
                    x_probe=np.zeros(4), law=law)
    with pytest.raises(ValueError):
        CsoInstance(A, m, w, tau=0.0, beta=1.0, kappa=0.0,
                    x_probe=np.zeros(4), law=law)


def test_solution_is_stationary_and_cached():
    inst = cso_toy()
    sol = inst.solution()
    assert inst.solution() is sol  # multistart BFGS runs once
    x_star, f_star = sol
    assert f_star == pytest.approx(4.0279746662, rel=1e-8)
    assert float(np.linalg.norm(inst.grad_truth(x_star))) < 1e-5
    assert f_star <= inst.value_truth(inst.x1_default)
    assert f_star <= inst.value_truth(inst.x_probe)


def test_pair_query_shares_randomness(rng):
    inst = cso_toy()
    x_new = inst.x_probe
    x_old = inst.x_probe + 0.05
    qb_n, qb_o = inst.query_pair_batch(0, x_new, x_old, rng, 4000)
    var_h = float(qb_n.h.var(axis=0, ddof=1).sum())
    var_diff = float((qb_n.h - qb_o.h).var(axis=0, ddof=1).sum())
    assert var_diff < 0.05 * var_h  # common draws, nearby points


def test_instance_factory_names():
    assert make_instance("cso-toy").name == "cso_toy"
    assert make_instance("CSO_NONCONVEX").name == "cso_nonconvex"
    with pytest.raises(ConfigError):
        make_instance("cso_cubic")
