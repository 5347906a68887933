"""Schedules, planners, and the two run loops on the synthetic oracle."""

import math

import numpy as np
import pytest

from mlmc_grad.errors import DivergenceError, LevelOverflowError
from mlmc_grad.estimators import LsgdEstimator, RtmlmcEstimator
from mlmc_grad.oracle import BiasedOracle, RateLaw
from mlmc_grad.optimizers import (
    grad_norm_probe,
    iteration_count,
    make_schedule,
    pilot_variance,
    select_level,
    sgd,
    vmlmc_batch_scale,
    vr_sgd,
)

from conftest import QuadraticOracle


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

def test_schedule_formulas():
    assert make_schedule("constant", gamma=0.05).gamma(123) == 0.05
    s = make_schedule("inv_t", mu=2.0, S_F=4.0)  # offset (S_F/mu)^2 = 4
    assert s.gamma(1) == pytest.approx(1.0 / 5.0)
    assert s.gamma(6) == pytest.approx(1.0 / 10.0)
    s = make_schedule("pl_decay", mu=0.5, S_F=1.0)  # offset 2 S_F/mu - 1 = 3
    assert s.gamma(1) == pytest.approx(1.0)
    assert s.gamma(5) == pytest.approx(0.5)
    s = make_schedule("inv_sqrt", V=4.0, T=25)
    assert s.gamma(1) == s.gamma(25) == pytest.approx(0.1)
    s = make_schedule("inv_sqrt_lipschitz", V=5.0, T=4, L_F=2.0)
    assert s.gamma(3) == pytest.approx(1.0 / 6.0)


def test_schedule_rejects_bad_arguments():
    with pytest.raises(ValueError):
        make_schedule("constant")
    with pytest.raises(ValueError):
        make_schedule("constant", gamma=-0.1)
    with pytest.raises(ValueError):
        make_schedule("inv_t", mu=1.0)  # S_F missing
    with pytest.raises(ValueError):
        make_schedule("inv_sqrt", V=1.0)  # T missing
    with pytest.raises(ValueError):
        make_schedule("warmup_cosine")
    with pytest.raises(ValueError):
        make_schedule("constant", gamma=0.1).gamma(0)  # 1-based index


# ---------------------------------------------------------------------------
# planners
# ---------------------------------------------------------------------------

def test_select_level_matches_hand_computation(quad_noisy):
    law = quad_noisy.law  # M_a = 2.8125, a = 2
    # ceil(log2(4 * 2.8125 / 0.1) / 2) = ceil(6.814 / 2) = 4
    assert select_level(law, 0.1, "strongly_convex") == 4
    # nonconvex uses eps^2: ceil(log2(1125) / 2) = ceil(10.136 / 2) = 6
    assert select_level(law, 0.1, "nonconvex") == 6
    assert select_level(law, 1e6, "convex") == 0  # coarse eps clamps to 0
    with pytest.raises(ValueError):
        select_level(law, 0.0, "convex")
    with pytest.raises(LevelOverflowError):
        select_level(law, 1e-4, "nonconvex", max_level=4)


def test_vmlmc_batch_scale_case_split():
    law_fast = RateLaw(a=1.0, b=2.0, c=1.0, M_b=0.5)
    got = vmlmc_batch_scale(law_fast, 0.1, "strongly_convex", L=6, mu=1.0)
    assert got == pytest.approx(2.0 * 0.5 / 0.1 / (1.0 - 2.0 ** -0.5))
    law_flat = RateLaw(a=1.0, b=1.0, c=1.0, M_b=0.5)
    got = vmlmc_batch_scale(law_flat, 0.1, "convex", L=6, S_F=2.0)
    assert got == pytest.approx(2.0 * 0.5 / (0.1 * 2.0) * 7)  # (L + 1) factor
    law_slow = RateLaw(a=1.0, b=1.0, c=2.0, M_b=0.5)
    got = vmlmc_batch_scale(law_slow, 0.1, "nonconvex", L=3)
    # cost outruns variance decay, so the base batch grows with the level
    want = 8.0 * 0.5 / 0.01 * 2.0 ** (1.0 * 4 / 2.0) / (2.0 ** 0.5 - 1.0)
    assert got == pytest.approx(want)
    with pytest.raises(ValueError):
        vmlmc_batch_scale(law_fast, 0.1, "strongly_convex", L=6)  # mu missing
    with pytest.raises(ValueError):
        vmlmc_batch_scale(law_fast, 0.1, "convex", L=6)  # S_F missing


def test_iteration_count_branches():
    # strongly convex, decaying steps: lead = max(V, mu^2 (1 + 2 (S_F/mu)^2) d2)
    T = iteration_count("strongly_convex", 0.1, V=4.0, mu=1.0, S_F=2.0, dist2=1.0)
    assert T == math.ceil(2.0 * 2.0 * 9.0 / 0.1)
    # strongly convex, constant step: log over log(S_F / (S_F - mu))
    T = iteration_count("strongly_convex", 0.1, V=0.0, mu=1.0, S_F=2.0,
                        value_gap=1.0, constant_step=True)
    assert T == math.ceil(2.0 * math.log(40.0) / math.log(2.0))
    T = iteration_count("convex", 0.5, V=1.0, dist2=1.0)
    assert T == math.ceil(4.0 * 1.0 * 4.0 / 0.25)
    T = iteration_count("convex", 0.5, V=0.0, dist2=1.0, S_F=2.0, constant_step=True)
    assert T == 32
    T = iteration_count("nonconvex", 1.0, V=1.0, S_F=1.0, value_gap=0.5)
    assert T == 64
    T = iteration_count("nonconvex", 1.0, V=0.0, S_F=1.0, value_gap=0.5,
                        constant_step=True)
    assert T == 8
    assert iteration_count("nonconvex", 1.0, V=1.0, S_F=1.0, value_gap=0.5,
                           cap=10) == 10
    assert iteration_count("convex", 1e9, V=1.0, dist2=1.0) == 1  # floor at 1


def test_iteration_count_rejects_bad_arguments():
    with pytest.raises(ValueError):
        iteration_count("convex", 0.0, V=1.0, dist2=1.0)
    with pytest.raises(ValueError):
        iteration_count("strongly_convex", 0.1, V=1.0, S_F=1.0, dist2=1.0)  # mu
    with pytest.raises(ValueError):
        iteration_count("convex", 0.1, V=1.0)  # dist2
    with pytest.raises(ValueError):
        iteration_count("nonconvex", 0.1, V=1.0, S_F=1.0)  # value_gap
    with pytest.raises(ValueError):
        iteration_count("quasiconvex", 0.1, V=1.0)


def test_pilot_variance_measures_the_estimator(quad_noisy, quad_exact, rng):
    est = LsgdEstimator(quad_noisy, level=0, batch=1)
    v = pilot_variance(est, np.zeros(2), rng, replications=4000)
    assert v == pytest.approx(0.5, rel=0.15)  # trace Var(h^0) = 2 sigma0^2
    est = LsgdEstimator(quad_exact, level=0, batch=1)
    assert pilot_variance(est, np.zeros(2), rng, replications=50) == 0.0


# ---------------------------------------------------------------------------
# sgd loop
# ---------------------------------------------------------------------------

def test_sgd_contracts_deterministically(quad_exact):
    # sigma0 = 0 makes the level-3 gradient exact: x + b0 / 8. Constant-step
    # descent then has the affine closed form around the fixed point -b0 / 8.
    est = LsgdEstimator(quad_exact, level=3, batch=1)
    x1 = np.array([2.0, 0.0])
    gamma, T = 0.5, 12
    res = sgd(est, x1, make_schedule("constant", gamma=gamma), T,
              np.random.default_rng(0),
              objective_fn=quad_exact.value_truth, grad_fn=quad_exact.grad_truth)
    fixed = -quad_exact.b0 / 8.0
    want = fixed + (1.0 - gamma) ** T * (x1 - fixed)
    np.testing.assert_allclose(res.iterates[-1], want, atol=1e-12)
    assert res.iterates.shape == (T + 1, 2)
    assert res.stop_reason == "completed"
    assert res.steps_done == T
    assert res.output_index == T
    np.testing.assert_array_equal(res.x_out, res.iterates[-1])
    np.testing.assert_allclose(res.cum_cost, 8.0 * np.arange(T + 1))
    assert res.total_cost == pytest.approx(8.0 * T)
    # truth tracks were recorded for every stored point
    assert res.objective.shape == (T + 1,)
    np.testing.assert_allclose(
        res.grad_sq, (res.iterates ** 2).sum(axis=1), atol=1e-12)


def test_sgd_budget_stops_before_overdraft(quad_noisy, rng):
    est = LsgdEstimator(quad_noisy, level=2, batch=3)  # 12 cost units a step
    res = sgd(est, np.zeros(2), make_schedule("constant", gamma=0.1), 1000,
              rng, budget=100.0)
    assert res.stop_reason == "budget"
    assert res.steps_done == 8
    assert res.total_cost == pytest.approx(96.0)
    assert res.total_cost <= 100.0 < res.total_cost + est.max_cost()


def test_sgd_stop_fn_sees_projected_iterates(quad_noisy, rng):
    seen = []

    def stop(x, t):
        seen.append((x.copy(), t))
        return t >= 5

    box = 0.05
    res = sgd(LsgdEstimator(quad_noisy, level=0, batch=1), np.zeros(2),
              make_schedule("constant", gamma=0.3), 50, rng,
              project=lambda z: np.clip(z, -box, box), stop_fn=stop)
    assert res.stop_reason == "target"
    assert res.steps_done == 5
    assert [t for _, t in seen] == [1, 2, 3, 4, 5]
    for (x, t) in seen:
        np.testing.assert_array_equal(x, res.iterates[t])
        assert np.all(np.abs(x) <= box)


def test_sgd_divergence_guard_raises_with_context(quad_exact):
    est = LsgdEstimator(quad_exact, level=6, batch=1)
    with pytest.raises(DivergenceError) as exc:
        sgd(est, np.array([2.0, 0.0]), make_schedule("constant", gamma=10.0),
            100, np.random.default_rng(0))
    assert exc.value.iteration is not None and exc.value.iteration > 0
    assert np.all(np.isfinite(exc.value.last_iterate))


def test_sgd_uniform_output_draws_a_post_start_iterate(quad_noisy):
    res = sgd(LsgdEstimator(quad_noisy, level=1, batch=1), np.full(2, 1.0),
              make_schedule("constant", gamma=0.05), 40,
              np.random.default_rng(3), output="uniform")
    assert 1 <= res.output_index <= res.steps_done
    np.testing.assert_array_equal(res.x_out, res.iterates[res.output_index])
    rerun = sgd(LsgdEstimator(quad_noisy, level=1, batch=1), np.full(2, 1.0),
                make_schedule("constant", gamma=0.05), 40,
                np.random.default_rng(3), output="uniform")
    assert rerun.output_index == res.output_index  # seeded draw, reproducible


def test_sgd_rejects_zero_horizon(quad_noisy, rng):
    with pytest.raises(ValueError):
        sgd(LsgdEstimator(quad_noisy, level=0, batch=1), np.zeros(2),
            make_schedule("constant", gamma=0.1), 0, rng)


# ---------------------------------------------------------------------------
# variance-reduced loop
# ---------------------------------------------------------------------------

def test_vr_sgd_every_step_anchor_is_minibatch_sgd(quad_exact):
    # Q_E = 1 rebuilds the memory each step, so the run degenerates to
    # plain SGD; with the exact oracle both trajectories match bit for bit.
    est = LsgdEstimator(quad_exact, level=2, batch=1)
    x1 = np.array([1.5, -0.5])
    a = vr_sgd(est, x1, 0.3, 10, np.random.default_rng(1),
               D1=1, D2=1, Q_E=1, output="last")
    b = sgd(est, x1, make_schedule("constant", gamma=0.3), 10,
            np.random.default_rng(2))
    np.testing.assert_allclose(a.iterates, b.iterates, atol=1e-14)
    assert a.total_cost == pytest.approx(b.total_cost)


def test_vr_sgd_correction_shifts_memory_exactly(quad_noisy):
    # the level draws cancel under common random numbers, so within an epoch
    # m_t - x_{t-1} stays pinned at its anchor value; any drift would mean
    # the correction term resampled instead of differencing.
    gamma, Q_E, T = 0.2, 8, 8
    est = LsgdEstimator(quad_noisy, level=2, batch=2)
    res = vr_sgd(est, np.array([1.0, 1.0]), gamma, T, np.random.default_rng(7),
                 D1=4, D2=2, Q_E=Q_E, output="last")
    assert res.steps_done == T
    m = (res.iterates[:-1] - res.iterates[1:]) / gamma  # m_t, t = 1..T
    residual = m - res.iterates[:-1]
    for t in range(1, T):
        np.testing.assert_allclose(residual[t], residual[0], atol=1e-12)


def test_vr_sgd_budget_and_costs(quad_noisy):
    est = LsgdEstimator(quad_noisy, level=0, batch=1)  # unit cost per query
    res = vr_sgd(est, np.zeros(2), 0.1, 6, np.random.default_rng(0),
                 D1=10, D2=3, Q_E=3, output="last")
    # epochs of Q_E = 3: anchor 10, then 2 corrections at 2 * 3 each
    want = np.cumsum([10, 6, 6, 10, 6, 6]).astype(float)
    np.testing.assert_allclose(res.cum_cost[1:], want)
    tight = vr_sgd(est, np.zeros(2), 0.1, 6, np.random.default_rng(0),
                   D1=10, D2=3, Q_E=3, budget=25.0, output="last")
    assert tight.stop_reason == "budget"
    assert tight.total_cost == pytest.approx(22.0)  # next step needs 6 more


def test_vr_sgd_rejects_bad_arguments(quad_noisy, rng):
    est = LsgdEstimator(quad_noisy, level=0, batch=1)
    with pytest.raises(ValueError):
        vr_sgd(est, np.zeros(2), 0.0, 5, rng, D1=1, D2=1, Q_E=1)
    with pytest.raises(ValueError):
        vr_sgd(est, np.zeros(2), 0.1, 5, rng, D1=0, D2=1, Q_E=1)


# ---------------------------------------------------------------------------
# stationarity probe
# ---------------------------------------------------------------------------

class _NoTruthQuad(QuadraticOracle):
    """Same sampler, closed forms masked: forces the sampling path."""

    grad_truth = BiasedOracle.grad_truth


def test_grad_norm_probe_exact_path(quad_noisy):
    got = grad_norm_probe(quad_noisy, np.array([2.0, 0.0]))
    assert got.exact and got.se == 0.0
    assert got.value == pytest.approx(4.0)


def test_grad_norm_probe_debiased_sampling_path():
    prob = _NoTruthQuad(sigma0=0.5, bias_scale=1.0)
    assert not prob.has_truth("grad_truth")
    got = grad_norm_probe(prob, np.array([2.0, 0.0]), replications=4000,
                          rng=np.random.default_rng(11))
    assert not got.exact and got.se > 0.0
    # level-12 bias shifts the square by ~1.5e-3; sampling error is tiny
    assert got.value == pytest.approx(4.0, abs=0.02)
    with pytest.raises(ValueError):
        grad_norm_probe(prob, np.zeros(2), replications=1)
