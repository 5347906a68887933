"""Oracle-layer contracts: rate metadata, level checks, cost accounting."""

import threading

import numpy as np
import pytest

from mlmc_grad.errors import LevelOverflowError
from mlmc_grad.oracle import BiasedOracle, CostMeter, RateLaw

from conftest import QuadraticOracle


def test_rate_law_formulas():
    law = RateLaw(a=2.0, b=1.5, c=1.0, M_a=3.0, M_b=0.5, M_c=4.0)
    assert law.bias_bound(0) == 3.0
    assert law.bias_bound(2) == 3.0 * 2.0 ** (-4.0)
    assert law.variance_bound(4) == 0.5 * 2.0 ** (-6.0)
    assert law.cost_of_level(3) == 4.0 * 8.0


def test_rate_law_rejects_bad_parameters():
    with pytest.raises(ValueError):
        RateLaw(a=0.0, b=1.0, c=1.0)
    with pytest.raises(ValueError):
        RateLaw(a=1.0, b=-2.0, c=1.0)
    with pytest.raises(ValueError):
        RateLaw(a=1.0, b=1.0, c=1.0, M_b=0.0)
    with pytest.raises(ValueError):
        RateLaw(a=1.0, b=1.0, c=1.0, sigma2=-1.0)


def test_check_level_type_and_range(quad_noisy):
    quad_noisy.check_level(0)
    quad_noisy.check_level(np.int64(3))
    with pytest.raises(TypeError):
        quad_noisy.check_level(2.0)
    with pytest.raises(LevelOverflowError):
        quad_noisy.check_level(-1)
    with pytest.raises(LevelOverflowError):
        quad_noisy.check_level(quad_noisy.max_level + 1)


def test_validate_point_shape_and_dtype(quad_noisy):
    x = quad_noisy.validate_point([1, 2])
    assert x.dtype == float and x.shape == (2,)
    with pytest.raises(ValueError):
        quad_noisy.validate_point(np.zeros(3))
    with pytest.raises(ValueError):
        quad_noisy.validate_point(np.zeros((2, 1)))


def test_query_batch_shapes_and_cost(quad_noisy, rng):
    qb = quad_noisy.query_batch(2, np.zeros(2), rng, 7)
    assert qb.h.shape == (7, 2) and qb.H.shape == (7, 2)
    assert qb.n == 7
    assert qb.cost_per_query == quad_noisy.cost_of_level(2)
    assert qb.total_cost == 7 * qb.cost_per_query


def test_single_query_matches_batch_head(quad_noisy):
    x = np.array([0.3, -0.2])
    out = quad_noisy.query(1, x, np.random.default_rng(5))
    qb = quad_noisy.query_batch(1, x, np.random.default_rng(5), 1)
    np.testing.assert_array_equal(out.h, qb.h[0])
    np.testing.assert_array_equal(out.H, qb.H[0])
    assert out.cost == qb.cost_per_query


def test_same_seed_means_same_draws(quad_noisy):
    x = np.array([1.0, -1.0])
    a = quad_noisy.query_batch(3, x, np.random.default_rng(17), 20)
    b = quad_noisy.query_batch(3, x, np.random.default_rng(17), 20)
    np.testing.assert_array_equal(a.h, b.h)
    np.testing.assert_array_equal(a.H, b.H)


class _Minimal(BiasedOracle):
    """Smallest concrete oracle: no truth hooks, no pair evaluation."""

    def __init__(self):
        self.dim = 1
        self.law = RateLaw(a=1.0, b=1.0, c=1.0)
        self.name = "minimal"
        self.max_level = 4

    def query_batch(self, level, x, rng, n):
        raise RuntimeError("never queried in these tests")


def test_has_truth_reflects_overrides(quad_noisy):
    for kind in ("grad_level", "grad_truth", "value_level", "value_truth", "solution"):
        assert quad_noisy.has_truth(kind)
        assert not _Minimal().has_truth(kind)


def test_pair_queries_are_optional():
    with pytest.raises(NotImplementedError):
        _Minimal().query_pair_batch(0, np.zeros(1), np.ones(1), np.random.default_rng(0), 2)


def test_truth_hooks_are_exact(quad_noisy):
    x = np.array([0.4, -1.2])
    np.testing.assert_allclose(quad_noisy.grad_truth(x), x)
    np.testing.assert_allclose(quad_noisy.value_truth(x), 0.5 * float(x @ x))
    # level hooks converge to the truth at the declared bias rate
    for l in range(5):
        gap = quad_noisy.grad_level(x, l) - quad_noisy.grad_truth(x)
        assert float(gap @ gap) <= quad_noisy.law.bias_bound(l) * (1 + 1e-12)


def test_cost_meter_accumulates_and_tracks_max():
    meter = CostMeter()
    assert meter.total == 0.0 and meter.max_single == 0.0
    meter.charge(2.0)
    meter.charge(0.5)
    meter.charge(3.25)
    assert meter.total == pytest.approx(5.75)
    assert meter.max_single == 3.25
    with pytest.raises(ValueError):
        meter.charge(-1.0)
    with pytest.raises(ValueError):
        meter.charge(float("inf"))


def test_cost_meter_is_thread_safe():
    meter = CostMeter()
    n, per = 8, 2000

    def worker():
        for _ in range(per):
            meter.charge(1.0)

    threads = [threading.Thread(target=worker) for _ in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert meter.total == n * per


def test_oracle_rejects_out_of_range_query(quad_noisy, rng):
    with pytest.raises(LevelOverflowError):
        quad_noisy.query_batch(quad_noisy.max_level + 1, np.zeros(2), rng, 1)
