"""Shared fixtures: a synthetic quadratic oracle with every moment known.

The estimator and optimizer tests need an oracle whose per-level mean,
variance and cost are exact numbers rather than Monte-Carlo estimates.
QuadraticOracle provides F(x) = ||x||^2 / 2 with

    h^l(x) = x + 2^-l b0 + sigma0 2^-l Z,     Z ~ N(0, I)
    H^l(x) = h^l - h^(l-1) on a COMMON Z      (H^0 = h^0)

so the level bias is exactly 2^-l b0, the coupled difference has mean
-2^-l b0 and trace variance 2 sigma0^2 4^-l, and a level costs 2^l.
Declared law: a=2 (squared-bias decay), b=2, c=1, hence the unbounded
estimators are admissible. sigma0=0 degenerates to a deterministic oracle,
handy for exact contraction and budget arithmetic.
"""

import numpy as np
import pytest

from mlmc_grad.oracle import BiasedOracle, QueryBatch, RateLaw


class QuadraticOracle(BiasedOracle):
    def __init__(self, sigma0=0.5, bias_scale=1.0, dim=2, max_level=40):
        b0 = bias_scale * np.array([1.5, -0.75] + [0.0] * (dim - 2))
        law = RateLaw(
            a=2.0,
            b=2.0,
            c=1.0,
            M_a=max(float(b0 @ b0), 1e-12),
            M_b=max(2.0 * sigma0**2, 1e-12),
            M_c=1.0,
            sigma2=max(2.0 * sigma0**2 + float(b0 @ b0), 1e-12),
        )
        self.dim = dim
        self.law = law
        self.name = "quad"
        self.max_level = max_level
        self.b0 = b0
        self.sigma0 = float(sigma0)
        self.mu = 1.0
        self.S_F = 1.0
        self.x_probe = np.full(dim, 0.5)
        self.x1_default = np.zeros(dim)
        self.x1_default[0] = 2.0

    def _noise(self, rng, n):
        if self.sigma0 == 0.0:
            return np.zeros((n, self.dim))
        return rng.standard_normal((n, self.dim))

    def query_batch(self, level, x, rng, n):
        x = self.validate_point(x)
        self.check_level(level)
        z = self._noise(rng, n)
        h = x + 2.0**-level * (self.b0 + self.sigma0 * z)
        if level == 0:
            H = h
        else:
            h_coarse = x + 2.0 ** -(level - 1) * (self.b0 + self.sigma0 * z)
            H = h - h_coarse
        return QueryBatch(h=h, H=H, cost_per_query=self.cost_of_level(level))

    def query_pair_batch(self, level, x_new, x_old, rng, n):
        x_new = self.validate_point(x_new)
        x_old = self.validate_point(x_old)
        self.check_level(level)
        z = self._noise(rng, n)
        out = []
        for x in (x_new, x_old):
            h = x + 2.0**-level * (self.b0 + self.sigma0 * z)
            H = h if level == 0 else h - (x + 2.0 ** -(level - 1) * (self.b0 + self.sigma0 * z))
            out.append(QueryBatch(h=h, H=H, cost_per_query=self.cost_of_level(level)))
        return out[0], out[1]

    def grad_level(self, x, level):
        return np.asarray(x, dtype=float) + 2.0**-level * self.b0

    def grad_truth(self, x):
        return np.asarray(x, dtype=float).copy()

    def value_level(self, x, level):
        x = np.asarray(x, dtype=float)
        # antiderivative of grad_level along the bias direction
        return float(x @ x) / 2.0 + 2.0**-level * float(self.b0 @ x)

    def value_truth(self, x):
        x = np.asarray(x, dtype=float)
        return float(x @ x) / 2.0

    def solution(self):
        return np.zeros(self.dim), 0.0


@pytest.fixture
def quad_noisy():
    return QuadraticOracle(sigma0=0.5)


@pytest.fixture
def quad_exact():
    return QuadraticOracle(sigma0=0.0)


@pytest.fixture
def quad_unbiased():
    # no level bias at all: every estimator mean equals x exactly
    return QuadraticOracle(sigma0=0.5, bias_scale=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20260815)
