"""Utility-based shortfall risk of a Gaussian linear position.

The position X(theta) = theta G, G ~ N(m_G, s_G^2), is scored by the
exponential shortfall loss l(y) = e^(beta y). The shortfall risk SR(theta)
is the cash reserve t solving

    E[ l(-X(theta) - t) ] = lam_risk,

and minimizing SR over theta is the optimization target. For this
Gaussian/exponential pair everything is closed-form,

    SR(theta)  = -m_G theta + beta s_G^2 theta^2 / 2 + log(1/lam_risk)/beta
    SR'(theta) = -m_G + beta s_G^2 theta,

which pins the truth side of every probe (quadratic, strongly convex,
minimizer m_G / (beta s_G^2)).

A level-l oracle query draws two independent windows of 2^l samples: the
root window {X~_i} fixes the empirical reserve t-hat (bracketed bisection
on the empirical equation), and the gradient window {X_i} turns it into

    g-hat = - mean(l'(-X_i - t-hat) X_i') / mean(l'(-X_i - t-hat)),

with X' = dX/dtheta = G. h is the full-window g-hat; the coupled H
differences it against the average of the two half-window g-hats, each
half using its own root from the matching half of the root window.
Level 0 is the telescope base, H := h. Cost: 2 * 2^l samples per query
(both streams count).

For the exponential loss the empirical root equation factors,
mean l(-X~ - t) = e^(-beta t) * mean e^(-beta X~), so the bisection
iterates on that cached per-window mean; this is an exact real-arithmetic
identity, not an approximation, and the bracketing/tolerance contract is
unchanged.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import NumericError
from ..oracle import BiasedOracle, QueryBatch, RateLaw

__all__ = ["UbsrInstance", "ubsr_toy"]

# Elements per (replications x window) chunk when vectorizing over windows.
_CHUNK_ELEMS = 1 << 21

_ROOT_TOL = 1e-10
_MAX_DOUBLINGS = 6


class UbsrInstance(BiasedOracle):
    """Shortfall-risk instance (see module docstring)."""

    dim = 1
    max_level = 20

    def __init__(
        self,
        g_mean: float = 1.0,
        g_sd: float = 0.5,
        beta: float = 2.0,
        lam_risk: float = 0.2,
        law: RateLaw | None = None,
        name: str = "ubsr_toy",
        x1_default: float = 1.3,
    ):
        if g_sd <= 0 or beta <= 0 or not 0 < lam_risk:
            raise ValueError("need g_sd > 0, beta > 0, lam_risk > 0")
        self.g_mean = float(g_mean)
        self.g_sd = float(g_sd)
        self.beta = float(beta)
        self.lam_risk = float(lam_risk)
        if law is None:
            law = RateLaw(a=1.0, b=1.0, c=1.0, M_a=4.0, M_b=4.0, M_c=2.0, sigma2=4.0)
        if law.M_c != 2.0 or law.c != 1.0:
            raise ValueError("cost law must charge 2 * 2^level draws (two streams)")
        self.law = law
        self.name = name
        self.x1_default = np.array([float(x1_default)])
        # SR is an exact quadratic in theta
        self.S_F = self.beta * self.g_sd**2
        self.mu = self.S_F

    # -- root finding --------------------------------------------------------

    def root_batch(self, samples: np.ndarray) -> np.ndarray:
        """Empirical shortfall reserves for a stack of sample windows.

        samples: (k, n) position draws. Returns the (k,) roots of
        (1/n) sum_i l(-samples_i - t) = lam_risk, each found by bisection
        to absolute tolerance 1e-10 after bracket expansion.
        """
        samples = np.asarray(samples, dtype=float)
        if samples.ndim != 2 or samples.shape[1] < 1:
            raise ValueError("samples must be (k, n) with n >= 1")
        # exponential loss: the empirical mean at reserve t is s * e^(-beta t)
        s = np.exp(-self.beta * samples).mean(axis=1)
        lam = self.lam_risk
        b0 = 10.0 * (np.abs(samples).max(axis=1) + 1.0)
        lo, hi = -b0, b0.copy()
        for _ in range(_MAX_DOUBLINGS + 1):
            bad = (s * np.exp(-self.beta * lo) <= lam) | (s * np.exp(-self.beta * hi) >= lam)
            if not bad.any():
                break
            lo = np.where(bad, 2.0 * lo, lo)
            hi = np.where(bad, 2.0 * hi, hi)
        else:
            raise NumericError("no sign change after bracket expansion in shortfall root")
        for _ in range(128):
            mid = 0.5 * (lo + hi)
            high_side = s * np.exp(-self.beta * mid) > lam
            lo = np.where(high_side, mid, lo)
            hi = np.where(high_side, hi, mid)
            if (hi - lo).max() <= _ROOT_TOL:
                break
        return 0.5 * (lo + hi)

    def sr_estimate(self, theta: float, samples: np.ndarray) -> float:
        """Empirical SR(theta) from one window of position draws."""
        samples = np.asarray(samples, dtype=float).ravel()
        if samples.size < 1:
            raise ValueError("need at least one sample")
        return float(self.root_batch(samples[None, :])[0])

    # -- oracle ----------------------------------------------------------------

    def _draw_g(self, rng, shape):
        return self.g_mean + self.g_sd * rng.standard_normal(shape)

    def _ratio(self, x_win: np.ndarray, g_win: np.ndarray, roots: np.ndarray) -> np.ndarray:
        """g-hat rows: shortfall-weighted gradient read at plugged-in roots."""
        w = self.beta * np.exp(-self.beta * (x_win + roots[:, None]))
        den = w.mean(axis=1)
        if np.any(den < 1e-12):
            raise NumericError("degenerate shortfall weighting: mean of l' below 1e-12")
        return -(w * g_win).mean(axis=1) / den

    def query_batch(self, level, x, rng, n):
        self.check_level(level)
        x = self.validate_point(x)
        theta = float(x[0])
        window = 2**level
        cost = self.law.cost_of_level(level)
        h = np.empty((n, 1))
        H = np.empty((n, 1))
        chunk = max(1, _CHUNK_ELEMS // window)
        for s0 in range(0, n, chunk):
            e0 = min(s0 + chunk, n)
            rows = e0 - s0
            g_root = self._draw_g(rng, (rows, window))
            g_grad = self._draw_g(rng, (rows, window))
            x_root = theta * g_root
            x_grad = theta * g_grad
            g_full = self._ratio(x_grad, g_grad, self.root_batch(x_root))
            h[s0:e0, 0] = g_full
            if level == 0:
                H[s0:e0, 0] = g_full
            else:
                half = window // 2
                g1 = self._ratio(
                    x_grad[:, :half], g_grad[:, :half], self.root_batch(x_root[:, :half])
                )
                g2 = self._ratio(
                    x_grad[:, half:], g_grad[:, half:], self.root_batch(x_root[:, half:])
                )
                H[s0:e0, 0] = g_full - 0.5 * (g1 + g2)
        return QueryBatch(h=h, H=H, cost_per_query=cost)

    def query_pair_batch(self, level, x_new, x_old, rng, n):
        self.check_level(level)
        thetas = [float(self.validate_point(x)[0]) for x in (x_new, x_old)]
        window = 2**level
        cost = self.law.cost_of_level(level)
        outs = [(np.empty((n, 1)), np.empty((n, 1))) for _ in thetas]
        chunk = max(1, _CHUNK_ELEMS // window)
        for s0 in range(0, n, chunk):
            e0 = min(s0 + chunk, n)
            rows = e0 - s0
            g_root = self._draw_g(rng, (rows, window))
            g_grad = self._draw_g(rng, (rows, window))
            for (h, H), theta in zip(outs, thetas):
                x_root = theta * g_root
                x_grad = theta * g_grad
                g_full = self._ratio(x_grad, g_grad, self.root_batch(x_root))
                h[s0:e0, 0] = g_full
                if level == 0:
                    H[s0:e0, 0] = g_full
                else:
                    half = window // 2
                    g1 = self._ratio(
                        x_grad[:, :half], g_grad[:, :half], self.root_batch(x_root[:, :half])
                    )
                    g2 = self._ratio(
                        x_grad[:, half:], g_grad[:, half:], self.root_batch(x_root[:, half:])
                    )
                    H[s0:e0, 0] = g_full - 0.5 * (g1 + g2)
        return tuple(
            QueryBatch(h=h, H=H, cost_per_query=cost) for h, H in outs
        )

    def value_batch(self, level, x, rng, n) -> np.ndarray:
        """n independent empirical reserves t-hat at window size 2^level.

        Feeds the value-bias probe: E[t-hat] - SR(theta) decays ~ 2^-level.
        Costs 2^level draws per replication (root stream only).
        """
        self.check_level(level)
        x = self.validate_point(x)
        theta = float(x[0])
        window = 2**level
        out = np.empty(n)
        chunk = max(1, _CHUNK_ELEMS // window)
        for s0 in range(0, n, chunk):
            e0 = min(s0 + chunk, n)
            out[s0:e0] = self.root_batch(theta * self._draw_g(rng, (e0 - s0, window)))
        return out

    # -- closed forms ----------------------------------------------------------

    def value_truth(self, x):
        x = self.validate_point(x)
        theta = float(x[0])
        return (
            -self.g_mean * theta
            + 0.5 * self.beta * self.g_sd**2 * theta**2
            + math.log(1.0 / self.lam_risk) / self.beta
        )

    def grad_truth(self, x):
        x = self.validate_point(x)
        return np.array([-self.g_mean + self.beta * self.g_sd**2 * float(x[0])])

    def solution(self):
        theta = self.g_mean / (self.beta * self.g_sd**2)
        return np.array([theta]), self.value_truth(np.array([theta]))


def ubsr_toy() -> UbsrInstance:
    """The shipped configuration: G ~ N(1, 0.5^2), l(y) = e^(2y),
    lam_risk = 0.2, so SR(theta) = -theta + theta^2/4 + log(5)/2 and the
    minimizer is theta = 2."""
    return UbsrInstance()
