"""Joint pricing and staffing of a single-server queue.

Decision x = (mu, p): service capacity and service fee. The objective is
the long-run expected loss

    F(mu, p) = h0 E[Q_inf] + c(mu) - p lam(p)

with Q_inf the steady-state number of customers in system, c(mu) = c0 mu^2
the staffing cost and p lam(p) the revenue under the demand curve
lam(p) = chi e^(o-p) / (1 + e^(o-p)).

The queue term has no exact simulator: a level-l query runs one trajectory
of the waiting-time recursion from the empty state,

    W_j = (W_{j-1} + V_j/mu - U_j/lam(p))^+
    X_j = 1{W_j > 0} (X_{j-1} + U_j/lam(p))

discards a warm-up of m steps, averages G_j = W_j + X_j over the remaining
window, and maps the window mean g into a two-coordinate gradient read
through the identity E[W_inf + X_inf] + 1/mu = L'(rho)/mu:

    d/dmu: c'(mu) - h0 (lam/mu) (g + 1/mu)
    d/dp : -lam - p lam' + h0 lam' (g + 1/mu)

The coupled difference H at level l >= 1 reuses the first half of the SAME
trajectory as the coarse window, so only the window means differ and the
deterministic terms cancel. Level 0 is the base of the telescope, H := h.

Cost unit: one simulated recursion step. The minimum useful trajectory
(a window that clears the warm-up at both the fine and the coarse length)
is folded into the cost constant: level l costs 2^k * 2^l steps where
2^k is the smallest power of two exceeding the warm-up (128 for m = 64).

With exponential interarrivals the model is M/G/1 and the
Pollaczek-Khinchine formula closes the loop: writing rho = lam(p)/mu and
s2 for the service-time variance (unit-mean normalization),

    E[Q_inf] = L(rho) = rho + rho^2 (1 + s2) / (2 (1 - rho)),

which supplies exact objective values and gradients for crossing
detection, grid search, and consistency tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from ..errors import InvalidInputError, UnstableRegimeError
from ..oracle import BiasedOracle, QueryBatch, RateLaw

__all__ = [
    "QueueState",
    "lindley_step",
    "ServiceLaw",
    "exponential_service",
    "erlang_service",
    "hyperexp_service",
    "make_service_law",
    "QueueInstance",
    "queue_f2",
]

# Elements per (replications x steps) simulation chunk; keeps peak memory of
# the vectorized recursion near 100 MB regardless of trajectory length.
_CHUNK_ELEMS = 1 << 20


# ---------------------------------------------------------------------------
# demand curve (logistic menu used by every shipped configuration)
# ---------------------------------------------------------------------------

def logistic_demand(p: float, scale: float = 10.0, offset: float = 0.1) -> float:
    """lam(p) = scale * e^(offset-p) / (1 + e^(offset-p)); decreasing in p."""
    return scale / (1.0 + np.exp(p - offset))


def logistic_demand_prime(p: float, scale: float = 10.0, offset: float = 0.1) -> float:
    sig = 1.0 / (1.0 + np.exp(p - offset))
    return -scale * sig * (1.0 - sig)


# ---------------------------------------------------------------------------
# scalar recursion (the contract of record; simulation vectorizes it)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QueueState:
    """Waiting time W_n, busy-time accumulator X_n, customer index n."""

    w: float = 0.0
    x: float = 0.0
    n: int = 0


def lindley_step(
    state: QueueState,
    mu: float,
    p: float,
    u: float,
    v: float,
    demand: Callable[[float], float] = logistic_demand,
) -> QueueState:
    """One customer: raw interarrival draw u, raw service draw v (both > 0)."""
    if mu <= 0 or u <= 0 or v <= 0:
        raise InvalidInputError("lindley_step needs mu > 0 and positive draws")
    lam = demand(p)
    if lam <= 0:
        raise InvalidInputError(f"demand rate must be positive, got {lam}")
    w = max(state.w + v / mu - u / lam, 0.0)
    x = state.x + u / lam if w > 0 else 0.0
    return QueueState(w=w, x=x, n=state.n + 1)


# ---------------------------------------------------------------------------
# unit-mean positive laws for interarrival and service draws
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ServiceLaw:
    """A positive random variable with known mean and variance."""

    name: str
    mean: float
    var: float
    _sampler: Callable[..., np.ndarray] = field(repr=False)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return self._sampler(rng, size)


def exponential_service() -> ServiceLaw:
    return ServiceLaw("exponential", 1.0, 1.0, lambda rng, size: rng.standard_exponential(size))


def erlang_service(shape: int = 10) -> ServiceLaw:
    """Sum of `shape` exponentials scaled to unit mean; variance 1/shape."""
    if shape < 1:
        raise ValueError("shape must be >= 1")

    def sampler(rng, size, k=shape):
        return rng.gamma(k, 1.0 / k, size)

    return ServiceLaw("erlang", 1.0, 1.0 / shape, sampler)


def hyperexp_service(rate_scale: float = 0.155, components: int = 10) -> ServiceLaw:
    """Equal-weight mixture of exponentials with rates rate_scale * i^2.

    Heavy-variance menu entry: at the defaults the mean is 0.9998 and the
    variance about 8.01, both computed exactly from the rates.
    """
    rates = rate_scale * np.arange(1, components + 1, dtype=float) ** 2
    mean = float(np.mean(1.0 / rates))
    second = float(np.mean(2.0 / rates**2))

    def sampler(rng, size, rates=rates):
        comp = rng.integers(0, len(rates), size=size)
        return rng.standard_exponential(size) / rates[comp]

    return ServiceLaw("hyperexp", mean, second - mean**2, sampler)


_SERVICE_MENU = {
    "exponential": exponential_service,
    "erlang": erlang_service,
    "hyperexp": hyperexp_service,
}


def make_service_law(name: str) -> ServiceLaw:
    try:
        return _SERVICE_MENU[name]()
    except KeyError:
        raise InvalidInputError(
            f"unknown service law {name!r}; choose from {sorted(_SERVICE_MENU)}"
        ) from None


# ---------------------------------------------------------------------------
# the oracle
# ---------------------------------------------------------------------------

class QueueInstance(BiasedOracle):
    """Single-server pricing/staffing instance (see module docstring)."""

    dim = 2
    max_level = 16

    def __init__(
        self,
        service: ServiceLaw | None = None,
        interarrival: ServiceLaw | None = None,
        h0: float = 1.0,
        c0: float = 0.1,
        demand_scale: float = 10.0,
        demand_offset: float = 0.1,
        revenue: bool = True,
        warmup: int = 64,
        box: tuple[tuple[float, float], tuple[float, float]] = ((1.8, 15.0), (1.8, 15.0)),
        law: RateLaw | None = None,
        name: str = "queue",
        x1_default: tuple[float, float] = (9.0, 9.0),
    ):
        self.service = service if service is not None else exponential_service()
        self.interarrival = interarrival if interarrival is not None else exponential_service()
        if warmup < 1:
            raise ValueError("warmup must be >= 1")
        self.h0 = float(h0)
        self.c0 = float(c0)
        self.demand_scale = float(demand_scale)
        self.demand_offset = float(demand_offset)
        self.revenue = bool(revenue)
        self.warmup = int(warmup)
        # smallest power-of-two window that clears the warm-up with room to
        # smallest power of two whose coarse half still clears the warm-up
        self.base_window = 1 << math.ceil(math.log2(2 * warmup))
        self.lo = np.array([box[0][0], box[1][0]], dtype=float)
        self.hi = np.array([box[0][1], box[1][1]], dtype=float)
        if np.any(self.lo <= 0) or np.any(self.lo >= self.hi):
            raise ValueError("domain box must satisfy 0 < low < high per coordinate")
        if law is None:
            # scale constants cover the moderate-traffic region (load < 0.7)
            # where the benchmarks operate; near the corner of the box the
            # relaxation time blows up and no practical envelope holds
            law = RateLaw(a=1.0, b=1.0, c=1.0, M_a=4.0, M_b=64.0,
                          M_c=float(self.base_window), sigma2=64.0)
        if law.M_c != self.base_window or law.c != 1.0:
            raise ValueError("cost law must charge base_window * 2^level recursion steps")
        self.law = law
        self.name = name
        self.x1_default = np.asarray(x1_default, dtype=float)
        self._solution_cache: tuple[np.ndarray, float] | None = None

    # -- model pieces -------------------------------------------------------

    def arrival_rate(self, p):
        return logistic_demand(p, self.demand_scale, self.demand_offset)

    def arrival_rate_prime(self, p):
        return logistic_demand_prime(p, self.demand_scale, self.demand_offset)

    def staffing_cost(self, mu):
        return self.c0 * mu**2

    def staffing_cost_prime(self, mu):
        return 2.0 * self.c0 * mu

    def load(self, mu: float, p: float) -> float:
        """Traffic intensity rho = lam(p)/mu under unit-mean normalization."""
        return float(self.arrival_rate(p)) / mu

    def project(self, x: np.ndarray) -> np.ndarray:
        """Clip a point to the domain box (used as the optimizer projection)."""
        return np.clip(np.asarray(x, dtype=float), self.lo, self.hi)

    def level_for_steps(self, n_steps: int) -> int:
        """Oracle level whose trajectory is exactly n_steps recursion steps."""
        ratio = n_steps // self.base_window
        if n_steps != self.base_window * ratio or ratio < 1 or ratio & (ratio - 1):
            raise ValueError(
                f"n_steps must be base_window * 2^level with base_window = {self.base_window}"
            )
        return ratio.bit_length() - 1

    def _check_domain(self, mu: float, p: float) -> None:
        if not (math.isfinite(mu) and math.isfinite(p)):
            raise InvalidInputError(f"non-finite point (mu, p) = ({mu}, {p})")
        if not (self.lo[0] <= mu <= self.hi[0] and self.lo[1] <= p <= self.hi[1]):
            raise InvalidInputError(
                f"(mu, p) = ({mu:.4g}, {p:.4g}) outside the domain box "
                f"[{self.lo[0]}, {self.hi[0]}] x [{self.lo[1]}, {self.hi[1]}]"
            )
        if self.arrival_rate(p) >= mu:
            raise UnstableRegimeError(
                f"demand {self.arrival_rate(p):.4g} >= capacity {mu:.4g}: no steady state"
            )

    # -- vectorized recursion -------------------------------------------------

    def _window_sums(self, points, rng, n, n_steps, marks):
        """Simulate n trajectories of n_steps shared-randomness steps.

        points: (mu, p) pairs all driven by the same raw (U, V) draws.
        marks: increasing 1-based step indices at which to capture the
        running sum of (W_j + X_j) over warmup < j <= mark.
        Returns one (n, len(marks)) array per point.
        """
        m = self.warmup
        lams = [float(self.arrival_rate(p)) for _, p in points]
        mus = [float(mu) for mu, _ in points]
        W = [np.zeros(n) for _ in points]
        X = [np.zeros(n) for _ in points]
        run = [np.zeros(n) for _ in points]
        out = [np.zeros((n, len(marks))) for _ in points]
        chunk = max(1, _CHUNK_ELEMS // max(n, 1))
        s = 0
        while s < n_steps:
            e = min(s + chunk, n_steps)
            u_raw = self.interarrival.sample(rng, (n, e - s))
            v_raw = self.service.sample(rng, (n, e - s))
            keep = None
            if s + 1 <= m:
                keep = np.arange(s + 1, e + 1) > m
            for i in range(len(points)):
                gap = v_raw / mus[i] - u_raw / lams[i]
                T = np.cumsum(gap, axis=1)
                # W_j = max(W_start + T_j, max_{k<=j}(T_j - T_k)); the k = j
                # term is the exact 0.0 that marks an emptied queue
                Wc = np.maximum(W[i][:, None] + T, T - np.minimum.accumulate(T, axis=1))
                cu = np.cumsum(u_raw / lams[i], axis=1)
                # X resets at every exact zero of W; between resets it is the
                # interarrival cumsum minus its value at the last reset
                zero_at = np.where(Wc == 0.0, X[i][:, None] + cu, -np.inf)
                peak = np.maximum(np.maximum.accumulate(zero_at, axis=1), 0.0)
                Xc = X[i][:, None] + cu - peak
                G = Wc + Xc
                if keep is not None:
                    G = G * keep
                sums = np.cumsum(G, axis=1)
                for k, mark in enumerate(marks):
                    if s < mark <= e:
                        out[i][:, k] = run[i] + sums[:, mark - s - 1]
                run[i] += sums[:, -1]
                W[i] = Wc[:, -1].copy()
                X[i] = Xc[:, -1].copy()
            s = e
        return out

    # -- gradient reads -------------------------------------------------------

    def _stat_scale(self, mu: float, p: float) -> np.ndarray:
        """Coefficients of the window mean in (d/dmu, d/dp)."""
        lam = self.arrival_rate(p)
        return np.array([-self.h0 * lam / mu, self.h0 * self.arrival_rate_prime(p)])

    def _grad_from_stat(self, mu: float, p: float, g: np.ndarray) -> np.ndarray:
        lam = self.arrival_rate(p)
        dlam = self.arrival_rate_prime(p)
        bracket = g + 1.0 / mu
        d_mu = self.staffing_cost_prime(mu) - self.h0 * (lam / mu) * bracket
        d_p = self.h0 * dlam * bracket
        if self.revenue:
            d_p = d_p - lam - p * dlam
        return np.stack([d_mu, d_p], axis=1)

    def query_batch(self, level, x, rng, n):
        self.check_level(level)
        x = self.validate_point(x)
        mu, p = float(x[0]), float(x[1])
        self._check_domain(mu, p)
        n_steps = self.base_window * 2**level
        marks = (n_steps,) if level == 0 else (n_steps // 2, n_steps)
        sums = self._window_sums([(mu, p)], rng, n, n_steps, marks)[0]
        g_fine = sums[:, -1] / (n_steps - self.warmup)
        h = self._grad_from_stat(mu, p, g_fine)
        if level == 0:
            H = h.copy()
        else:
            g_coarse = sums[:, 0] / (n_steps // 2 - self.warmup)
            H = np.outer(g_fine - g_coarse, self._stat_scale(mu, p))
        return QueryBatch(h=h, H=H, cost_per_query=float(n_steps))

    def query_pair_batch(self, level, x_new, x_old, rng, n):
        self.check_level(level)
        pts = []
        for x in (x_new, x_old):
            x = self.validate_point(x)
            mu, p = float(x[0]), float(x[1])
            self._check_domain(mu, p)
            pts.append((mu, p))
        n_steps = self.base_window * 2**level
        marks = (n_steps,) if level == 0 else (n_steps // 2, n_steps)
        all_sums = self._window_sums(pts, rng, n, n_steps, marks)
        out = []
        for (mu, p), sums in zip(pts, all_sums):
            g_fine = sums[:, -1] / (n_steps - self.warmup)
            h = self._grad_from_stat(mu, p, g_fine)
            if level == 0:
                H = h.copy()
            else:
                g_coarse = sums[:, 0] / (n_steps // 2 - self.warmup)
                H = np.outer(g_fine - g_coarse, self._stat_scale(mu, p))
            out.append(QueryBatch(h=h, H=H, cost_per_query=float(n_steps)))
        return out[0], out[1]

    # -- closed forms (M/G/1 only) -------------------------------------------

    def _require_pk(self) -> None:
        if self.interarrival.name != "exponential":
            raise NotImplementedError(
                "closed forms need exponential interarrivals (M/G/1)"
            )

    def _mean_in_system(self, rho):
        s2 = self.service.var
        return rho + rho**2 * (1.0 + s2) / (2.0 * (1.0 - rho))

    def _mean_in_system_prime(self, rho):
        s2 = self.service.var
        return 1.0 + (1.0 + s2) / 2.0 * rho * (2.0 - rho) / (1.0 - rho) ** 2

    def value_truth(self, x):
        self._require_pk()
        x = self.validate_point(x)
        mu, p = float(x[0]), float(x[1])
        lam = float(self.arrival_rate(p))
        rho = lam / mu
        if rho >= 1.0:
            raise UnstableRegimeError(f"rho = {rho:.4g} >= 1: objective undefined")
        val = self.h0 * self._mean_in_system(rho) + self.staffing_cost(mu)
        if self.revenue:
            val -= p * lam
        return float(val)

    def value_truth_grid(
        self, mu_vals: np.ndarray, p_vals: np.ndarray, mask_unstable: bool = False
    ) -> np.ndarray:
        """Objective on a (mu, p) product grid; rows index mu, columns p.

        With mask_unstable the cells at rho >= 1 come back as +inf (so a
        grid minimizer skips them); otherwise any unstable cell raises.
        """
        self._require_pk()
        mu = np.asarray(mu_vals, dtype=float)[:, None]
        lam = np.asarray(self.arrival_rate(np.asarray(p_vals, dtype=float)))[None, :]
        rho = lam / mu
        unstable = rho >= 1.0
        if np.any(unstable) and not mask_unstable:
            raise UnstableRegimeError("grid contains points with rho >= 1")
        with np.errstate(divide="ignore", invalid="ignore"):
            val = self.h0 * self._mean_in_system(rho) + self.staffing_cost(mu)
            if self.revenue:
                val = val - np.asarray(p_vals, dtype=float)[None, :] * lam
        val = np.where(unstable, np.inf, val)
        return val

    def grad_truth(self, x):
        self._require_pk()
        x = self.validate_point(x)
        mu, p = float(x[0]), float(x[1])
        lam = float(self.arrival_rate(p))
        dlam = float(self.arrival_rate_prime(p))
        rho = lam / mu
        if rho >= 1.0:
            raise UnstableRegimeError(f"rho = {rho:.4g} >= 1: objective undefined")
        lp = self._mean_in_system_prime(rho)
        d_mu = self.staffing_cost_prime(mu) - self.h0 * lp * lam / mu**2
        d_p = self.h0 * lp * dlam / mu
        if self.revenue:
            d_p = d_p - lam - p * dlam
        return np.array([d_mu, d_p])

    def solution(self):
        if self._solution_cache is None:
            self._require_pk()
            mu_g = np.linspace(self.lo[0], self.hi[0], 161)
            p_g = np.linspace(self.lo[1], self.hi[1], 161)
            vals = self.value_truth_grid(mu_g, p_g)
            i, j = np.unravel_index(np.argmin(vals), vals.shape)
            res = minimize(
                lambda z: self.value_truth(z),
                np.array([mu_g[i], p_g[j]]),
                jac=lambda z: self.grad_truth(z),
                method="L-BFGS-B",
                bounds=[(self.lo[0], self.hi[0]), (self.lo[1], self.hi[1])],
            )
            self._solution_cache = (np.asarray(res.x), float(res.fun))
        return self._solution_cache

    def has_truth(self, kind):
        if self.interarrival.name != "exponential":
            return False
        return super().has_truth(kind)


def queue_f2(service: str = "exponential") -> QueueInstance:
    """The shipped pricing/staffing configuration: logistic demand
    (scale 10, offset 0.1), c(mu) = 0.1 mu^2, h0 = 1, start (9, 9),
    conservative declared rates a = b = c = 1."""
    return QueueInstance(service=make_service_law(service), name="queue_f2")
