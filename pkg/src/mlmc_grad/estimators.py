"""Gradient estimators over a biased multilevel oracle.

Five constructions, one shared idea: write grad F^L as the telescoping sum
of level differences and spend queries where they are cheap.

    lsgd    single-level mini-batch mean of h^L                (biased, pricey)
    vmlmc   per-level batched means of H^l, l = 0..L           (batch sizes shrink with l)
    rtmlmc  one random level per estimate, importance-weighted (single query)
    rumlmc  geometric level law with no truncation             (unbiased for grad F)
    rrmlmc  geometric truncation, ALL levels below it queried  (unbiased for grad F)

The infinite-law pair (rumlmc, rrmlmc) exists only when the oracle's
variance decays strictly faster than its cost grows (b > c); otherwise the
estimator variance or expected cost diverges and construction refuses.
"""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InapplicableEstimatorError, LevelOverflowError
from .oracle import BiasedOracle, QueryBatch, RateLaw

__all__ = [
    "r_sum",
    "r_sum_inf",
    "truncated_level_law",
    "GeometricLevelLaw",
    "batch_sizes",
    "GradientEstimate",
    "EstimateBatch",
    "GradientEstimator",
    "LsgdEstimator",
    "VmlmcEstimator",
    "RtmlmcEstimator",
    "RumlmcEstimator",
    "RrmlmcEstimator",
    "make_estimator",
    "ESTIMATOR_KINDS",
]


# ---------------------------------------------------------------------------
# geometric partial sums
# ---------------------------------------------------------------------------

def r_sum(alpha: float, L: int) -> float:
    """Closed form of sum_{l=0}^{L} 2^(alpha*l).

    alpha = 0 is rejected: the closed form degenerates and the sum is
    simply L + 1, which callers handle on their branch.
    """
    if L < 0:
        raise ValueError("L must be >= 0")
    if alpha == 0:
        raise ValueError("alpha = 0: the sum is L + 1; handle it at the call site")
    return (1.0 - 2.0 ** (alpha * (L + 1))) / (1.0 - 2.0**alpha)


def r_sum_inf(alpha: float) -> float:
    """Closed form of sum_{l=0}^{inf} 2^(alpha*l); requires alpha < 0."""
    if alpha >= 0:
        raise ValueError("the infinite sum converges only for alpha < 0")
    return 1.0 / (1.0 - 2.0**alpha)


def _r_sum_or_count(alpha: float, L: int) -> float:
    """r_sum with the alpha = 0 branch resolved to L + 1."""
    return float(L + 1) if alpha == 0 else r_sum(alpha, L)


# ---------------------------------------------------------------------------
# level laws
# ---------------------------------------------------------------------------

def truncated_level_law(b: float, c: float, L: int) -> np.ndarray:
    """Cost/variance-balancing distribution on levels 0..L.

    q_l proportional to 2^(-(b+c)l/2), normalized exactly. This choice
    minimizes (variance x expected cost) over all level distributions.
    """
    if L < 0:
        raise ValueError("L must be >= 0")
    w = 2.0 ** (-(b + c) / 2.0 * np.arange(L + 1))
    return w / w.sum()


@dataclass(frozen=True)
class GeometricLevelLaw:
    """Unbounded level distribution q_l = (1 - r) r^l with r = 2^(-(b+c)/2).

    Well defined for any b + c > 0, but the estimators built on it are only
    admissible when b > c; admissibility is checked by the estimator, not
    here, so the law itself can be probed in tests.
    """

    b: float
    c: float

    @property
    def ratio(self) -> float:
        return 2.0 ** (-(self.b + self.c) / 2.0)

    def pmf(self, level: int | np.ndarray) -> np.ndarray | float:
        r = self.ratio
        return (1.0 - r) * r**np.asarray(level, dtype=float)

    def survivor(self, level: int | np.ndarray) -> np.ndarray | float:
        """P(draw >= level); equals r^level."""
        return self.ratio ** np.asarray(level, dtype=float)

    def sample(self, rng: np.random.Generator, n: int, max_level: int) -> np.ndarray:
        """Draw n levels by inversion; a draw past max_level is an error.

        P(overflow) = r^(max_level+1) per draw -- about 2^-46 at the cap for
        b+c = 3 -- so failing loudly costs nothing and silently clipping
        would quietly break unbiasedness.
        """
        u = rng.random(n)
        # inversion of the survivor function: K = floor(log_r(u))
        with np.errstate(divide="ignore"):
            k = np.floor(np.log(u) / math.log(self.ratio)).astype(np.int64)
        if np.any(k > max_level):
            raise LevelOverflowError(
                f"geometric level draw exceeded the cap {max_level}; "
                "the truncation-free estimators cannot honor this draw"
            )
        return k


def batch_sizes(b: float, c: float, L: int, N: float) -> np.ndarray:
    """Per-level batch sizes n_l = ceil(2^(-(b+c)l/2) N) for levels 0..L."""
    if N <= 0:
        raise ValueError("N must be positive")
    w = 2.0 ** (-(b + c) / 2.0 * np.arange(L + 1))
    return np.ceil(w * N).astype(np.int64)


# ---------------------------------------------------------------------------
# estimates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradientEstimate:
    grad: np.ndarray
    cost: float
    level_min: int
    level_max: int


@dataclass(frozen=True)
class EstimateBatch:
    """n independent gradient estimates with their individual costs."""

    grads: np.ndarray  # (n, dim)
    costs: np.ndarray  # (n,)

    @property
    def n(self) -> int:
        return self.grads.shape[0]

    @property
    def total_cost(self) -> float:
        return float(self.costs.sum())


class GradientEstimator(abc.ABC):
    """One gradient-estimation scheme bound to an oracle."""

    kind: str

    def __init__(self, oracle: BiasedOracle):
        self.oracle = oracle

    # -- construction of estimates ---------------------------------------

    @abc.abstractmethod
    def estimate_batch(self, x: np.ndarray, rng: np.random.Generator, n: int) -> EstimateBatch:
        """n independent estimates at x (vectorized over replications)."""

    def estimate(self, x: np.ndarray, rng: np.random.Generator) -> GradientEstimate:
        eb = self.estimate_batch(x, rng, 1)
        lo, hi = self.level_range()
        return GradientEstimate(grad=eb.grads[0], cost=float(eb.costs[0]), level_min=lo, level_max=hi)

    @abc.abstractmethod
    def estimate_pair_batch(
        self, x_new: np.ndarray, x_old: np.ndarray, rng: np.random.Generator, n: int
    ) -> tuple[EstimateBatch, EstimateBatch]:
        """n coupled estimate pairs: same levels AND same oracle realizations
        evaluated at both points. Costs are charged per evaluation, so each
        estimate's cost doubles relative to `estimate_batch`."""

    # -- analytic accounting ----------------------------------------------

    @abc.abstractmethod
    def expected_cost(self) -> float:
        """Exact expected cost of one estimate, in oracle cost units."""

    @abc.abstractmethod
    def max_cost(self) -> float:
        """Worst-case cost of one estimate (drives the strict budget rule)."""

    @abc.abstractmethod
    def variance_bound(self) -> float:
        """Upper bound on E||v - Ev||^2 under the oracle's declared law."""

    @abc.abstractmethod
    def level_range(self) -> tuple[int, int]:
        """(lowest, highest) level this estimator can touch."""

    @property
    def law(self) -> RateLaw:
        return self.oracle.law

    def __repr__(self) -> str:  # pragma: no cover - debugging sugar
        return f"{type(self).__name__}({self.oracle.name})"


# ---------------------------------------------------------------------------
# single level: biased baseline
# ---------------------------------------------------------------------------

class LsgdEstimator(GradientEstimator):
    """Mini-batch mean of h^L queries at the single top level L."""

    kind = "lsgd"

    def __init__(self, oracle: BiasedOracle, level: int, batch: int = 1):
        super().__init__(oracle)
        oracle.check_level(level)
        if batch < 1:
            raise ValueError("batch must be >= 1")
        self.level = int(level)
        self.batch = int(batch)

    def estimate_batch(self, x, rng, n):
        qb = self.oracle.query_batch(self.level, x, rng, n * self.batch)
        grads = qb.h.reshape(n, self.batch, -1).mean(axis=1)
        costs = np.full(n, self.batch * qb.cost_per_query)
        return EstimateBatch(grads=grads, costs=costs)

    def estimate_pair_batch(self, x_new, x_old, rng, n):
        qb_new, qb_old = self.oracle.query_pair_batch(self.level, x_new, x_old, rng, n * self.batch)
        g_new = qb_new.h.reshape(n, self.batch, -1).mean(axis=1)
        g_old = qb_old.h.reshape(n, self.batch, -1).mean(axis=1)
        costs = np.full(n, 2.0 * self.batch * qb_new.cost_per_query)
        return EstimateBatch(g_new, costs), EstimateBatch(g_old, np.zeros(n))

    def expected_cost(self):
        return self.batch * self.oracle.cost_of_level(self.level)

    max_cost = expected_cost

    def variance_bound(self):
        return self.law.sigma2 / self.batch

    def level_range(self):
        return (self.level, self.level)


# ---------------------------------------------------------------------------
# batched telescope
# ---------------------------------------------------------------------------

class VmlmcEstimator(GradientEstimator):
    """Sum over levels of batched means of H^l with shrinking batches.

    Batch sizes n_l = ceil(2^(-(b+c)l/2) N). The ceiling makes every level
    cost at least one query, which is why this scheme only pays off with a
    large N; the rounding surcharge is visible in `expected_cost`.
    """

    kind = "vmlmc"

    def __init__(self, oracle: BiasedOracle, level: int, N: float):
        super().__init__(oracle)
        oracle.check_level(level)
        self.level = int(level)
        self.N = float(N)
        self.n_l = batch_sizes(self.law.b, self.law.c, self.level, self.N)

    def estimate_batch(self, x, rng, n):
        d = self.oracle.dim
        grads = np.zeros((n, d))
        cost = 0.0
        for l, nl in enumerate(self.n_l):
            qb = self.oracle.query_batch(l, x, rng, n * int(nl))
            grads += qb.H.reshape(n, int(nl), d).mean(axis=1)
            cost += nl * qb.cost_per_query
        return EstimateBatch(grads=grads, costs=np.full(n, cost))

    def estimate_pair_batch(self, x_new, x_old, rng, n):
        d = self.oracle.dim
        g_new = np.zeros((n, d))
        g_old = np.zeros((n, d))
        cost = 0.0
        for l, nl in enumerate(self.n_l):
            qb_n, qb_o = self.oracle.query_pair_batch(l, x_new, x_old, rng, n * int(nl))
            g_new += qb_n.H.reshape(n, int(nl), d).mean(axis=1)
            g_old += qb_o.H.reshape(n, int(nl), d).mean(axis=1)
            cost += 2.0 * nl * qb_n.cost_per_query
        return EstimateBatch(g_new, np.full(n, cost)), EstimateBatch(g_old, np.zeros(n))

    def expected_cost(self):
        return float(sum(int(nl) * self.oracle.cost_of_level(l) for l, nl in enumerate(self.n_l)))

    max_cost = expected_cost

    def variance_bound(self):
        law = self.law
        return law.M_b * _r_sum_or_count((law.c - law.b) / 2.0, self.level) / self.N

    def level_range(self):
        return (0, self.level)


# ---------------------------------------------------------------------------
# randomized single level
# ---------------------------------------------------------------------------

class RtmlmcEstimator(GradientEstimator):
    """Draw one level from the truncated law, return H^l / q_l."""

    kind = "rtmlmc"

    def __init__(self, oracle: BiasedOracle, level: int):
        super().__init__(oracle)
        oracle.check_level(level)
        self.level = int(level)
        self.q = truncated_level_law(self.law.b, self.law.c, self.level)

    def _scatter(self, levels: np.ndarray, x, rng, n, weights: np.ndarray) -> EstimateBatch:
        d = self.oracle.dim
        grads = np.empty((n, d))
        costs = np.empty(n)
        for l in range(self.level + 1):
            idx = np.nonzero(levels == l)[0]
            if idx.size == 0:
                continue
            qb = self.oracle.query_batch(l, x, rng, idx.size)
            grads[idx] = qb.H / weights[l]
            costs[idx] = qb.cost_per_query
        return EstimateBatch(grads=grads, costs=costs)

    def estimate_batch(self, x, rng, n):
        levels = rng.choice(self.level + 1, size=n, p=self.q)
        return self._scatter(levels, x, rng, n, self.q)

    def estimate_pair_batch(self, x_new, x_old, rng, n):
        d = self.oracle.dim
        levels = rng.choice(self.level + 1, size=n, p=self.q)
        g_new = np.empty((n, d))
        g_old = np.empty((n, d))
        costs = np.empty(n)
        for l in range(self.level + 1):
            idx = np.nonzero(levels == l)[0]
            if idx.size == 0:
                continue
            qb_n, qb_o = self.oracle.query_pair_batch(l, x_new, x_old, rng, idx.size)
            g_new[idx] = qb_n.H / self.q[l]
            g_old[idx] = qb_o.H / self.q[l]
            costs[idx] = 2.0 * qb_n.cost_per_query
        return EstimateBatch(g_new, costs), EstimateBatch(g_old, np.zeros(n))

    def expected_cost(self):
        C = np.array([self.oracle.cost_of_level(l) for l in range(self.level + 1)])
        return float(self.q @ C)

    def max_cost(self):
        return self.oracle.cost_of_level(self.level)

    def variance_bound(self):
        law = self.law
        half = (law.b + law.c) / 2.0
        return law.M_b * _r_sum_or_count((law.c - law.b) / 2.0, self.level) * r_sum(-half, self.level)

    def level_range(self):
        return (0, self.level)


# ---------------------------------------------------------------------------
# truncation-free randomized estimators (require b > c)
# ---------------------------------------------------------------------------

def _require_fast_variance_decay(law: RateLaw, kind: str, force: bool) -> None:
    if law.b > law.c or force:
        return
    raise InapplicableEstimatorError(
        f"{kind} needs variance decaying strictly faster than cost grows "
        f"(b > c); this oracle declares b = {law.b}, c = {law.c}. "
        "Expected cost or variance would diverge."
    )


class RumlmcEstimator(GradientEstimator):
    """Geometric level draw, H^l / q_l, no truncation: unbiased for grad F."""

    kind = "rumlmc"

    def __init__(self, oracle: BiasedOracle, force: bool = False):
        super().__init__(oracle)
        _require_fast_variance_decay(oracle.law, self.kind, force)
        self.glaw = GeometricLevelLaw(self.law.b, self.law.c)

    def estimate_batch(self, x, rng, n):
        d = self.oracle.dim
        levels = self.glaw.sample(rng, n, self.oracle.max_level)
        grads = np.empty((n, d))
        costs = np.empty(n)
        for l in range(int(levels.max()) + 1):
            idx = np.nonzero(levels == l)[0]
            if idx.size == 0:
                continue
            qb = self.oracle.query_batch(l, x, rng, idx.size)
            grads[idx] = qb.H / self.glaw.pmf(l)
            costs[idx] = qb.cost_per_query
        return EstimateBatch(grads=grads, costs=costs)

    def estimate_pair_batch(self, x_new, x_old, rng, n):
        d = self.oracle.dim
        levels = self.glaw.sample(rng, n, self.oracle.max_level)
        g_new = np.empty((n, d))
        g_old = np.empty((n, d))
        costs = np.empty(n)
        for l in range(int(levels.max()) + 1):
            idx = np.nonzero(levels == l)[0]
            if idx.size == 0:
                continue
            qb_n, qb_o = self.oracle.query_pair_batch(l, x_new, x_old, rng, idx.size)
            g_new[idx] = qb_n.H / self.glaw.pmf(l)
            g_old[idx] = qb_o.H / self.glaw.pmf(l)
            costs[idx] = 2.0 * qb_n.cost_per_query
        return EstimateBatch(g_new, costs), EstimateBatch(g_old, np.zeros(n))

    def expected_cost(self):
        # sum_l q_l M_c 2^(cl) in closed form
        law = self.law
        return law.M_c * r_sum_inf((law.c - law.b) / 2.0) / r_sum_inf(-(law.b + law.c) / 2.0)

    def max_cost(self):
        return self.oracle.cost_of_level(self.oracle.max_level)

    def variance_bound(self):
        law = self.law
        return law.M_b * r_sum_inf((law.c - law.b) / 2.0) * r_sum_inf(-(law.b + law.c) / 2.0)

    def level_range(self):
        return (0, self.oracle.max_level)


class RrmlmcEstimator(GradientEstimator):
    """Geometric truncation level; ALL levels up to it queried independently,
    each weighted by the inverse survivor probability. Unbiased for grad F.

    Unlike the coupled telescope, every level difference here comes from its
    own fresh realization; the unbiasedness needs independence of the level
    draw from the queries, not coupling across levels.
    """

    kind = "rrmlmc"

    def __init__(self, oracle: BiasedOracle, force: bool = False):
        super().__init__(oracle)
        _require_fast_variance_decay(oracle.law, self.kind, force)
        self.glaw = GeometricLevelLaw(self.law.b, self.law.c)

    def _costs_through(self, levels: np.ndarray) -> np.ndarray:
        top = int(levels.max())
        C = np.array([self.oracle.cost_of_level(l) for l in range(top + 1)])
        return np.cumsum(C)[levels]

    def estimate_batch(self, x, rng, n):
        d = self.oracle.dim
        levels = self.glaw.sample(rng, n, self.oracle.max_level)
        grads = np.zeros((n, d))
        for l in range(int(levels.max()) + 1):
            idx = np.nonzero(levels >= l)[0]
            qb = self.oracle.query_batch(l, x, rng, idx.size)
            grads[idx] += qb.H / self.glaw.survivor(l)
        return EstimateBatch(grads=grads, costs=self._costs_through(levels).astype(float))

    def estimate_pair_batch(self, x_new, x_old, rng, n):
        d = self.oracle.dim
        levels = self.glaw.sample(rng, n, self.oracle.max_level)
        g_new = np.zeros((n, d))
        g_old = np.zeros((n, d))
        for l in range(int(levels.max()) + 1):
            idx = np.nonzero(levels >= l)[0]
            qb_n, qb_o = self.oracle.query_pair_batch(l, x_new, x_old, rng, idx.size)
            g_new[idx] += qb_n.H / self.glaw.survivor(l)
            g_old[idx] += qb_o.H / self.glaw.survivor(l)
        costs = 2.0 * self._costs_through(levels)
        return EstimateBatch(g_new, costs), EstimateBatch(g_old, np.zeros(n))

    def expected_cost(self):
        # sum_l P(K >= l) M_c 2^(cl) = M_c / (1 - 2^((c-b)/2)), exactly
        law = self.law
        return law.M_c * r_sum_inf((law.c - law.b) / 2.0)

    def max_cost(self):
        C = sum(self.oracle.cost_of_level(l) for l in range(self.oracle.max_level + 1))
        return float(C)

    def variance_bound(self):
        law = self.law
        return law.M_b * r_sum_inf((law.c - law.b) / 2.0)

    def level_range(self):
        return (0, self.oracle.max_level)


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

ESTIMATOR_KINDS = ("lsgd", "vmlmc", "rtmlmc", "rumlmc", "rrmlmc")


def make_estimator(
    kind: str,
    oracle: BiasedOracle,
    level: int | None = None,
    N: float | None = None,
    batch: int = 1,
    force: bool = False,
) -> GradientEstimator:
    """Build an estimator by kind string (CLI/config surface)."""
    kind = kind.lower().replace("-", "").replace("_", "")
    if kind in ("lsgd", "sgd"):
        if level is None:
            raise ConfigError("lsgd needs a level")
        return LsgdEstimator(oracle, level, batch=batch)
    if kind == "vmlmc":
        if level is None or N is None:
            raise ConfigError("vmlmc needs a level and a batch scale N")
        return VmlmcEstimator(oracle, level, N)
    if kind == "rtmlmc":
        if level is None:
            raise ConfigError("rtmlmc needs a level")
        return RtmlmcEstimator(oracle, level)
    if kind == "rumlmc":
        return RumlmcEstimator(oracle, force=force)
    if kind == "rrmlmc":
        return RrmlmcEstimator(oracle, force=force)
    raise ConfigError(f"unknown estimator kind {kind!r}; expected one of {ESTIMATOR_KINDS}")
