"""Biased stochastic-oracle abstraction.

An oracle of level l answers gradient queries about a surrogate objective
F^l whose distance from the true objective F shrinks as l grows:

    squared gradient bias  <= M_a * 2^(-a l)
    Var(H^l)               <= M_b * 2^(-b l)
    cost of one query       = M_c * 2^(+c l)

Each query returns a coupled pair (h, H) built from one simulated
realization: h estimates grad F^l, H estimates grad F^l - grad F^(l-1)
(with H := h at level 0, the base of the telescope). The coupling is what
makes multilevel estimators cheap; it is part of the contract, not an
implementation detail.
"""

from __future__ import annotations

import abc
import math
import threading
from dataclasses import dataclass

import numpy as np

from .errors import LevelOverflowError

__all__ = ["RateLaw", "OracleOutput", "QueryBatch", "BiasedOracle", "CostMeter"]

# Hard ceiling on any level anywhere; 2^30 cost units per query is already
# beyond desk scale, and float64 handles 2^(c*30) exactly for c <= 1.
MAX_LEVEL_CAP = 30


@dataclass(frozen=True)
class RateLaw:
    """Declared bias/variance/cost exponents and constants of an oracle."""

    a: float
    b: float
    c: float
    M_a: float = 1.0
    M_b: float = 1.0
    M_c: float = 1.0
    sigma2: float = 1.0  # uniform bound on Var(h^l)

    def __post_init__(self):
        if min(self.a, self.b, self.c) <= 0:
            raise ValueError("rate exponents a, b, c must be positive")
        if min(self.M_a, self.M_b, self.M_c, self.sigma2) <= 0:
            raise ValueError("rate constants must be positive")

    def bias_bound(self, level: int) -> float:
        return self.M_a * 2.0 ** (-self.a * level)

    def variance_bound(self, level: int) -> float:
        return self.M_b * 2.0 ** (-self.b * level)

    def cost_of_level(self, level: int) -> float:
        return self.M_c * 2.0 ** (self.c * level)


@dataclass(frozen=True)
class OracleOutput:
    """One coupled query: h estimates grad F^l, H the level difference."""

    h: np.ndarray
    H: np.ndarray
    cost: float


@dataclass(frozen=True)
class QueryBatch:
    """`n` independent coupled queries at one level, stacked row-wise."""

    h: np.ndarray  # shape (n, dim)
    H: np.ndarray  # shape (n, dim)
    cost_per_query: float

    @property
    def n(self) -> int:
        return self.h.shape[0]

    @property
    def total_cost(self) -> float:
        return self.cost_per_query * self.n


class BiasedOracle(abc.ABC):
    """Instance contract: vectorized coupled queries plus rate metadata.

    Subclasses must be immutable after construction and side-effect free
    given the generator: two oracles built with the same parameters and
    queried with identically-seeded generators return identical arrays.
    """

    dim: int
    law: RateLaw
    name: str = "oracle"
    max_level: int = MAX_LEVEL_CAP

    @abc.abstractmethod
    def query_batch(
        self, level: int, x: np.ndarray, rng: np.random.Generator, n: int
    ) -> QueryBatch:
        """Draw `n` independent realizations of (h^level, H^level) at x."""

    def query(self, level: int, x: np.ndarray, rng: np.random.Generator) -> OracleOutput:
        qb = self.query_batch(level, x, rng, 1)
        return OracleOutput(h=qb.h[0], H=qb.H[0], cost=qb.cost_per_query)

    def query_pair_batch(
        self,
        level: int,
        x_new: np.ndarray,
        x_old: np.ndarray,
        rng: np.random.Generator,
        n: int,
    ) -> tuple[QueryBatch, QueryBatch]:
        """Evaluate the SAME `n` realizations at two points.

        Required by the variance-reduced framework: the correction term
        must difference a common random realization across x_new and x_old.
        Both evaluations are charged (2 * n * C_level in total).
        """
        raise NotImplementedError(f"{type(self).__name__} has no coupled two-point evaluation")

    # -- metadata ---------------------------------------------------------

    def cost_of_level(self, level: int) -> float:
        self.check_level(level)
        return self.law.cost_of_level(level)

    def check_level(self, level: int) -> None:
        if not isinstance(level, (int, np.integer)):
            raise TypeError(f"level must be an integer, got {type(level).__name__}")
        if level < 0:
            raise LevelOverflowError(f"negative level {level}")
        if level > self.max_level:
            raise LevelOverflowError(
                f"level {level} exceeds the hard cap {self.max_level} for {self.name}"
            )

    def validate_point(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"{self.name} expects points of shape ({self.dim},), got {x.shape}")
        return x

    # -- optional ground truth (closed forms where the instance has them) --

    def grad_level(self, x: np.ndarray, level: int) -> np.ndarray:
        """grad F^level(x), exact. Available on instances with closed forms."""
        raise NotImplementedError

    def grad_truth(self, x: np.ndarray) -> np.ndarray:
        """grad F(x), exact."""
        raise NotImplementedError

    def value_level(self, x: np.ndarray, level: int) -> float:
        """F^level(x), exact."""
        raise NotImplementedError

    def value_truth(self, x: np.ndarray) -> float:
        """F(x), exact."""
        raise NotImplementedError

    def solution(self) -> tuple[np.ndarray, float]:
        """(argmin, min value) of F, exact or high-precision reference."""
        raise NotImplementedError

    def has_truth(self, kind: str) -> bool:
        """True if the `kind` hook ('grad_level', 'value_truth', ...) is overridden."""
        return getattr(type(self), kind) is not getattr(BiasedOracle, kind)


class CostMeter:
    """Thread-safe cumulative cost counter (cost units are oracle-defined)."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._total = 0.0
        self._max_single = 0.0

    def charge(self, cost: float) -> None:
        if not math.isfinite(cost) or cost < 0:
            raise ValueError(f"cost must be finite and nonnegative, got {cost}")
        with self._lock:
            self._total += cost
            if cost > self._max_single:
                self._max_single = cost

    @property
    def total(self) -> float:
        with self._lock:
            return self._total

    @property
    def max_single(self) -> float:
        with self._lock:
            return self._max_single
