"""Stochastic gradient loops driven by multilevel estimators.

Two frameworks:

  * `sgd` -- plain projected-free SGD, x_{t+1} = x_t - gamma_t v(x_t),
    with the step-size schedules and iteration/level planners that make the
    bias/variance/cost trade-off concrete.
  * `vr_sgd` -- epoch-anchored variance reduction: a large batch refreshes
    the gradient memory every Q_E iterations, small coupled two-point
    batches keep it current in between.

Budget accounting is strict: before every iteration the loop checks that
the worst-case cost of one more estimate still fits; it never interrupts a
partially-built estimate, so the final total lands in
(budget - max_single_estimate, budget].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from .errors import DivergenceError, LevelOverflowError
from .estimators import GradientEstimator
from .oracle import MAX_LEVEL_CAP, RateLaw

__all__ = [
    "ObjectiveClass",
    "StepSchedule",
    "make_schedule",
    "select_level",
    "vmlmc_batch_scale",
    "iteration_count",
    "pilot_variance",
    "GradNormEstimate",
    "grad_norm_probe",
    "RunResult",
    "sgd",
    "vr_sgd",
]

ObjectiveClass = Literal["strongly_convex", "convex", "nonconvex"]

OBJECTIVE_CLASSES = ("strongly_convex", "convex", "nonconvex")


# ---------------------------------------------------------------------------
# step-size schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepSchedule:
    """gamma_t as a function of the 1-based iteration index."""

    kind: str
    fn: Callable[[int], float]
    label: str

    def gamma(self, t: int) -> float:
        if t < 1:
            raise ValueError("iteration index is 1-based")
        return self.fn(t)


def make_schedule(
    kind: str,
    *,
    gamma: float | None = None,
    mu: float | None = None,
    S_F: float | None = None,
    V: float | None = None,
    T: int | None = None,
    L_F: float | None = None,
) -> StepSchedule:
    """Build a named schedule.

    constant           gamma_t = gamma
    inv_t              gamma_t = 1 / (t + S_F^2 / mu^2)
    pl_decay           gamma_t = 2 / (mu (t + 2 S_F / mu - 1))
    inv_sqrt           gamma_t = 1 / sqrt(V T)
    inv_sqrt_lipschitz gamma_t = 1 / sqrt((V + L_F^2) T)

    `inv_t` and `pl_decay` are the two decaying forms for strongly convex /
    PL objectives; both shipped because they appear side by side in the
    source tables with different constants.
    """
    if kind == "constant":
        if gamma is None or gamma <= 0:
            raise ValueError("constant schedule needs gamma > 0")
        g = float(gamma)
        return StepSchedule(kind, lambda t: g, f"constant {g:g}")
    if kind == "inv_t":
        if not mu or not S_F:
            raise ValueError("inv_t needs mu and S_F")
        off = (S_F / mu) ** 2
        return StepSchedule(kind, lambda t: 1.0 / (t + off), f"1/(t + {off:g})")
    if kind == "pl_decay":
        if not mu or not S_F:
            raise ValueError("pl_decay needs mu and S_F")
        off = 2.0 * S_F / mu - 1.0
        m = float(mu)
        return StepSchedule(kind, lambda t: 2.0 / (m * (t + off)), f"2/(mu(t + {off:g}))")
    if kind == "inv_sqrt":
        if not V or not T:
            raise ValueError("inv_sqrt needs V and T")
        g = 1.0 / math.sqrt(V * T)
        return StepSchedule(kind, lambda t: g, f"1/sqrt(VT) = {g:g}")
    if kind == "inv_sqrt_lipschitz":
        if not V or not T or L_F is None:
            raise ValueError("inv_sqrt_lipschitz needs V, T and L_F")
        g = 1.0 / math.sqrt((V + L_F**2) * T)
        return StepSchedule(kind, lambda t: g, f"1/sqrt((V+L^2)T) = {g:g}")
    raise ValueError(f"unknown schedule kind {kind!r}")


# ---------------------------------------------------------------------------
# planners: level, batch scale, iteration count
# ---------------------------------------------------------------------------

def select_level(
    law: RateLaw,
    eps: float,
    objective: ObjectiveClass,
    max_level: int = MAX_LEVEL_CAP,
) -> int:
    """Truncation level making the top-level bias negligible at accuracy eps.

    (strongly) convex:  L = ceil(log2(4 M_a / eps)   / a)
    nonconvex:          L = ceil(log2(4 M_a / eps^2) / a)

    Negative values (very coarse accuracy) clamp to 0; a level beyond the
    hard cap raises rather than silently truncating the telescope.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    target = 4.0 * law.M_a / (eps if objective != "nonconvex" else eps**2)
    L = max(0, math.ceil(math.log2(target) / law.a)) if target > 1 else 0
    if L > max_level:
        raise LevelOverflowError(
            f"accuracy eps={eps:g} needs level {L} > cap {max_level}"
        )
    return L


def vmlmc_batch_scale(
    law: RateLaw,
    eps: float,
    objective: ObjectiveClass,
    L: int,
    mu: float | None = None,
    S_F: float | None = None,
) -> float:
    """Batch scale N making the batched-telescope variance O(eps) (or
    O(eps^2) in the nonconvex case), by the declared-law case split."""
    b, c, M_b = law.b, law.c, law.M_b
    if objective == "strongly_convex":
        if not mu:
            raise ValueError("strongly_convex batch scale needs mu")
        denom = eps * mu
        scale = 2.0 * M_b / denom
    elif objective == "convex":
        if not S_F:
            raise ValueError("convex batch scale needs S_F")
        scale = 2.0 * M_b / (eps * S_F)
    else:
        scale = 8.0 * M_b / eps**2
    if c < b:
        return scale / (1.0 - 2.0 ** (-(b - c) / 2.0))
    if c == b:
        return scale * (L + 1)
    return scale * 2.0 ** (-(b - c) * (L + 1) / 2.0) / (2.0 ** ((c - b) / 2.0) - 1.0)


def iteration_count(
    objective: ObjectiveClass,
    eps: float,
    *,
    V: float,
    mu: float | None = None,
    S_F: float | None = None,
    dist2: float | None = None,
    value_gap: float | None = None,
    constant_step: bool = False,
    cap: int | None = None,
) -> int:
    """Iterations sufficient for the target accuracy, per the rate analysis.

    dist2 = ||x_1 - x*||^2, value_gap = F(x_1) - F*. `constant_step` selects
    the small-variance branch (large-batch estimators): geometric decay for
    strongly convex, 1/T for convex. `cap` truncates desk-scale blowups
    (notably the nonconvex eps^-4 rule); callers relying on the cap must
    detect crossing on the trajectory instead of trusting T.
    """
    if eps <= 0 or V < 0:
        raise ValueError("eps must be positive and V nonnegative")
    if objective == "strongly_convex":
        if not mu or not S_F:
            raise ValueError("strongly_convex needs mu and S_F")
        if constant_step:
            if value_gap is None:
                raise ValueError("constant-step strongly_convex needs value_gap")
            if S_F <= mu:
                T = math.ceil(2.0 * math.log(max(4.0 * value_gap / eps, 2.0)))
            else:
                T = math.ceil(
                    2.0 * math.log(max(4.0 * value_gap / eps, 2.0))
                    / math.log(S_F / (S_F - mu))
                )
        else:
            if dist2 is None:
                raise ValueError("strongly_convex needs dist2")
            lead = max(V, mu**2 * (1.0 + 2.0 * (S_F / mu) ** 2) * dist2)
            T = math.ceil(2.0 * S_F * lead / (mu**2 * eps))
    elif objective == "convex":
        if dist2 is None:
            raise ValueError("convex needs dist2")
        if constant_step:
            if not S_F:
                raise ValueError("constant-step convex needs S_F")
            T = math.ceil(8.0 * S_F * dist2 / eps)
        else:
            T = math.ceil(4.0 * V * (1.0 + dist2) ** 2 / eps**2)
    elif objective == "nonconvex":
        if not S_F or value_gap is None:
            raise ValueError("nonconvex needs S_F and value_gap")
        if constant_step:
            T = math.ceil(16.0 * S_F * value_gap / eps**2)
        else:
            T = math.ceil(16.0 * V * (2.0 * value_gap + S_F) ** 2 / eps**4)
    else:
        raise ValueError(f"unknown objective class {objective!r}")
    T = max(T, 1)
    if cap is not None:
        T = min(T, cap)
    return T


def pilot_variance(
    estimator: GradientEstimator,
    x: np.ndarray,
    rng: np.random.Generator,
    replications: int = 1000,
) -> float:
    """Empirical trace-variance of the estimator at x (pilot probe).

    Used to fill V-bar in schedules when the config leaves it unset; seeded
    through the run's generator, so runs remain reproducible.
    """
    eb = estimator.estimate_batch(np.asarray(x, dtype=float), rng, replications)
    centered = eb.grads - eb.grads.mean(axis=0)
    return float((centered**2).sum(axis=1).mean())


# ---------------------------------------------------------------------------
# run loops
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    """Trajectory and accounting of one optimization run.

    iterates[t] is the point after t steps (iterates[0] = start). The
    returned `x_out` is the last iterate for strongly convex / PL runs and
    a uniformly drawn post-start iterate otherwise.
    """

    iterates: np.ndarray        # (T_done + 1, dim)
    cum_cost: np.ndarray        # (T_done + 1,), cum_cost[0] = 0
    x_out: np.ndarray
    total_cost: float
    stop_reason: str            # "completed" | "budget"
    objective: np.ndarray | None = None   # F(iterates[t]) when truth known
    grad_sq: np.ndarray | None = None     # ||grad F(iterates[t])||^2 likewise
    output_index: int = -1
    extras: dict = field(default_factory=dict)

    @property
    def steps_done(self) -> int:
        return len(self.iterates) - 1


def _record_truth(
    iterates: list[np.ndarray],
    objective_fn: Callable[[np.ndarray], float] | None,
    grad_fn: Callable[[np.ndarray], np.ndarray] | None,
) -> tuple[np.ndarray | None, np.ndarray | None]:
    obj = None
    gsq = None
    if objective_fn is not None:
        obj = np.array([objective_fn(x) for x in iterates])
    if grad_fn is not None:
        gsq = np.array([float(np.sum(grad_fn(x) ** 2)) for x in iterates])
    return obj, gsq


def _guard(x: np.ndarray, t: int, radius: float, last_finite: np.ndarray) -> None:
    if not np.all(np.isfinite(x)) or float(np.linalg.norm(x)) > radius:
        raise DivergenceError(
            f"iterate left the trust region at step {t} (|x| > {radius:g} or non-finite)",
            last_iterate=last_finite.copy(),
            iteration=t,
        )


def sgd(
    estimator: GradientEstimator,
    x1: np.ndarray,
    schedule: StepSchedule,
    T: int,
    rng: np.random.Generator,
    *,
    budget: float | None = None,
    output: Literal["last", "uniform"] = "last",
    objective_fn: Callable[[np.ndarray], float] | None = None,
    grad_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    divergence_radius: float = 1e8,
    project: Callable[[np.ndarray], np.ndarray] | None = None,
    stop_fn: Callable[[np.ndarray, int], bool] | None = None,
) -> RunResult:
    """Run T steps of x <- x - gamma_t v(x).

    `project`, when given, clamps each iterate back to a feasible set
    (used by box-constrained instances to stay inside their domain).
    `stop_fn(x_t, t)` returning True ends the run early with stop reason
    "target" (sweep cells stop at the first crossing instead of burning
    the full planned horizon).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    x = np.asarray(x1, dtype=float).copy()
    iterates = [x.copy()]
    costs = [0.0]
    total = 0.0
    max_single = estimator.max_cost()
    stop_reason = "completed"
    for t in range(1, T + 1):
        if budget is not None and total + max_single > budget:
            stop_reason = "budget"
            break
        est = estimator.estimate(x, rng)
        total += est.cost
        x = x - schedule.gamma(t) * est.grad
        if project is not None:
            x = project(x)
        _guard(x, t, divergence_radius, iterates[-1])
        iterates.append(x.copy())
        costs.append(total)
        if stop_fn is not None and stop_fn(x, t):
            stop_reason = "target"
            break
    arr = np.asarray(iterates)
    if output == "uniform" and len(iterates) > 1:
        # uniform over post-start iterates x_1..x_T, drawn after the loop so
        # the trajectory itself is schedule-only deterministic given queries
        idx = int(rng.integers(1, len(iterates)))
    else:
        idx = len(iterates) - 1
    obj, gsq = _record_truth(iterates, objective_fn, grad_fn)
    return RunResult(
        iterates=arr,
        cum_cost=np.asarray(costs),
        x_out=arr[idx],
        total_cost=total,
        stop_reason=stop_reason,
        objective=obj,
        grad_sq=gsq,
        output_index=idx,
    )


def vr_sgd(
    estimator: GradientEstimator,
    x1: np.ndarray,
    gamma: float,
    T: int,
    rng: np.random.Generator,
    *,
    D1: int,
    D2: int,
    Q_E: int,
    budget: float | None = None,
    output: Literal["last", "uniform"] = "uniform",
    objective_fn: Callable[[np.ndarray], float] | None = None,
    grad_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    divergence_radius: float = 1e8,
    project: Callable[[np.ndarray], np.ndarray] | None = None,
    stop_fn: Callable[[np.ndarray, int], bool] | None = None,
) -> RunResult:
    """Epoch-anchored variance-reduced loop.

    Iterations t with (t-1) % Q_E == 0 rebuild the gradient memory from D1
    fresh estimates at x_t; the others update it with D2 coupled two-point
    estimates, m <- m + mean(v(x_t) - v(x_{t-1})), where both evaluations
    share levels and realizations. Q_E = 1 degenerates to mini-batch SGD.
    `stop_fn` ends the run early exactly as in `sgd`.
    """
    if min(T, D1, D2, Q_E) < 1:
        raise ValueError("T, D1, D2, Q_E must all be >= 1")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    x = np.asarray(x1, dtype=float).copy()
    x_prev = x.copy()
    m = np.zeros_like(x)
    iterates = [x.copy()]
    costs = [0.0]
    total = 0.0
    mc = estimator.max_cost()
    stop_reason = "completed"
    for t in range(1, T + 1):
        anchor = (t - 1) % Q_E == 0
        worst = (D1 if anchor else 2 * D2) * mc
        if budget is not None and total + worst > budget:
            stop_reason = "budget"
            break
        if anchor:
            eb = estimator.estimate_batch(x, rng, D1)
            m = eb.grads.mean(axis=0)
            total += eb.total_cost
        else:
            eb_new, eb_old = estimator.estimate_pair_batch(x, x_prev, rng, D2)
            m = m + (eb_new.grads - eb_old.grads).mean(axis=0)
            total += eb_new.total_cost + eb_old.total_cost
        x_prev = x
        x = x - gamma * m
        if project is not None:
            x = project(x)
        _guard(x, t, divergence_radius, iterates[-1])
        iterates.append(x.copy())
        costs.append(total)
        if stop_fn is not None and stop_fn(x, t):
            stop_reason = "target"
            break
    arr = np.asarray(iterates)
    if output == "uniform" and len(iterates) > 1:
        idx = int(rng.integers(1, len(iterates)))
    else:
        idx = len(iterates) - 1
    obj, gsq = _record_truth(iterates, objective_fn, grad_fn)
    return RunResult(
        iterates=arr,
        cum_cost=np.asarray(costs),
        x_out=arr[idx],
        total_cost=total,
        stop_reason=stop_reason,
        objective=obj,
        grad_sq=gsq,
        output_index=idx,
    )


# ---------------------------------------------------------------------------
# stationarity probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradNormEstimate:
    """Squared gradient norm with its standard error (0 when exact)."""

    value: float
    se: float
    exact: bool


def grad_norm_probe(problem, x, replications: int = 1000, rng=None, level=None) -> GradNormEstimate:
    """||grad F(x)||^2, exact when the instance has a closed form.

    Without one, queries h at a high level and estimates the squared mean
    by the cross-term identity E<v_i, v_j> = ||E v||^2 for i != j, which
    removes the +Var/n inflation that the naive ||mean||^2 carries.
    """
    x = np.asarray(x, dtype=float)
    if problem.has_truth("grad_truth"):
        g = problem.grad_truth(x)
        return GradNormEstimate(value=float(g @ g), se=0.0, exact=True)
    if replications < 2:
        raise ValueError("need at least 2 replications to debias the estimate")
    if rng is None:
        rng = np.random.default_rng(0)
    if level is None:
        level = min(problem.max_level, 12)
    v = problem.query_batch(level, x, rng, replications).h
    n = v.shape[0]
    s = v.sum(axis=0)
    value = float((s @ s - np.einsum("ij,ij->", v, v)) / (n * (n - 1)))
    proj = v @ (s / n)
    se = 2.0 * float(np.std(proj, ddof=1)) / math.sqrt(n)
    return GradNormEstimate(value=value, se=se, exact=False)
