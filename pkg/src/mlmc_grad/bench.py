"""Benchmark harness: rate probes, budgeted sweeps, paired comparisons.

Everything here consumes the oracle/estimator/optimizer layers and produces
small typed results plus flat CSV files. Crossing detection always uses the
instance's ground truth (closed forms or the grid-search reference), never
the optimizer's own noisy estimates, so a recorded cost-at-crossing measures
algorithm work and nothing else.
"""

from __future__ import annotations

import math
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DivergenceError,
    InapplicableEstimatorError,
    InsufficientDataError,
    InvalidInputError,
    UnstableRegimeError,
)
from .estimators import GradientEstimator, make_estimator
from .optimizers import (
    ObjectiveClass,
    RunResult,
    iteration_count,
    make_schedule,
    select_level,
    sgd,
    vmlmc_batch_scale,
    vr_sgd,
)
from .oracle import BiasedOracle
from .problems import make_instance
from .rng import cell_rng

__all__ = [
    "RateFit",
    "SweepSpec",
    "CellResult",
    "SweepResult",
    "RunPlan",
    "Target",
    "PairedComparison",
    "GridSearchResult",
    "probe_bias",
    "probe_variance",
    "run_sweep",
    "paired_compare",
    "grid_search",
    "execute_plan",
    "crossing_from_result",
    "RATE_BANDS",
    "SWEEP_BANDS",
    "in_band",
    "write_probe_csv",
    "write_sweep_csv",
    "write_summary_csv",
    "write_trajectory_csv",
    "atomic_write_text",
    "SummaryRow",
]


# ---------------------------------------------------------------------------
# encoded slope bands (log-log fits against the declared decay laws)
# ---------------------------------------------------------------------------

# (instance name, probe kind) -> (lo, hi); None on either side = unbounded.
RATE_BANDS: dict[tuple[str, str], tuple[float | None, float | None]] = {
    ("cso_toy", "variance"): (-1.3, -0.7),
    ("cso_nonconvex", "variance"): (-2.3, -1.7),
    ("cso_linear", "variance"): (-2.3, -1.7),
    ("queue_f2", "variance"): (None, -0.7),
    ("sinkhorn", "variance"): (None, -0.7),
    ("ubsr_toy", "variance"): (-1.3, -0.7),
    ("cso_toy", "bias"): (-1.3, -0.7),
    ("cso_linear", "bias"): (-2.3, -1.7),
    ("ubsr_toy", "bias"): (-1.3, -0.7),
}

# cost-at-crossing slope vs epsilon on the strongly convex toy
SWEEP_BANDS: dict[str, tuple[float | None, float | None]] = {
    "lsgd": (-2.3, -1.7),
    "vmlmc": (-1.3, -0.7),
    "rtmlmc": (-1.3, -0.7),
    "rumlmc": (-1.3, -0.7),
    "rrmlmc": (-1.3, -0.7),
}


def in_band(slope: float, band: tuple[float | None, float | None]) -> bool:
    lo, hi = band
    if not math.isfinite(slope):
        return False
    if lo is not None and slope < lo:
        return False
    if hi is not None and slope > hi:
        return False
    return True


# ---------------------------------------------------------------------------
# rate fits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RateFit:
    """Least-squares line through per-level log2 statistics.

    A degenerate fit (statistic identically zero, e.g. probing bias on a
    noiseless oracle) carries slope 0 and the flag instead of -inf values
    blowing up the regression.
    """

    levels: tuple[int, ...]
    statistic: str
    log2_values: tuple[float, ...]
    slope: float
    intercept: float
    residual: float
    degenerate: bool = False
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.degenerate and len(self.levels) < 4:
            raise InsufficientDataError(
                f"rate fit needs at least 4 levels, got {len(self.levels)}"
            )
        if not math.isfinite(self.slope):
            raise InsufficientDataError("rate fit produced a non-finite slope")


def _fit_line(levels: Sequence[int], vals: Sequence[float]) -> tuple[float, float, float]:
    ls = np.asarray(levels, dtype=float)
    vs = np.asarray(vals, dtype=float)
    slope, intercept = np.polyfit(ls, vs, 1)
    resid = float(np.sqrt(np.mean((vs - (slope * ls + intercept)) ** 2)))
    return float(slope), float(intercept), resid


def probe_bias(
    instance: BiasedOracle,
    x: np.ndarray,
    levels: Sequence[int],
    *,
    mode: str = "grad",
    replications: int = 4096,
    rng: np.random.Generator | None = None,
) -> RateFit:
    """Fit the per-level bias decay at a fixed point.

    mode="grad" regresses log2 ||grad F^l - grad F||^2 on l (needs closed
    forms for both); mode="value" regresses log2 |F^l - F|, from closed
    forms when the instance has them and otherwise from a Monte-Carlo mean
    of per-level value estimates. Levels where the measured bias drowns in
    its own standard error are dropped from the fit.
    """
    levels = [int(l) for l in levels]
    if mode == "grad":
        if not (instance.has_truth("grad_level") and instance.has_truth("grad_truth")):
            raise InvalidInputError(
                f"{instance.name} has no closed-form per-level gradients to probe"
            )
        g_true = instance.grad_truth(x)
        raw = []
        for l in levels:
            d = instance.grad_level(x, l) - g_true
            raw.append(float(np.dot(d, d)))
        statistic = "log2_bias_sq"
        ses = [0.0] * len(levels)
    elif mode == "value":
        f_true = float(instance.value_truth(x))
        raw = []
        ses = []
        if instance.has_truth("value_level"):
            for l in levels:
                raw.append(abs(float(instance.value_level(x, l)) - f_true))
                ses.append(0.0)
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            for l in levels:
                draws = np.asarray(instance.value_batch(l, x, rng, replications))
                raw.append(abs(float(draws.mean()) - f_true))
                ses.append(float(draws.std(ddof=1) / math.sqrt(len(draws))))
        statistic = "log2_abs_bias"
    else:
        raise InvalidInputError(f"unknown bias probe mode {mode!r}")

    if max(raw) <= 1e-300:
        return RateFit(
            levels=tuple(levels),
            statistic=statistic,
            log2_values=tuple(-math.inf for _ in levels),
            slope=0.0,
            intercept=0.0,
            residual=0.0,
            degenerate=True,
        )
    usable = [
        (l, v, s)
        for l, v, s in zip(levels, raw, ses)
        if v > 1e-300 and v > 3.0 * s
    ]
    if len(usable) < 4:
        raise InsufficientDataError(
            f"bias probe kept {len(usable)} of {len(levels)} levels; "
            "bias is indistinguishable from sampling noise on the rest"
        )
    ls = [u[0] for u in usable]
    vals = [math.log2(u[1]) for u in usable]
    slope, intercept, resid = _fit_line(ls, vals)
    return RateFit(
        levels=tuple(ls),
        statistic=statistic,
        log2_values=tuple(vals),
        slope=slope,
        intercept=intercept,
        residual=resid,
        extras={"se": tuple(u[2] for u in usable)},
    )


def probe_variance(
    instance: BiasedOracle,
    x: np.ndarray,
    levels: Sequence[int],
    replications: int = 10_000,
    rng: np.random.Generator | None = None,
) -> RateFit:
    """Fit the decay of Var(H^l) at a fixed point.

    Also records the per-level Var(h^l) and whether it stays under the
    declared uniform bound sigma^2 (with a 1.25x sampling-noise allowance);
    the level-difference variance is the fitted statistic.
    """
    levels = [int(l) for l in levels]
    if replications < 10_000:
        raise InsufficientDataError(
            f"variance probe needs >= 10^4 replications per level, got {replications}"
        )
    if len(levels) < 4:
        raise InsufficientDataError("variance probe needs at least 4 levels")
    if rng is None:
        rng = np.random.default_rng(0)
    var_H = []
    var_h = []
    for l in levels:
        qb = instance.query_batch(l, np.asarray(x, dtype=float), rng, replications)
        cH = qb.H - qb.H.mean(axis=0)
        ch = qb.h - qb.h.mean(axis=0)
        var_H.append(float(np.einsum("ij,ij->", cH, cH)) / (replications - 1))
        var_h.append(float(np.einsum("ij,ij->", ch, ch)) / (replications - 1))
    vals = [math.log2(v) for v in var_H]
    slope, intercept, resid = _fit_line(levels, vals)
    sigma2 = instance.law.sigma2
    return RateFit(
        levels=tuple(levels),
        statistic="log2_variance_H",
        log2_values=tuple(vals),
        slope=slope,
        intercept=intercept,
        residual=resid,
        extras={
            "var_h": tuple(var_h),
            "sigma2": sigma2,
            "h_bounded": bool(max(var_h) <= 1.25 * sigma2),
        },
    )


# ---------------------------------------------------------------------------
# run plans and crossing detection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Target:
    """Crossing criterion: objective gap or squared gradient norm.

    on="avg" evaluates the gap at the running average of the iterates
    instead of the raw iterate. The averaged point is what the convex-rate
    analysis controls; the raw path fluctuates enough that a lucky dip
    crosses tiny thresholds far too early and flattens cost-accuracy
    slopes. Gradient targets always use the raw iterate (nonconvex theory
    speaks about visited points, and averaging has no meaning there).
    """

    kind: str    # "gap" | "grad_sq"
    value: float
    on: str = "point"   # "point" | "avg" (gap only)

    def __post_init__(self):
        if self.kind not in ("gap", "grad_sq"):
            raise ConfigError(f"unknown target kind {self.kind!r}")
        if self.value <= 0:
            raise ConfigError("target value must be positive")
        if self.on not in ("point", "avg"):
            raise ConfigError(f"unknown target anchor {self.on!r}")
        if self.on == "avg" and self.kind != "gap":
            raise ConfigError("averaged crossing only applies to gap targets")


@dataclass(frozen=True)
class RunPlan:
    """Everything needed to execute one optimization run on an instance."""

    estimator: str
    level: int | None = None
    N: float | None = None
    batch: int = 1
    force: bool = False
    framework: str = "sgd"          # "sgd" | "vr"
    schedule: str = "constant"      # sgd only
    gamma: float | None = None
    schedule_params: dict = field(default_factory=dict)
    T: int = 1000
    D1: int = 1
    D2: int = 1
    Q_E: int = 1
    output: str = "last"

    def build(self, instance: BiasedOracle) -> GradientEstimator:
        return make_estimator(
            self.estimator,
            instance,
            level=self.level,
            N=self.N,
            batch=self.batch,
            force=self.force,
        )


def crossing_from_result(
    result: RunResult, target: Target, f_star: float | None = None
) -> tuple[float, bool, float]:
    """(cost at first crossing, crossed?, final metric) from recorded truth."""
    if target.kind == "gap":
        if result.objective is None:
            raise InvalidInputError("run recorded no objective values")
        if f_star is None:
            raise InvalidInputError("gap target needs the optimal value")
        metric = result.objective - f_star
    else:
        if result.grad_sq is None:
            raise InvalidInputError("run recorded no gradient norms")
        metric = result.grad_sq
    hits = np.nonzero(metric <= target.value)[0]
    if len(hits) == 0:
        return math.nan, False, float(metric[-1])
    return float(result.cum_cost[hits[0]]), True, float(metric[-1])


def _stop_for_target(instance: BiasedOracle, target: Target):
    """Build the early-stop predicate for a crossing target.

    Returns (stop_fn, state). state["metric"] holds the target metric at
    the last iterate the predicate inspected, so a caller learns the final
    gap even when the run never crossed. For on="avg" the predicate keeps
    a running mean of every iterate it sees and evaluates the gap there.
    """
    state = {"metric": math.inf}
    if target.kind == "grad_sq":
        if not instance.has_truth("grad_truth"):
            raise InvalidInputError(f"{instance.name} has no closed-form gradient")
        gfn = instance.grad_truth

        def stop_fn(x, t):
            m = float(np.sum(gfn(x) ** 2))
            state["metric"] = m
            return m <= target.value

    else:
        if not instance.has_truth("value_truth"):
            raise InvalidInputError(f"{instance.name} has no closed-form objective")
        vfn = instance.value_truth
        _, f_star = instance.solution()
        if target.on == "avg":
            acc = {"sum": None, "n": 0}

            def stop_fn(x, t):
                if acc["sum"] is None:
                    acc["sum"] = np.zeros_like(np.asarray(x, dtype=float))
                acc["sum"] += x
                acc["n"] += 1
                m = float(vfn(acc["sum"] / acc["n"]) - f_star)
                state["metric"] = m
                return m <= target.value

        else:

            def stop_fn(x, t):
                m = float(vfn(x) - f_star)
                state["metric"] = m
                return m <= target.value

    return stop_fn, state


def execute_plan(
    instance: BiasedOracle,
    plan: RunPlan,
    rng: np.random.Generator,
    *,
    x1: np.ndarray | None = None,
    budget: float | None = None,
    target: Target | None = None,
    stop_at_target: bool = True,
    stop_fn=None,
    record: str = "auto",
) -> RunResult:
    """Run one plan, recording ground-truth trajectories when available.

    With a target and stop_at_target the run halts at the first crossing
    (detected on the true objective / gradient) instead of burning the
    full planned horizon. An explicit stop_fn overrides the target-derived
    predicate. record picks the per-step truth curves: "auto" keeps the
    curve the target needs (both without a target), "full" keeps both,
    "none" skips recording, which matters when a sweep runs thousands of
    cells.
    """
    est = plan.build(instance)
    if x1 is None:
        x1 = np.asarray(instance.x1_default, dtype=float)
    obj_fn = instance.value_truth if instance.has_truth("value_truth") else None
    grad_fn = instance.grad_truth if instance.has_truth("grad_truth") else None
    project = getattr(instance, "project", None)

    if stop_fn is None and target is not None and stop_at_target:
        stop_fn, _ = _stop_for_target(instance, target)
    if record == "none":
        rec_obj = None
        rec_grad = None
    elif record == "full":
        rec_obj = obj_fn
        rec_grad = grad_fn
    elif record == "auto":
        # only record the trajectory the crossing rule needs; truth calls
        # per step are cheap but not free
        rec_obj = obj_fn if (target is None or target.kind == "gap") else None
        rec_grad = grad_fn if (target is None or target.kind == "grad_sq") else None
    else:
        raise ConfigError(f"unknown record mode {record!r}")

    if plan.framework == "vr":
        if plan.gamma is None:
            raise ConfigError("vr plan needs an explicit gamma")
        return vr_sgd(
            est,
            x1,
            plan.gamma,
            plan.T,
            rng,
            D1=plan.D1,
            D2=plan.D2,
            Q_E=plan.Q_E,
            budget=budget,
            output=plan.output,  # type: ignore[arg-type]
            objective_fn=rec_obj,
            grad_fn=rec_grad,
            project=project,
            stop_fn=stop_fn,
        )
    if plan.framework != "sgd":
        raise ConfigError(f"unknown framework {plan.framework!r}")
    schedule = make_schedule(plan.schedule, gamma=plan.gamma, **plan.schedule_params)
    return sgd(
        est,
        x1,
        schedule,
        plan.T,
        rng,
        budget=budget,
        output=plan.output,  # type: ignore[arg-type]
        objective_fn=rec_obj,
        grad_fn=rec_grad,
        project=project,
        stop_fn=stop_fn,
    )


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepSpec:
    """One budgeted accuracy sweep: estimators x epsilon grid x seeds."""

    instance: str
    estimators: tuple[str, ...]
    eps_grid: tuple[float, ...]
    seeds: int = 5
    budget_cap: float = 1e10
    objective: ObjectiveClass = "strongly_convex"
    schedule: str = "auto"
    seed: int = 0
    max_iters: int = 2_000_000
    instance_params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "estimators", tuple(str(e) for e in self.estimators))
        object.__setattr__(self, "eps_grid", tuple(float(e) for e in self.eps_grid))
        if len(self.estimators) == 0:
            raise ConfigError("sweep needs at least one estimator")
        if len(self.eps_grid) == 0 or any(e <= 0 for e in self.eps_grid):
            raise ConfigError("eps grid must be nonempty with positive entries")
        if any(a <= b for a, b in zip(self.eps_grid, self.eps_grid[1:])):
            raise ConfigError("eps grid must be strictly decreasing")
        if self.seeds < 5:
            raise ConfigError("sweeps need at least 5 seeds per cell")
        if self.budget_cap <= 0:
            raise ConfigError("budget cap must be positive")


@dataclass
class CellResult:
    """One (estimator, epsilon, seed) cell of a sweep."""

    instance: str
    estimator: str
    epsilon: float
    seed: int
    cost_at_crossing: float
    censored: bool
    final_gap: float
    wall_ms: float
    diverged: bool = False
    inapplicable: bool = False
    # iterations at crossing (full horizon when censored); not a CSV column
    iters: int = 0


@dataclass
class SweepResult:
    """All cells plus per-estimator median costs and log-log slopes.

    Within one (estimator, seed) lane, a stricter-target run that finished
    cheaper also certifies every looser target, so lane costs are clamped
    monotone nonincreasing in epsilon after the cells run. Slope fits use
    the per-epsilon median over uncensored cells and need >= 2 epsilon
    points; a single-point grid carries crossing costs but no slope.
    """

    spec: SweepSpec
    cells: list[CellResult]
    medians: dict[str, tuple[tuple[float, float], ...]] = field(default_factory=dict)
    slopes: dict[str, float | None] = field(default_factory=dict)

    def cells_for(self, estimator: str) -> list[CellResult]:
        return [c for c in self.cells if c.estimator == estimator]


def _plan_for_cell(
    instance: BiasedOracle,
    objective: ObjectiveClass,
    kind: str,
    eps: float,
    schedule: str,
    max_iters: int,
    dist2: float,
    value_gap: float,
) -> RunPlan:
    """Table-driven hyper-parameters for one sweep cell."""
    law = instance.law
    mu = getattr(instance, "mu", None)
    S_F = getattr(instance, "S_F", None)
    if S_F is None:
        raise ConfigError(f"{instance.name} declares no smoothness constant")
    if objective == "strongly_convex" and not mu:
        raise ConfigError(f"{instance.name} is not strongly convex")

    needs_level = kind in ("lsgd", "vmlmc", "rtmlmc")
    L = select_level(law, eps, objective, instance.max_level) if needs_level else None
    N = None
    if kind == "vmlmc":
        N = vmlmc_batch_scale(law, eps, objective, L, mu=mu, S_F=S_F)

    plan_kwargs: dict = {"estimator": kind, "level": L, "N": N, "T": max_iters}
    probe = make_estimator(kind, instance, level=L, N=N)
    V = probe.variance_bound()

    if kind == "vmlmc":
        # large-batch regime: constant step, geometric / 1/T horizon
        if objective == "strongly_convex":
            gamma = 1.0 / S_F
            T = iteration_count(
                objective, eps, V=V, mu=mu, S_F=S_F,
                value_gap=value_gap, constant_step=True, cap=max_iters,
            )
        elif objective == "convex":
            gamma = 1.0 / (2.0 * S_F)
            T = iteration_count(
                objective, eps, V=V, S_F=S_F, dist2=dist2,
                constant_step=True, cap=max_iters,
            )
        else:
            gamma = 1.0 / S_F
            T = iteration_count(
                objective, eps, V=V, S_F=S_F, value_gap=value_gap,
                constant_step=True, cap=max_iters,
            )
        plan_kwargs.update(schedule="constant", gamma=gamma, T=T)
        return RunPlan(**plan_kwargs)

    if objective == "strongly_convex":
        sched = "pl_decay" if schedule == "auto" else schedule
        T = iteration_count(objective, eps, V=V, mu=mu, S_F=S_F,
                            dist2=dist2, cap=max_iters)
        plan_kwargs.update(schedule=sched, schedule_params={"mu": mu, "S_F": S_F}, T=T)
    elif objective == "convex":
        T = iteration_count(objective, eps, V=V, dist2=dist2, cap=max_iters)
        sched = "inv_sqrt" if schedule == "auto" else schedule
        plan_kwargs.update(schedule=sched, schedule_params={"V": V, "T": T}, T=T)
    else:
        T = iteration_count(objective, eps, V=V, S_F=S_F,
                            value_gap=value_gap, cap=max_iters)
        sched = "inv_sqrt" if schedule == "auto" else schedule
        plan_kwargs.update(schedule=sched, schedule_params={"V": V, "T": T}, T=T,
                           output="uniform")
    return RunPlan(**plan_kwargs)


def _run_cell(
    instance: BiasedOracle,
    spec: SweepSpec,
    kind: str,
    eps: float,
    lane: int,
    cell_index: int,
    f_star: float,
    dist2: float,
    value_gap: float,
) -> CellResult:
    t0 = time.perf_counter()
    # crossing anchor: batched constant-step lanes contract linearly with
    # noise already shrunk to the target scale, so the last iterate is the
    # controlled object; single-draw decaying-step lanes carry O(1/t) noise
    # and the rates speak about the averaged iterate instead (the raw path
    # fluctuates enough that lucky dips would cross tiny targets early)
    if spec.objective == "nonconvex":
        target = Target("grad_sq", eps**2)
    elif kind == "vmlmc":
        target = Target("gap", eps, on="point")
    else:
        target = Target("gap", eps, on="avg")
    base = dict(
        instance=spec.instance, estimator=kind, epsilon=eps, seed=lane,
        cost_at_crossing=math.nan, censored=True, final_gap=math.inf,
        wall_ms=0.0,
    )
    try:
        plan = _plan_for_cell(
            instance, spec.objective, kind, eps, spec.schedule,
            spec.max_iters, dist2, value_gap,
        )
        rng = cell_rng(spec.seed, cell_index)
        stop_fn, state = _stop_for_target(instance, target)
        result = execute_plan(
            instance, plan, rng, budget=spec.budget_cap, stop_fn=stop_fn,
            record="none",
        )
        crossed = result.stop_reason == "target"
        base.update(
            cost_at_crossing=result.total_cost if crossed else spec.budget_cap,
            censored=not crossed,
            final_gap=state["metric"],
            iters=result.steps_done,
        )
    except InapplicableEstimatorError:
        base.update(inapplicable=True)
    except DivergenceError:
        base.update(diverged=True, cost_at_crossing=spec.budget_cap)
    base["wall_ms"] = (time.perf_counter() - t0) * 1e3
    return CellResult(**base)


def _monotone_lanes(spec: SweepSpec, cells: list[CellResult]) -> None:
    """Clamp per-lane crossing costs monotone nonincreasing in epsilon.

    A run that certified gap <= eps_fine at cost C also certifies every
    looser eps at cost <= C, so walking from the finest target up, each
    looser cell takes the min of its own cost and the stricter one's.
    """
    by_lane: dict[tuple[str, int], list[CellResult]] = {}
    for c in cells:
        if not c.inapplicable:
            by_lane.setdefault((c.estimator, c.seed), []).append(c)
    for lane in by_lane.values():
        lane.sort(key=lambda c: c.epsilon)   # finest first
        best = math.inf
        best_iters = 0
        for c in lane:
            if not math.isnan(c.cost_at_crossing):
                if not c.censored and c.cost_at_crossing < best:
                    best = c.cost_at_crossing
                    best_iters = c.iters
                if best < c.cost_at_crossing:
                    c.cost_at_crossing = best
                    c.iters = best_iters
                    c.censored = False


def run_sweep(spec: SweepSpec, jobs: int = 1) -> SweepResult:
    """Execute every (estimator, epsilon, seed) cell and fit cost slopes.

    Cells are independent jobs with root streams derived from (spec.seed,
    cell index), so results do not depend on execution order or worker
    count. Divergence and inapplicability are recorded per cell, never
    fatal; cells that never cross record the budget as a censored cost.
    """
    instance = make_instance(spec.instance, **spec.instance_params)
    x_star, f_star = instance.solution()
    x1 = np.asarray(instance.x1_default, dtype=float)
    dist2 = float(np.sum((x1 - x_star) ** 2))
    value_gap = max(float(instance.value_truth(x1)) - f_star, 1e-12)

    tasks = []
    idx = 0
    for kind in spec.estimators:
        for eps in spec.eps_grid:
            for lane in range(spec.seeds):
                tasks.append((kind, eps, lane, idx))
                idx += 1
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            cells = list(
                pool.map(
                    lambda a: _run_cell(
                        instance, spec, a[0], a[1], a[2], a[3],
                        f_star, dist2, value_gap,
                    ),
                    tasks,
                )
            )
    else:
        cells = [
            _run_cell(instance, spec, k, e, l, i, f_star, dist2, value_gap)
            for k, e, l, i in tasks
        ]
    _monotone_lanes(spec, cells)

    result = SweepResult(spec=spec, cells=cells)
    for kind in spec.estimators:
        pts = []
        for eps in spec.eps_grid:
            costs = [
                c.cost_at_crossing
                for c in cells
                if c.estimator == kind and c.epsilon == eps
                and not c.censored and not c.inapplicable
            ]
            if costs:
                pts.append((eps, float(np.median(costs))))
        result.medians[kind] = tuple(pts)
        if len(pts) >= 2:
            slope, _ = np.polyfit(
                np.log2([p[0] for p in pts]), np.log2([p[1] for p in pts]), 1
            )
            result.slopes[kind] = float(slope)
        else:
            result.slopes[kind] = None
    return result


# ---------------------------------------------------------------------------
# paired comparison
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairedComparison:
    """Per-seed crossing costs of two plans on one instance.

    ratio_i = cost_a_i / cost_b_i under shared per-seed streams, so values
    above 1 mean plan B crossed cheaper. Censored arms enter at the budget,
    which biases ratios toward 1 (conservative for win claims).
    """

    costs_a: tuple[float, ...]
    costs_b: tuple[float, ...]
    censored_a: tuple[bool, ...]
    censored_b: tuple[bool, ...]

    @property
    def ratios(self) -> tuple[float, ...]:
        return tuple(a / b for a, b in zip(self.costs_a, self.costs_b))

    @property
    def median_ratio(self) -> float:
        return float(np.median(self.ratios))

    @property
    def win_rate(self) -> float:
        """Fraction of seeds where plan B crossed strictly cheaper."""
        wins = sum(1 for a, b in zip(self.costs_a, self.costs_b) if b < a)
        return wins / len(self.costs_a)


def paired_compare(
    instance: BiasedOracle,
    plan_a: RunPlan,
    plan_b: RunPlan,
    target: Target,
    seeds: int,
    *,
    budget: float,
    base_seed: int = 0,
    x1: np.ndarray | None = None,
) -> PairedComparison:
    """Run both plans on identical per-seed streams and compare costs.

    Identical plans produce bit-identical runs, hence ratio exactly 1.
    Crossing uses ground truth; an arm that never crosses is charged the
    full budget and flagged censored.
    """
    costs_a, costs_b, cen_a, cen_b = [], [], [], []
    for i in range(seeds):
        per_arm = []
        for plan in (plan_a, plan_b):
            rng = cell_rng(base_seed, i)
            stop_fn, _ = _stop_for_target(instance, target)
            result = execute_plan(
                instance, plan, rng, x1=x1, budget=budget, stop_fn=stop_fn,
                record="none",
            )
            crossed = result.stop_reason == "target"
            per_arm.append((result.total_cost if crossed else budget, not crossed))
        costs_a.append(per_arm[0][0])
        cen_a.append(per_arm[0][1])
        costs_b.append(per_arm[1][0])
        cen_b.append(per_arm[1][1])
    return PairedComparison(
        costs_a=tuple(costs_a),
        costs_b=tuple(costs_b),
        censored_a=tuple(cen_a),
        censored_b=tuple(cen_b),
    )


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSearchResult:
    mu: float
    p: float
    value: float
    resolution: float

    @property
    def x(self) -> np.ndarray:
        return np.array([self.mu, self.p])


def grid_search(instance, resolution: float = 0.01) -> GridSearchResult:
    """Exhaustive minimum of the closed-form objective over the domain box.

    Unstable cells (offered load >= 1) are skipped; the winner is the exact
    grid argmin, no polish, so it can serve as a frozen reference.
    """
    if not resolution > 0:
        raise InvalidInputError("grid resolution must be positive")
    lo, hi = instance.lo, instance.hi
    mu_vals = np.arange(lo[0], hi[0] + resolution / 2, resolution)
    p_vals = np.arange(lo[1], hi[1] + resolution / 2, resolution)
    vals = instance.value_truth_grid(mu_vals, p_vals, mask_unstable=True)
    if not np.any(np.isfinite(vals)):
        raise UnstableRegimeError("every grid cell is unstable")
    i, j = np.unravel_index(np.argmin(vals), vals.shape)
    return GridSearchResult(
        mu=float(mu_vals[i]),
        p=float(p_vals[j]),
        value=float(vals[i, j]),
        resolution=float(resolution),
    )


# ---------------------------------------------------------------------------
# CSV emission (atomic: temp file + rename)
# ---------------------------------------------------------------------------

def atomic_write_text(path: str, text: str) -> None:
    """Write a file so readers never observe a truncated version."""
    d = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.10g}"
    return str(v)


def write_sweep_csv(result: SweepResult, path: str) -> None:
    lines = ["instance,estimator,epsilon,seed,cost_at_crossing,censored,final_gap,wall_ms"]
    for c in result.cells:
        lines.append(",".join(_fmt(v) for v in (
            c.instance, c.estimator, c.epsilon, c.seed,
            c.cost_at_crossing, c.censored, c.final_gap, c.wall_ms,
        )))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_probe_csv(fit: RateFit, path: str) -> None:
    lines = ["level,statistic,log2_value"]
    for l, v in zip(fit.levels, fit.log2_values):
        lines.append(f"{l},{fit.statistic},{_fmt(float(v))}")
    for l, v in zip(fit.levels, fit.extras.get("var_h", ())):
        lines.append(f"{l},log2_variance_h,{_fmt(math.log2(v))}")
    atomic_write_text(path, "\n".join(lines) + "\n")


@dataclass(frozen=True)
class SummaryRow:
    name: str
    slope: float
    band_lo: float | None
    band_hi: float | None

    @property
    def passed(self) -> bool:
        return in_band(self.slope, (self.band_lo, self.band_hi))


def write_summary_csv(rows: Sequence[SummaryRow], path: str) -> None:
    lines = ["name,slope,band_lo,band_hi,passed"]
    for r in rows:
        lo = "" if r.band_lo is None else _fmt(float(r.band_lo))
        hi = "" if r.band_hi is None else _fmt(float(r.band_hi))
        lines.append(f"{r.name},{_fmt(float(r.slope))},{lo},{hi},{_fmt(r.passed)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_trajectory_csv(result: RunResult, path: str) -> None:
    lines = ["t,cum_cost,objective,grad_sq"]
    for t in range(len(result.iterates)):
        obj = result.objective[t] if result.objective is not None else math.nan
        gsq = result.grad_sq[t] if result.grad_sq is not None else math.nan
        lines.append(
            f"{t},{_fmt(float(result.cum_cost[t]))},{_fmt(float(obj))},{_fmt(float(gsq))}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")
