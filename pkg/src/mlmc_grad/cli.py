"""Command-line front end: run, probe, sweep, grid.

Commands read a TOML config (plus a few direct flags), build the instance
and estimator it describes, and write CSV results atomically into an
output directory resolved as --out, then [io].out, then $MLMC_GRAD_OUT,
then the working directory. One root seed drives every derived stream, so
rerunning a command with the same config and seed reproduces its outputs
byte for byte.
"""

from __future__ import annotations

import dataclasses
import math
import os
import sys

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:   # Python 3.10
    import tomli as tomllib

from . import __version__
from .bench import (
    RATE_BANDS,
    SWEEP_BANDS,
    RunPlan,
    SummaryRow,
    SweepSpec,
    Target,
    _plan_for_cell,
    atomic_write_text,
    execute_plan,
    grid_search,
    in_band,
    paired_compare,
    probe_bias,
    probe_variance,
    run_sweep,
    write_probe_csv,
    write_summary_csv,
    write_sweep_csv,
    write_trajectory_csv,
)
from .errors import (
    EXIT_ASSERT_FAILED,
    ConfigError,
    InvalidInputError,
    MlmcGradError,
    exit_code_for,
)
from .problems import make_instance
from .rng import cell_rng, run_rng

_KNOWN_BLOCKS = frozenset(
    ["instance", "estimator", "optimizer", "probe", "sweep", "grid", "io"]
)

# queue preset, two halves: first-passage runs of variance-reduced RT-MLMC
# from the far corner into a small box around the grid optimum, then a paired
# cost comparison against the fixed-level baseline at a matched objective gap.
# The VR step must stay small: one noisy level-5 draw near the congested edge
# can otherwise catapult the price into the dead-demand corner, which absorbs
# the run for the rest of the budget.
_QUEUE_PRESET = dict(
    start=(9.0, 9.0),
    tol=0.25,
    seeds=10,
    budget=1e7,
    grid_resolution=0.01,
    vr=dict(level=5, gamma=0.1, D1=64, D2=4, Q_E=32),
    paired_start=(4.0, 4.0),
    paired_gap=0.05,
    paired_budget=2e8,
    paired_schedule=dict(mu=0.3, S_F=2.0),
)


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error in {path}: {exc}") from exc
    unknown = set(cfg) - _KNOWN_BLOCKS
    if unknown:
        raise ConfigError(
            f"unknown config block(s) {sorted(unknown)}; expected {sorted(_KNOWN_BLOCKS)}"
        )
    return cfg


def _toml_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        f = float(v)
        if math.isnan(f) or math.isinf(f):
            return f"{f}"   # nan / inf are valid TOML floats
        r = repr(f)
        return r if ("." in r or "e" in r or "E" in r) else r + ".0"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_toml_scalar(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize config value {v!r}")


def _emit_toml(cfg: dict) -> str:
    lines = []
    for block, body in cfg.items():
        lines.append(f"[{block}]")
        for key, val in body.items():
            lines.append(f"{key} = {_toml_scalar(val)}")
        lines.append("")
    return "\n".join(lines)


def _resolve_out(flag: str | None, cfg: dict) -> str:
    out = flag or cfg.get("io", {}).get("out") or os.environ.get("MLMC_GRAD_OUT") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _resolve_seed(flag: int | None, cfg: dict) -> int:
    if flag is not None:
        return int(flag)
    return int(cfg.get("io", {}).get("seed", 0))


def _instance_from(cfg: dict, name_flag: str | None = None):
    block = dict(cfg.get("instance", {}))
    kind = name_flag or block.pop("kind", None)
    if kind is None:
        raise ConfigError("config needs an [instance] block with a kind")
    if name_flag is not None and "kind" in block:
        block.pop("kind")
    return make_instance(kind, **block)


def _objective_for(instance, opt_cfg: dict) -> str:
    obj = opt_cfg.get("objective")
    if obj is not None:
        return obj
    return "strongly_convex" if getattr(instance, "mu", None) else "nonconvex"


def _echo_config(cfg: dict, seed: int, out: str, path: str) -> None:
    echoed = {k: dict(v) for k, v in cfg.items()}
    io_block = echoed.setdefault("io", {})
    io_block["seed"] = seed
    io_block["out"] = out
    atomic_write_text(path, _emit_toml(echoed))


def _build_plan(cfg: dict, instance, force: bool) -> RunPlan:
    est = cfg.get("estimator")
    if not est:
        raise ConfigError("config needs an [estimator] block")
    kind = est.get("kind")
    if kind is None:
        raise ConfigError("[estimator] block needs a kind")
    opt = cfg.get("optimizer", {})
    objective = _objective_for(instance, opt)

    eps = est.get("epsilon")
    if eps is not None:
        # epsilon-driven: reuse the sweep planner's level / schedule /
        # horizon rules, then let explicit optimizer keys override
        x1 = np.asarray(opt["x1"], dtype=float) if "x1" in opt else np.asarray(
            instance.x1_default, dtype=float
        )
        if instance.has_truth("value_truth"):
            x_star, f_star = instance.solution()
            dist2 = float(np.sum((x1 - x_star) ** 2))
            value_gap = float(instance.value_truth(x1) - f_star)
        else:
            dist2, value_gap = 1.0, 1.0
        plan = _plan_for_cell(
            instance, objective, kind, float(eps), opt.get("schedule", "auto"),
            int(opt.get("max_iters", 2_000_000)), dist2, value_gap,
        )
    else:
        if "level" not in est and kind in ("lsgd", "vmlmc", "rtmlmc"):
            raise ConfigError(f"[estimator] needs a level or an epsilon for {kind}")
        if opt.get("gamma") is None and "schedule" in opt and opt["schedule"] != "auto":
            raise ConfigError("an explicit [optimizer] schedule needs gamma")
        plan = RunPlan(
            estimator=kind,
            level=est.get("level"),
            N=est.get("N"),
            batch=int(est.get("n_L", 1)),
            schedule=opt.get("schedule", "constant"),
            gamma=opt.get("gamma"),
            T=int(opt.get("T", 1000)),
        )
    casts = dict(framework=str, schedule=str, gamma=float, T=int,
                 D1=int, D2=int, Q_E=int, output=str)
    overrides = {}
    for key, cast in casts.items():
        if key in opt and opt[key] is not None:
            overrides[key] = cast(opt[key])
    if "N" in est:
        overrides["N"] = float(est["N"])
    if "n_L" in est:
        overrides["batch"] = int(est["n_L"])
    if force or est.get("force", False):
        overrides["force"] = True
    return dataclasses.replace(plan, **overrides) if overrides else plan


def _fail(exc: MlmcGradError) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(exit_code_for(exc))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

@click.group()
@click.version_option(version=__version__, prog_name="mlmc-grad")
def main() -> None:
    """Multilevel Monte Carlo gradient methods: runs, probes, sweeps."""


@main.command("run")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="root seed (overrides config)")
@click.option("--out", "out_dir", default=None,
              type=click.Path(file_okay=False), help="output directory")
@click.option("--force", is_flag=True, help="run estimators outside their variance regime")
def cmd_run(config_path, seed, out_dir, force) -> None:
    """Execute one optimization run; write trajectory.csv and a config echo."""
    try:
        cfg = _load_config(config_path)
        seed = _resolve_seed(seed, cfg)
        out = _resolve_out(out_dir, cfg)
        instance = _instance_from(cfg)
        plan = _build_plan(cfg, instance, force)
        opt = cfg.get("optimizer", {})
        x1 = np.asarray(opt["x1"], dtype=float) if "x1" in opt else None
        budget = float(opt["budget"]) if "budget" in opt else None
        result = execute_plan(
            instance, plan, run_rng(seed), x1=x1, budget=budget, record="full"
        )
        write_trajectory_csv(result, os.path.join(out, "trajectory.csv"))
        _echo_config(cfg, seed, out, os.path.join(out, "config_echo.toml"))
        click.echo(
            f"{instance.name}/{plan.estimator}: {result.steps_done} steps, "
            f"total cost {result.total_cost:.6g}, stopped on {result.stop_reason}"
        )
    except MlmcGradError as exc:
        _fail(exc)


@main.command("probe")
@click.option("--config", "config_path", default=None,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--kind", "probe_kind", type=click.Choice(["variance", "bias"]),
              default=None, help="which decay rate to probe")
@click.option("--instance", "instance_name", default=None,
              help="instance kind (shortcut for a config [instance] block)")
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False))
@click.option("--assert", "assert_band", is_flag=True,
              help="exit nonzero unless the fitted slope is inside its band")
def cmd_probe(config_path, probe_kind, instance_name, seed, out_dir, assert_band) -> None:
    """Estimate bias / variance decay rates and write probe CSVs."""
    try:
        cfg = _load_config(config_path)
        pcfg = cfg.get("probe", {})
        kind = probe_kind or pcfg.get("kind")
        if kind not in ("variance", "bias"):
            raise ConfigError("probe needs --kind variance|bias (or [probe] kind)")
        seed = _resolve_seed(seed, cfg)
        out = _resolve_out(out_dir, cfg)
        instance = _instance_from(cfg, instance_name)
        if "x" in pcfg:
            x = np.asarray(pcfg["x"], dtype=float)
        else:
            x = getattr(instance, "x_probe", None)
            if x is None:
                raise ConfigError(f"{instance.name} has no default probe point; set [probe] x")
        levels = tuple(int(l) for l in pcfg.get("levels", range(2, 10)))
        if kind == "variance":
            reps = int(pcfg.get("replications", 10_000))
            fit = probe_variance(instance, x, levels, replications=reps,
                                 rng=run_rng(seed))
        else:
            reps = int(pcfg.get("replications", 4096))
            fit = probe_bias(instance, x, levels, mode=pcfg.get("mode", "grad"),
                             replications=reps, rng=run_rng(seed))
        write_probe_csv(fit, os.path.join(out, f"probe_{kind}.csv"))
        band = RATE_BANDS.get((instance.name, kind))
        ok = band is None or in_band(fit.slope, band)
        click.echo(
            f"{instance.name} {kind} slope {fit.slope:+.4f}"
            + (f" band [{band[0]}, {band[1]}] {'pass' if ok else 'FAIL'}" if band else "")
            + (" (degenerate fit)" if fit.degenerate else "")
        )
        if assert_band and not ok:
            sys.exit(EXIT_ASSERT_FAILED)
    except MlmcGradError as exc:
        _fail(exc)


def _summary_for_sweep(res) -> list[SummaryRow]:
    rows = []
    for est, slope in sorted(res.slopes.items()):
        band = SWEEP_BANDS.get(est, (None, None))
        rows.append(SummaryRow(
            name=f"{res.spec.instance}:{est}:cost_slope",
            slope=math.nan if slope is None else slope,
            band_lo=band[0], band_hi=band[1],
        ))
    return rows


def _run_queue_preset(seed: int, out: str, jobs: int) -> list[SummaryRow]:
    inst = make_instance("queue_f2")
    cfg = _QUEUE_PRESET
    grid = grid_search(inst, resolution=cfg["grid_resolution"])
    atomic_write_text(
        os.path.join(out, "grid.csv"),
        "mu,p,value,resolution\n"
        f"{grid.mu:.10g},{grid.p:.10g},{grid.value:.10g},{grid.resolution:.10g}\n",
    )

    # first-passage half: budget-capped VR runs from the corner, stopped the
    # moment both coordinates are within tol of the grid argmin
    start = np.asarray(cfg["start"], dtype=float)
    tol = cfg["tol"]
    plan_vr = RunPlan(estimator="rtmlmc", framework="vr", T=200_000,
                      **cfg["vr"])
    hit_lines = ["seed,hit,cost,mu_out,p_out"]
    hits = 0
    for i in range(cfg["seeds"]):
        rng = cell_rng(seed, i)
        stop = lambda x, t: bool(np.all(np.abs(x - grid.x) <= tol))
        res = execute_plan(inst, plan_vr, rng, x1=start, budget=cfg["budget"],
                           stop_fn=stop, record="none")
        hit = res.stop_reason == "target"
        hits += hit
        hit_lines.append(
            f"{i},{str(hit).lower()},{res.total_cost:.10g},"
            f"{res.x_out[0]:.10g},{res.x_out[1]:.10g}"
        )
    atomic_write_text(os.path.join(out, "hits.csv"), "\n".join(hit_lines) + "\n")

    # paired half: same decaying schedule and gap target for both arms from a
    # start inside the basin, so the fixed-level arm crosses deterministically
    sched = dict(schedule="pl_decay", schedule_params=dict(cfg["paired_schedule"]))
    plan_rt = RunPlan(estimator="rtmlmc", level=cfg["vr"]["level"], T=500_000,
                      **sched)
    plan_ls = RunPlan(estimator="lsgd", level=cfg["vr"]["level"], T=500_000,
                      **sched)
    target = Target("gap", cfg["paired_gap"], on="point")
    cmp = paired_compare(
        inst, plan_ls, plan_rt, target, cfg["seeds"],
        budget=cfg["paired_budget"], base_seed=seed,
        x1=np.asarray(cfg["paired_start"], dtype=float),
    )
    lines = ["seed,cost_lsgd,cost_rtmlmc,censored_lsgd,censored_rtmlmc,ratio"]
    for i in range(len(cmp.costs_a)):
        lines.append(
            f"{i},{cmp.costs_a[i]:.10g},{cmp.costs_b[i]:.10g},"
            f"{str(cmp.censored_a[i]).lower()},{str(cmp.censored_b[i]).lower()},"
            f"{cmp.ratios[i]:.10g}"
        )
    atomic_write_text(os.path.join(out, "paired.csv"), "\n".join(lines) + "\n")
    return [
        SummaryRow(name="queue_f2:vr_rtmlmc:hit_rate",
                   slope=hits / cfg["seeds"], band_lo=0.8, band_hi=None),
        SummaryRow(name="queue_f2:lsgd_over_rtmlmc:median_cost_ratio",
                   slope=cmp.median_ratio, band_lo=3.0, band_hi=None),
    ]


@main.command("sweep")
@click.option("--config", "config_path", default=None,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--preset", type=click.Choice(["table1-sc", "queue-f2"]), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False))
@click.option("--jobs", type=int, default=1, help="sweep cells run in this many workers")
@click.option("--assert", "assert_band", is_flag=True,
              help="exit nonzero unless every summary row passes")
def cmd_sweep(config_path, preset, seed, out_dir, jobs, assert_band) -> None:
    """Run a cost-at-crossing sweep (or a named preset); write CSV + summary."""
    try:
        cfg = _load_config(config_path)
        seed = _resolve_seed(seed, cfg)
        out = _resolve_out(out_dir, cfg)
        if preset == "queue-f2":
            rows = _run_queue_preset(seed, out, jobs)
        else:
            if preset == "table1-sc":
                spec = SweepSpec(
                    instance="cso_toy",
                    estimators=("lsgd", "rtmlmc"),
                    eps_grid=tuple(float(e) for e in np.logspace(-1, -3, 5)),
                    seeds=9,
                    objective="strongly_convex",
                    seed=seed,
                )
            else:
                block = cfg.get("sweep")
                if not block:
                    raise ConfigError("sweep needs --preset or a [sweep] config block")
                block = dict(block)
                block.setdefault("seed", seed)
                if "instance" not in block:
                    inst_block = cfg.get("instance", {})
                    if "kind" in inst_block:
                        block["instance"] = inst_block["kind"]
                        params = {k: v for k, v in inst_block.items() if k != "kind"}
                        if params:
                            block.setdefault("instance_params", params)
                try:
                    spec = SweepSpec(**block)
                except TypeError as exc:
                    raise ConfigError(f"bad [sweep] block: {exc}") from exc
            res = run_sweep(spec, jobs=jobs)
            write_sweep_csv(res, os.path.join(out, "sweep.csv"))
            rows = _summary_for_sweep(res)
        write_summary_csv(rows, os.path.join(out, "summary.csv"))
        for r in rows:
            click.echo(f"{r.name}: {r.slope:+.4f} {'pass' if r.passed else 'FAIL'}")
        if assert_band and not all(r.passed for r in rows):
            sys.exit(EXIT_ASSERT_FAILED)
    except MlmcGradError as exc:
        _fail(exc)


@main.command("grid")
@click.option("--config", "config_path", default=None,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--instance", "instance_name", default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False))
@click.option("--resolution", type=float, default=None)
def cmd_grid(config_path, instance_name, seed, out_dir, resolution) -> None:
    """Exhaustive ground-truth grid search over a boxed instance."""
    try:
        cfg = _load_config(config_path)
        out = _resolve_out(out_dir, cfg)
        if instance_name is None and "instance" not in cfg:
            instance_name = "queue_f2"
        instance = _instance_from(cfg, instance_name)
        if not hasattr(instance, "value_truth_grid"):
            raise InvalidInputError(
                f"{instance.name} has no boxed domain to grid-search"
            )
        res = resolution if resolution is not None else float(
            cfg.get("grid", {}).get("resolution", 0.01)
        )
        result = grid_search(instance, resolution=res)
        atomic_write_text(
            os.path.join(out, "grid.csv"),
            "mu,p,value,resolution\n"
            f"{result.mu:.10g},{result.p:.10g},{result.value:.10g},{result.resolution:.10g}\n",
        )
        click.echo(
            f"{instance.name}: optimum ({result.mu:.4g}, {result.p:.4g}) "
            f"value {result.value:.6g} at resolution {result.resolution:g}"
        )
    except MlmcGradError as exc:
        _fail(exc)


if __name__ == "__main__":
    main()
