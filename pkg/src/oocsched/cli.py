"""Command-line frontend: plan, simulate, compare, sweep, dist, fuzz-validate.

Exit codes: 0 success, 1 infeasible model/plan, 2 usage or I/O error,
3 internal invariant failure.
"""

from __future__ import annotations

import argparse
import os
import random
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

from . import distsim, planner, simulator, zoo
from .cost_model import HardwareFormatError, parse_hardware
from .model_ir import ModelFormatError, ModelValidationError, parse_model
from .occupancy import analytic_report, find_theta
from .plan import Strategy, plan_string, read_plan, write_plan
from .planner import InfeasibleModelError, PlannerError

EXIT_OK = 0
EXIT_INFEASIBLE = 1
EXIT_USAGE = 2
EXIT_INTERNAL = 3

_STRATEGIES = {s.value: s for s in Strategy}


class _CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _load_inputs(args):
    try:
        g = parse_model(args.model)
        hw = parse_hardware(args.hw)
    except FileNotFoundError as exc:
        raise _CliError(f"missing file: {exc.filename}", EXIT_USAGE) from exc
    except (ModelFormatError, ModelValidationError, HardwareFormatError) as exc:
        raise _CliError(f"bad input: {exc}", EXIT_USAGE) from exc
    if getattr(args, "batch", None):
        g = g.with_batch_size(args.batch)
    return g, hw


def _outdir(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write(path: str, content: str):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(content)


def _plot_lines(path, xs, series, xlabel, ylabel):
    """Deterministic SVG line/bar chart; series = {label: ys}."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = "oocsched"
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, ys in series.items():
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_plan(args) -> int:
    g, hw = _load_inputs(args)
    plan = planner.plan_model(g, hw, strategy=_STRATEGIES[args.strategy],
                              solver=args.solver, max_blocks=args.max_blocks)
    trace = simulator.simulate(plan, g, hw)
    out = _outdir(args)
    write_plan(plan, text_path=os.path.join(out, "plan.txt"),
               json_path=os.path.join(out, "plan.json"))
    print(plan_string(plan))
    theta = "none" if plan.theta is None else str(plan.theta)
    print(f"predicted_makespan_s: {plan.predicted_makespan:.9g}")
    print(f"theta_step: {theta}")
    print(f"peak_mem_bytes: {trace.peak_mem:.9g} (capacity {hw.capacity_bytes:.9g})")
    return EXIT_OK


def cmd_simulate(args) -> int:
    g, hw = _load_inputs(args)
    if args.plan:
        try:
            plan = read_plan(args.plan)
        except FileNotFoundError as exc:
            raise _CliError(f"missing file: {exc.filename}", EXIT_USAGE) from exc
        violations = planner.validate_plan(plan, g, hw)
        if violations:
            print("plan validation failed:", file=sys.stderr)
            for v in violations:
                print(f"  - {v}", file=sys.stderr)
            return EXIT_INFEASIBLE
    else:
        plan = planner.plan_model(g, hw, strategy=_STRATEGIES[args.strategy],
                                  solver=args.solver, max_blocks=args.max_blocks)
    trace = simulator.simulate(plan, g, hw)
    out = _outdir(args)
    _write(os.path.join(out, "trace.csv"), trace.to_csv())
    theta = find_theta(plan, g, hw)
    _write(os.path.join(out, "summary.csv"), trace.summary_csv(theta=theta))
    profile = simulator.stall_profile(trace, plan)
    _write(os.path.join(out, "stall_profile.csv"), simulator.stall_profile_csv(profile))
    report = analytic_report(plan, g, hw)
    _write(os.path.join(out, "occupancy.csv"), report.to_csv())
    _write(os.path.join(out, "occupancy_summary.csv"), report.summary())
    if args.plot:
        layers = [row[0] for row in profile]
        _plot_lines(os.path.join(out, "stall_profile.svg"), layers,
                    {"stall": [row[1] for row in profile]},
                    "first layer of block", "backward stall (s)")
    print(trace.summary_csv(theta=theta), end="")
    return EXIT_OK


def cmd_compare(args) -> int:
    g, hw = _load_inputs(args)
    results = simulator.compare_strategies(g, hw, solver=args.solver,
                                           max_blocks=args.max_blocks)
    out = _outdir(args)
    lines = ["strategy,makespan,total_stall,mean_occupancy"]
    print(f"{'strategy':<20} {'makespan':>12} {'total_stall':>12} {'occupancy':>10}")
    for strategy, res in results.items():
        lines.append(f"{strategy.value},{res.makespan:.9g},{res.total_stall:.9g},"
                     f"{res.mean_occupancy:.9g}")
        print(f"{strategy.value:<20} {res.makespan:>12.6g} {res.total_stall:>12.6g} "
              f"{res.mean_occupancy:>10.4f}")
    _write(os.path.join(out, "compare.csv"), "\n".join(lines) + "\n")
    return EXIT_OK


def _sweep_point(payload):
    """One sweep sample; module-level so process pools can pickle it."""
    (axis, value, model_path, hw_path, batch, strategy, solver,
     max_blocks, dist_path, iterations) = payload
    g = parse_model(model_path)
    hw = parse_hardware(hw_path)
    if batch:
        g = g.with_batch_size(batch)
    if axis == "batch":
        g = g.with_batch_size(int(value))
    elif axis == "bandwidth":
        hw = replace(hw, interconnect_bw=float(value))
    plan = planner.plan_model(g, hw, strategy=_STRATEGIES[strategy], solver=solver,
                              max_blocks=max_blocks)
    if axis == "workers":
        cfg = distsim.parse_dist(dist_path) if dist_path else distsim.DistConfig(workers=1)
        cfg = replace(cfg, workers=int(value))
        trace = distsim.simulate_distributed(plan, g, hw, cfg, iterations=iterations)
        seconds = trace.iteration_time
        samples = int(value) * g.batch_size
    else:
        trace = simulator.simulate(plan, g, hw)
        seconds = trace.makespan
        samples = g.batch_size
    return (value, seconds, samples / seconds)


def cmd_sweep(args) -> int:
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise _CliError(f"bad --values list: {args.values!r}", EXIT_USAGE) from None
    if not values:
        raise _CliError("--values must list at least one point", EXIT_USAGE)
    _load_inputs(args)   # fail fast on bad files
    payloads = [(args.axis, v, args.model, args.hw, args.batch, args.strategy,
                 args.solver, args.max_blocks, args.dist, args.iterations)
                for v in values]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_point, payloads))
    else:
        rows = [_sweep_point(p) for p in payloads]
    out = _outdir(args)
    lines = [f"{args.axis},seconds,samples_per_s"]
    for value, seconds, tput in rows:
        lines.append(f"{value:g},{seconds:.9g},{tput:.9g}")
    _write(os.path.join(out, "sweep.csv"), "\n".join(lines) + "\n")
    if args.plot:
        _plot_lines(os.path.join(out, "sweep.svg"), [r[0] for r in rows],
                    {"samples/s": [r[2] for r in rows]}, args.axis, "samples per second")
    print("\n".join(lines))
    return EXIT_OK


def cmd_dist(args) -> int:
    g, hw = _load_inputs(args)
    try:
        cfg = distsim.parse_dist(args.dist)
    except FileNotFoundError as exc:
        raise _CliError(f"missing file: {exc.filename}", EXIT_USAGE) from exc
    except distsim.DistConfigError as exc:
        raise _CliError(f"bad dist config: {exc}", EXIT_USAGE) from exc
    plan = planner.plan_model(g, hw, strategy=_STRATEGIES[args.strategy],
                              solver=args.solver, max_blocks=args.max_blocks)
    trace = distsim.simulate_distributed(plan, g, hw, cfg, iterations=args.iterations)
    out = _outdir(args)
    _write(os.path.join(out, "dist_trace.csv"), trace.to_csv())
    throughput = cfg.workers * g.batch_size / trace.iteration_time
    _write(os.path.join(out, "dist_summary.csv"), trace.summary_csv(throughput))
    print(trace.summary_csv(throughput), end="")
    return EXIT_OK


def cmd_fuzz_validate(args) -> int:
    """Randomized planning/validation battery; exits 3 on any violation."""
    rng = random.Random(args.seed)
    plans_checked = 0
    corrupted_rejected = 0
    corrupted_total = 0
    for i in range(args.count):
        g = zoo.random_linear_model(rng, rng.randint(2, 8))
        hw = zoo.random_hardware(rng, g)
        try:
            plan = planner.plan_model(g, hw, strategy=Strategy.CAPACITY_RECOMPUTE,
                                      solver="dp")
        except InfeasibleModelError:
            continue
        violations = planner.validate_plan(plan, g, hw)
        if violations:
            print(f"[{i}] generated plan failed validation: {violations[0]}",
                  file=sys.stderr)
            return EXIT_INTERNAL
        trace = simulator.simulate(plan, g, hw)
        if trace.peak_mem > hw.capacity_bytes + 1e-6:
            print(f"[{i}] peak {trace.peak_mem} exceeded capacity {hw.capacity_bytes}",
                  file=sys.stderr)
            return EXIT_INTERNAL
        plans_checked += 1
        # capacity-violating variant must be rejected
        tight = replace(hw, capacity_bytes=max(b.swap_bytes for b in plan.blocks) * 0.9)
        corrupted_total += 1
        if planner.validate_plan(plan, g, tight):
            corrupted_rejected += 1
        else:
            print(f"[{i}] capacity-violating plan slipped through", file=sys.stderr)
            return EXIT_INTERNAL
    print(f"checked {plans_checked} plans; rejected {corrupted_rejected}/"
          f"{corrupted_total} capacity-violating variants")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oocsched",
        description="Plan and simulate out-of-core training schedules.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, model=True):
        if model:
            p.add_argument("--model", required=True, help="model graph file")
            p.add_argument("--hw", required=True, help="hardware spec file")
            p.add_argument("--batch", type=int, default=None,
                           help="override the model's batch size")
        p.add_argument("--strategy", choices=sorted(_STRATEGIES),
                       default=Strategy.CAPACITY_RECOMPUTE.value)
        p.add_argument("--solver", choices=["auto", "exhaustive", "dp"], default="auto")
        p.add_argument("--max-blocks", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory (default: cwd)")

    p = sub.add_parser("plan", help="compute and print an execution plan")
    add_common(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="simulate a plan and emit trace CSVs")
    add_common(p)
    p.add_argument("--plan", default=None, help="existing plan.json (else plan in-flight)")
    p.add_argument("--plot", action="store_true", help="also emit SVG charts")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="compare the three swap strategies")
    add_common(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="sweep batch size, worker count or bandwidth")
    add_common(p)
    p.add_argument("--axis", choices=["batch", "workers", "bandwidth"], required=True)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--dist", default=None, help="dist config (workers axis)")
    p.add_argument("--iterations", type=int, default=3)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dist", help="simulate data-parallel training")
    add_common(p)
    p.add_argument("--dist", required=True, help="dist config file")
    p.add_argument("--iterations", type=int, default=3)
    p.set_defaults(func=cmd_dist)

    p = sub.add_parser("fuzz-validate", help="randomized plan/validator battery")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fuzz_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except InfeasibleModelError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except PlannerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except simulator.DeadlockError as exc:
        print(f"internal: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except RuntimeError as exc:
        print(f"internal: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
