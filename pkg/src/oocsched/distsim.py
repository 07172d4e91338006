"""Data-parallel extension: the five-stage per-iteration pipeline.

Each worker runs the single-device schedule (forward/backward with swaps
and recompute).  On top of that, every block's gradients are swapped out to
the host right after its backward step, gradient groups are exchanged
across workers in reverse block order as soon as they are host-resident,
and the exchanged gradients are applied to the weights on the host CPU.  A
block's forward pass in the next iteration waits for its group's host
update, so late updates surface as start-of-iteration stalls.

Workers are homogeneous and run the same plan, so the per-worker timeline
is simulated once and replicated; the collective network is a single
shared resource serializing group exchanges.  With one worker the exchange
degenerates to zero cost and only swapped blocks take the host update
path (resident blocks update in place during backward); with two or more
workers every block's gradients must travel through the exchange.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Optional

from .cost_model import HardwareSpec, block_cost
from .model_ir import ModelGraph
from .plan import Action, ExecutionPlan
from .simulator import (COMPUTE, XFER_IN, XFER_OUT, XFER_SHARED, EngineOp,
                        build_engine_ops, run_engine)

_EPS = 1e-9

NETWORK = "network"
HOST = "host"


class Collective(str, enum.Enum):
    RING = "ring"
    FLAT = "flat"


class DistConfigError(Exception):
    pass


@dataclass(frozen=True)
class DistConfig:
    workers: int
    collective: Collective = Collective.RING
    net_bw: float = 12.5e9
    net_latency: float = 0.0
    groups: int = 0            # 0 = one group per block

    def __post_init__(self):
        if self.workers < 1:
            raise DistConfigError("workers must be >= 1")
        if self.net_bw <= 0:
            raise DistConfigError("net_bw must be strictly positive")
        if self.net_latency < 0:
            raise DistConfigError("net_latency must be non-negative")
        if self.groups < 0:
            raise DistConfigError("groups must be >= 0 (0 = per block)")


def allreduce_time(num_bytes: float, cfg: DistConfig) -> float:
    """Cost of one all-reduce across the workers.

    Ring: 2(P-1)/P bandwidth terms plus 2(P-1) latency hops; flat: every
    peer ships its share to one root and back in a single exchange.
    """
    if num_bytes < 0:
        raise DistConfigError("bytes must be non-negative")
    p = cfg.workers
    if p == 1:
        return 0.0
    if cfg.collective is Collective.RING:
        return 2.0 * (p - 1) / p * num_bytes / cfg.net_bw + 2.0 * (p - 1) * cfg.net_latency
    return (p - 1) * num_bytes / cfg.net_bw + cfg.net_latency


@dataclass(frozen=True)
class DistEvent:
    worker: int                # -1 = collective (all workers)
    resource: str
    t_start: float
    t_end: float
    action: str
    block: int                 # -1 for group-level events
    group: int                 # -1 for per-block events
    iteration: int
    stall_before: float


@dataclass(frozen=True)
class DistTrace:
    events: tuple[DistEvent, ...]
    workers: int
    iteration_times: tuple[float, ...]
    iteration_time: float          # steady state (last measured)
    exposed_comm: float
    peak_mem: float
    makespan: float

    def worker_events(self, worker: int = 0):
        return [e for e in self.events if e.worker in (worker, -1)]

    def to_csv(self) -> str:
        lines = ["worker,resource,t_start,t_end,action,group"]
        for e in self.events:
            lines.append(f"{e.worker},{e.resource},{e.t_start:.9g},{e.t_end:.9g},"
                         f"{e.action},{e.group}")
        return "\n".join(lines) + "\n"

    def summary_csv(self, throughput: Optional[float] = None) -> str:
        tp = "" if throughput is None else f"{throughput:.9g}"
        return ("P,iteration_time,throughput,exposed_comm\n"
                f"{self.workers},{self.iteration_time:.9g},{tp},{self.exposed_comm:.9g}\n")


def assign_groups(num_blocks: int, groups: int) -> list[list[int]]:
    """Contiguous block groups; exchange order is reverse (end of model first)."""
    count = num_blocks if groups == 0 else min(groups, num_blocks)
    out = []
    base = num_blocks // count
    extra = num_blocks % count
    start = 1
    for gi in range(count):
        size = base + (1 if gi < extra else 0)
        out.append(list(range(start, start + size)))
        start += size
    return out


def _host_path_blocks(plan: ExecutionPlan, cfg: DistConfig) -> set[int]:
    if cfg.workers >= 2:
        return {b.id for b in plan.blocks}
    return set(plan.swapped_blocks())


def simulate_distributed(plan: ExecutionPlan, g: ModelGraph, hw: HardwareSpec,
                         cfg: DistConfig, iterations: int = 3,
                         _zero_network: bool = False) -> DistTrace:
    """Run ``iterations`` training iterations of the 5-stage pipeline."""
    if iterations < 2:
        raise DistConfigError("need at least 2 iterations to observe the steady state")

    costs = {b.id: block_cost(b, g, hw) for b in plan.blocks}
    swap_rate = hw.swap_throughput()
    host_blocks = _host_path_blocks(plan, cfg)
    groups = assign_groups(len(plan.blocks), cfg.groups)
    group_of = {b: gi for gi, members in enumerate(groups, start=1) for b in members}
    # a group takes the host path if any member does (P=1: swapped members only)
    group_bytes = {gi: sum(costs[b].grad_bytes for b in members if b in host_blocks)
                   for gi, members in enumerate(groups, start=1)}
    group_wt = {gi: sum(costs[b].weight_elems for b in members if b in host_blocks)
                for gi, members in enumerate(groups, start=1)}

    base_ops = build_engine_ops(plan, g, hw)
    in_res = XFER_IN if hw.duplex else XFER_SHARED
    out_res = XFER_OUT if hw.duplex else XFER_SHARED

    all_ops: list[EngineOp] = []
    update_done_prev: dict[int, int] = {}

    for it in range(1, iterations + 1):
        offset = len(all_ops)
        weight_in_idx: dict[int, int] = {}
        if it >= 2:
            # updated weights return before the block's forward pass
            for b in sorted(host_blocks):
                dep = update_done_prev[group_of[b]]
                idx = len(all_ops)
                all_ops.append(EngineOp(
                    tag={"action": "weight_in", "block": b, "iteration": it,
                         "group": group_of[b]},
                    resource=in_res, duration=costs[b].wt_bytes / swap_rate,
                    deps=(dep,),
                ))
                weight_in_idx[b] = idx

        bw_done: dict[int, int] = {}
        for op in base_ops:
            idx = len(all_ops)
            shifted = EngineOp(
                tag=dict(op.tag, iteration=it),
                resource=op.resource, duration=op.duration,
                deps=tuple(d + offset for d in op.deps),
                start_gate=None if op.start_gate is None else op.start_gate + offset,
                alloc_bytes=op.alloc_bytes, free_bytes_on_end=op.free_bytes_on_end,
                missing=op.missing,
            )
            b = op.tag["block"]
            if op.tag["action"] == "fw" and b in weight_in_idx:
                shifted = replace(shifted, deps=shifted.deps + (weight_in_idx[b],))
            if op.tag["action"] == "bw":
                if b in host_blocks:
                    # gradients reuse the space the block frees; they leave
                    # the device only when their swap-out completes
                    held = min(costs[b].grad_bytes, shifted.free_bytes_on_end)
                    shifted = replace(shifted,
                                      free_bytes_on_end=shifted.free_bytes_on_end - held)
                bw_done[b] = idx
            all_ops.append(shifted)

        grad_out_idx: dict[int, int] = {}
        for b in sorted(host_blocks, reverse=True):
            idx = len(all_ops)
            all_ops.append(EngineOp(
                tag={"action": "grad_out", "block": b, "iteration": it,
                     "group": group_of[b]},
                resource=out_res, duration=costs[b].grad_bytes / swap_rate,
                deps=(bw_done[b],),
                free_bytes_on_end=min(costs[b].grad_bytes, costs[b].bytes),
            ))
            grad_out_idx[b] = idx

        update_done: dict[int, int] = {}
        for gi in sorted(group_bytes, reverse=True):   # end of the model first
            members = [b for b in groups[gi - 1] if b in host_blocks]
            if not members:
                continue
            deps = tuple(grad_out_idx[b] for b in members)
            exch_time = 0.0 if _zero_network else allreduce_time(group_bytes[gi], cfg)
            if cfg.workers >= 2:
                idx = len(all_ops)
                all_ops.append(EngineOp(
                    tag={"action": "exchange", "group": gi, "iteration": it, "block": -1},
                    resource=NETWORK, duration=exch_time, deps=deps,
                ))
                deps = (idx,)
            idx = len(all_ops)
            all_ops.append(EngineOp(
                tag={"action": "host_update", "group": gi, "iteration": it, "block": -1},
                resource=HOST, duration=group_wt[gi] / hw.host_update_rate, deps=deps,
            ))
            update_done[gi] = idx
        update_done_prev = update_done

    resources = [COMPUTE, XFER_IN, XFER_OUT] if hw.duplex else [COMPUTE, XFER_SHARED]
    resources += [NETWORK, HOST]
    raw_events, peak, makespan = run_engine(all_ops, resources, hw.capacity_bytes)

    events = []
    for raw in raw_events:
        tag = raw.tag
        worker = -1 if raw.resource == NETWORK else 0
        events.append(DistEvent(
            worker=worker, resource=raw.resource, t_start=raw.t_start, t_end=raw.t_end,
            action=tag["action"], block=tag.get("block", -1), group=tag.get("group", -1),
            iteration=tag.get("iteration", 0), stall_before=raw.stall_before,
        ))
    events.sort(key=lambda e: (e.t_start, e.resource, e.block))

    # iteration boundaries: completion of the first block's backward step
    bw1_ends = sorted(e.t_end for e in events if e.action == "bw" and e.block == 1)
    iteration_times = tuple(bw1_ends[i] - bw1_ends[i - 1] for i in range(1, len(bw1_ends)))
    iteration_time = iteration_times[-1] if iteration_times else makespan

    exposed = _exposed_comm(events, iterations)
    trace = DistTrace(
        events=tuple(events), workers=cfg.workers,
        iteration_times=iteration_times, iteration_time=iteration_time,
        exposed_comm=exposed, peak_mem=peak, makespan=makespan,
    )
    _check_lower_bound(trace, plan, g, hw, cfg)
    return trace


def _exposed_comm(events, last_iteration: int) -> float:
    """Steady-state exchange time not overlapped by any compute activity
    (measured on the final iteration's exchanges)."""
    compute = sorted((e.t_start, e.t_end) for e in events
                     if e.resource == COMPUTE)
    merged = []
    for lo, hi in compute:
        if merged and lo <= merged[-1][1] + _EPS:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    exposed = 0.0
    for e in events:
        if e.action != "exchange" or e.iteration != last_iteration:
            continue
        hidden = 0.0
        for lo, hi in merged:
            hidden += max(0.0, min(hi, e.t_end) - max(lo, e.t_start))
        exposed += (e.t_end - e.t_start) - hidden
    return max(exposed, 0.0)


def _check_lower_bound(trace: DistTrace, plan, g, hw, cfg):
    """Per-run sanity: an iteration can't beat its compute or its serialized
    exchanges."""
    costs = {b.id: block_cost(b, g, hw) for b in plan.blocks}
    compute_total = 0.0
    for stage in plan.stages:
        for op in stage.ops:
            c = costs[op.block]
            if op.action in (Action.FW, Action.RECOMPUTE_FW):
                compute_total += c.fwd_seconds
            elif op.action is Action.BW:
                compute_total += c.bwd_seconds
    last_it = max((e.iteration for e in trace.events if e.action == "exchange"),
                  default=0)
    comm_total = sum(e.t_end - e.t_start for e in trace.events
                     if e.action == "exchange" and e.iteration == last_it)
    bound = max(compute_total, comm_total)
    if trace.iteration_time + 1e-6 < bound:
        raise RuntimeError(
            f"iteration time {trace.iteration_time:g}s under the lower bound {bound:g}s")


def simulate_monolithic(plan, g, hw, cfg: DistConfig, iterations: int = 3) -> DistTrace:
    """Same pipeline with a single end-of-backward exchange (for comparison)."""
    return simulate_distributed(plan, g, hw, replace(cfg, groups=1), iterations)


@dataclass(frozen=True)
class ScalePoint:
    workers: int
    iteration_time: float
    throughput: float      # global samples per second
    exposed_comm: float


def scaling_sweep(plan, g: ModelGraph, hw: HardwareSpec, cfg: DistConfig,
                  worker_counts, iterations: int = 3) -> list[ScalePoint]:
    points = []
    for p in worker_counts:
        trace = simulate_distributed(plan, g, hw, replace(cfg, workers=p), iterations)
        points.append(ScalePoint(
            workers=p,
            iteration_time=trace.iteration_time,
            throughput=p * g.batch_size / trace.iteration_time,
            exposed_comm=trace.exposed_comm,
        ))
    return points


def sweep_csv(points) -> str:
    lines = ["P,iteration_time,throughput,exposed_comm"]
    for pt in points:
        lines.append(f"{pt.workers},{pt.iteration_time:.9g},{pt.throughput:.9g},"
                     f"{pt.exposed_comm:.9g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# config file:  key = value per line
# ---------------------------------------------------------------------------

def parse_dist_text(text: str) -> DistConfig:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DistConfigError(f"line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "workers":
            values["workers"] = int(float(value))
        elif key == "collective":
            try:
                values["collective"] = Collective(value)
            except ValueError:
                raise DistConfigError(f"line {lineno}: unknown collective {value!r}") from None
        elif key == "net_bw":
            values["net_bw"] = float(value)
        elif key == "net_latency":
            values["net_latency"] = float(value)
        elif key == "groups":
            values["groups"] = int(float(value))
        else:
            raise DistConfigError(f"line {lineno}: unknown key {key!r}")
    if "workers" not in values:
        raise DistConfigError("missing workers")
    return DistConfig(**values)


def parse_dist(path) -> DistConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_dist_text(fh.read())
