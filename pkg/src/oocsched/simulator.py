"""Deterministic discrete-event simulation of an execution plan.

One compute engine plus one or two transfer channels (duplex interconnects
get independent in/out channels).  Ops are queued per resource in stage
order and start when the head of a queue has (a) its data dependencies
complete, (b) for transfers, every compute op of earlier stages already
started, and (c) enough free device memory for its allocation.  Memory is
a byte ledger: forward/recompute/swap-in ops reserve a block's bytes at
start; swap-out, backward completion and recompute-discard release them.

With ``enforce_capacity=True`` (default) allocations wait for free space,
so accepted plans can never exceed capacity; passing False lets the ledger
run open-loop, which is how deliberately broken plans are shown to
overflow.  Circular waits are detected and reported as a deadlock naming
the blocked ops.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .cost_model import HardwareSpec, block_cost
from .model_ir import ModelGraph
from .occupancy import occupancy_from_times
from .plan import Action, ExecutionPlan, PlanOp, Strategy, skip_requirement_map

_EPS = 1e-12

COMPUTE = "compute"
XFER_IN = "xfer_in"
XFER_OUT = "xfer_out"
XFER_SHARED = "xfer"


class DeadlockError(Exception):
    def __init__(self, blocked):
        self.blocked = list(blocked)
        super().__init__("simulation deadlock; blocked ops: " + "; ".join(self.blocked))


# ---------------------------------------------------------------------------
# generic event engine (also used by the distributed simulator)
# ---------------------------------------------------------------------------

@dataclass
class EngineOp:
    tag: dict
    resource: str
    duration: float
    deps: tuple = ()            # op indices that must have completed
    start_gate: Optional[int] = None   # op index that must have started
    alloc_bytes: float = 0.0
    free_bytes_on_end: float = 0.0
    missing: Optional[str] = None      # unsatisfiable precondition, if any


@dataclass
class EngineEvent:
    tag: dict
    resource: str
    t_start: float
    t_end: float
    stall_before: float


def run_engine(ops, resource_order, capacity, enforce_capacity=True):
    """Run ops to completion; returns (events, peak_bytes, makespan)."""
    queues = {r: [i for i, op in enumerate(ops) if op.resource == r]
              for r in resource_order}
    heads = {r: 0 for r in resource_order}
    running = {}                       # resource -> (op index, end time)
    started = [False] * len(ops)
    done = [False] * len(ops)
    events: list[Optional[EngineEvent]] = [None] * len(ops)
    last_end = {r: 0.0 for r in resource_order}
    used = 0.0
    peak = 0.0
    now = 0.0
    remaining = len(ops)

    def startable(idx):
        op = ops[idx]
        if op.missing is not None:
            return False
        if any(not done[d] for d in op.deps):
            return False
        if op.start_gate is not None and not started[op.start_gate]:
            return False
        if enforce_capacity and op.alloc_bytes > 0 and used + op.alloc_bytes > capacity + _EPS:
            return False
        return True

    while remaining > 0:
        progressed = True
        while progressed:
            progressed = False
            for r in resource_order:
                if r in running:
                    continue
                if heads[r] >= len(queues[r]):
                    continue
                idx = queues[r][heads[r]]
                if not startable(idx):
                    continue
                op = ops[idx]
                used += op.alloc_bytes
                peak = max(peak, used)
                started[idx] = True
                events[idx] = EngineEvent(
                    tag=op.tag, resource=r, t_start=now,
                    t_end=now + op.duration,
                    stall_before=max(0.0, now - last_end[r]),
                )
                running[r] = (idx, now + op.duration)
                heads[r] += 1
                progressed = True
        if not running:
            if remaining > 0:
                raise DeadlockError(_blocked_reasons(ops, queues, heads, started, done,
                                                     used, capacity, enforce_capacity))
            break
        # advance to the earliest completion; finish everything ending then
        now = min(end for _, end in running.values())
        for r in list(resource_order):
            if r in running:
                idx, end = running[r]
                if end <= now + _EPS:
                    del running[r]
                    done[idx] = True
                    used -= ops[idx].free_bytes_on_end
                    last_end[r] = end
                    remaining -= 1
    makespan = max((e.t_end for e in events if e is not None), default=0.0)
    return [e for e in events if e is not None], peak, makespan


def _blocked_reasons(ops, queues, heads, started, done, used, capacity, enforce):
    reasons = []
    for r, q in queues.items():
        if heads[r] >= len(q):
            continue
        idx = q[heads[r]]
        op = ops[idx]
        why = []
        if op.missing:
            why.append(op.missing)
        unmet = [ops[d].tag for d in op.deps if not done[d]]
        if unmet:
            why.append("waiting on " + ", ".join(_tag_str(t) for t in unmet))
        if op.start_gate is not None and not started[op.start_gate]:
            why.append(f"gated behind {_tag_str(ops[op.start_gate].tag)}")
        if enforce and op.alloc_bytes > 0 and used + op.alloc_bytes > capacity + _EPS:
            why.append(f"needs {op.alloc_bytes:g} B but only {capacity - used:g} B free")
        reasons.append(f"{_tag_str(op.tag)}: " + ("; ".join(why) if why else "unknown"))
    return reasons


def _tag_str(tag: dict) -> str:
    parts = [str(tag.get("action", "?"))]
    if "block" in tag:
        parts.append(f"block {tag['block']}")
    if "group" in tag:
        parts.append(f"group {tag['group']}")
    if "iteration" in tag:
        parts.append(f"iter {tag['iteration']}")
    return " ".join(parts)


# ---------------------------------------------------------------------------
# single-device simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimEvent:
    t_start: float
    t_end: float
    resource: str
    block: int
    action: Action
    stall_before: float


@dataclass(frozen=True)
class StageOccupancy:
    stage_id: int
    occupancy: float
    busy_s: float
    idle_s: float


@dataclass(frozen=True)
class SimTrace:
    events: tuple[SimEvent, ...]
    makespan: float
    total_stall: float
    peak_mem: float
    per_stage_occupancy: tuple[StageOccupancy, ...]

    def compute_events(self):
        return [e for e in self.events
                if e.action in (Action.FW, Action.BW, Action.RECOMPUTE_FW)]

    def backward_steps(self):
        """(ordinal, event) per backward-phase compute event, in time order."""
        steps = [e for e in self.compute_events()
                 if e.action in (Action.BW, Action.RECOMPUTE_FW)]
        steps.sort(key=lambda e: e.t_start)
        return list(enumerate(steps, start=1))

    def first_stall_backward_step(self, eps=1e-9) -> Optional[int]:
        for ordinal, event in self.backward_steps():
            if event.stall_before > eps:
                return ordinal
        return None

    def boundary_stall(self) -> float:
        steps = self.backward_steps()
        return steps[0][1].stall_before if steps else 0.0

    def mean_occupancy(self) -> float:
        busy = sum(e.t_end - e.t_start for e in self.compute_events())
        return busy / self.makespan if self.makespan > 0 else 1.0

    def to_csv(self) -> str:
        lines = ["t_start,t_end,resource,block,action,stall_before"]
        for e in self.events:
            lines.append(f"{e.t_start:.9g},{e.t_end:.9g},{e.resource},"
                         f"{e.block},{e.action.value},{e.stall_before:.9g}")
        return "\n".join(lines) + "\n"

    def summary_csv(self, theta=None) -> str:
        theta_s = "none" if theta is None else str(theta)
        return ("makespan,total_stall,peak_mem,mean_occupancy,theta_step\n"
                f"{self.makespan:.9g},{self.total_stall:.9g},{self.peak_mem:.9g},"
                f"{self.mean_occupancy():.9g},{theta_s}\n")


_QUEUE_PRIORITY = {
    Action.FW: 0, Action.BW: 0, Action.RECOMPUTE_FW: 0,
    Action.SWAP_IN: 1, Action.SWAP_OUT: 2,
}


def _flatten(plan: ExecutionPlan):
    flat = []
    for stage_idx, stage in enumerate(plan.stages):
        for op in sorted(stage.ops, key=lambda o: (_QUEUE_PRIORITY[o.action], o.block)):
            flat.append((stage_idx, op))
    return flat


def build_engine_ops(plan: ExecutionPlan, g: ModelGraph, hw: HardwareSpec,
                     costs=None):
    """Translate a plan into engine ops with static dependencies."""
    if costs is None:
        costs = {b.id: block_cost(b, g, hw) for b in plan.blocks}
    recompute_flag = {b.id: b.recompute for b in plan.blocks}
    skip_map = skip_requirement_map(plan.blocks, g)
    duplex = hw.duplex
    flat = _flatten(plan)

    producer: dict[int, int] = {}       # block -> op index that made it resident
    fw_done: dict[int, int] = {}
    swap_out_done: dict[int, int] = {}
    last_compute_by_stage: list[tuple[int, int]] = []   # (stage_idx, op idx)

    ops: list[EngineOp] = []
    for stage_idx, op in flat:
        b = op.block
        cost = costs[b]
        deps = []
        missing = None
        alloc = 0.0
        free = 0.0
        if op.action is Action.FW:
            resource = COMPUTE
            duration = cost.fwd_seconds
            alloc = cost.bytes
            if b >= 2:
                if b - 1 in producer:
                    deps.append(producer[b - 1])
                else:
                    missing = f"block {b} forward before block {b - 1} residency"
                if recompute_flag.get(b - 1):
                    free = costs[b - 1].bytes   # discard the recompute block once consumed
        elif op.action is Action.RECOMPUTE_FW:
            resource = COMPUTE
            duration = cost.fwd_seconds
            alloc = cost.bytes
            needed = ([b - 1] if b >= 2 else []) + list(skip_map.get(b, ()))
            for q in needed:
                if q in producer:
                    deps.append(producer[q])
                else:
                    missing = f"block {b} recompute before block {q} residency"
        elif op.action is Action.BW:
            resource = COMPUTE
            duration = cost.bwd_seconds
            free = cost.bytes
            needed = [b] + list(skip_map.get(b, ()))
            for q in needed:
                if q in producer:
                    deps.append(producer[q])
                else:
                    missing = f"block {q} backward before residency"
        elif op.action is Action.SWAP_OUT:
            resource = XFER_OUT if duplex else XFER_SHARED
            duration = cost.swap_seconds
            free = cost.bytes
            if b in fw_done:
                deps.append(fw_done[b])
            else:
                missing = f"block {b} swap-out before its forward"
        else:  # SWAP_IN
            resource = XFER_IN if duplex else XFER_SHARED
            duration = cost.swap_seconds
            alloc = cost.bytes
            if b in swap_out_done:
                deps.append(swap_out_done[b])
            else:
                missing = f"block {b} swap-in before its swap-out"

        gate = None
        if resource != COMPUTE:
            for s_idx, o_idx in reversed(last_compute_by_stage):
                if s_idx < stage_idx:
                    gate = o_idx
                    break

        idx = len(ops)
        ops.append(EngineOp(
            tag={"action": op.action.value, "block": b, "stage": stage_idx},
            resource=resource, duration=duration, deps=tuple(deps),
            start_gate=gate, alloc_bytes=alloc, free_bytes_on_end=free,
            missing=missing,
        ))
        if op.action in (Action.FW, Action.RECOMPUTE_FW, Action.SWAP_IN):
            producer[b] = idx
        if op.action is Action.FW:
            fw_done[b] = idx
            if b >= 2 and recompute_flag.get(b - 1):
                producer.pop(b - 1, None)   # recompute buffers discarded here
        if op.action is Action.SWAP_OUT:
            swap_out_done[b] = idx
            producer.pop(b, None)           # buffers leave the device
        if resource == COMPUTE:
            last_compute_by_stage.append((stage_idx, idx))
    return ops


def plan_metrics(plan: ExecutionPlan, g: ModelGraph, hw: HardwareSpec,
                 costs=None, enforce_capacity: bool = True):
    """Lean simulation: (makespan, total_stall, peak_mem) without trace assembly."""
    ops = build_engine_ops(plan, g, hw, costs=costs)
    resources = [COMPUTE, XFER_IN, XFER_OUT] if hw.duplex else [COMPUTE, XFER_SHARED]
    raw_events, peak, makespan = run_engine(ops, resources, hw.capacity_bytes,
                                            enforce_capacity=enforce_capacity)
    busy = sum(e.t_end - e.t_start for e in raw_events
               if e.resource == COMPUTE)
    return makespan, makespan - busy, peak


def simulate(plan: ExecutionPlan, g: ModelGraph, hw: HardwareSpec,
             enforce_capacity: bool = True, costs=None) -> SimTrace:
    ops = build_engine_ops(plan, g, hw, costs=costs)
    resources = [COMPUTE, XFER_IN, XFER_OUT] if hw.duplex else [COMPUTE, XFER_SHARED]
    raw_events, peak, makespan = run_engine(ops, resources, hw.capacity_bytes,
                                            enforce_capacity=enforce_capacity)
    events = tuple(
        SimEvent(t_start=e.t_start, t_end=e.t_end, resource=e.resource,
                 block=e.tag["block"], action=Action(e.tag["action"]),
                 stall_before=e.stall_before)
        for e in sorted(raw_events, key=lambda e: (e.t_start, e.resource))
    )
    busy = sum(e.t_end - e.t_start for e in events
               if e.action in (Action.FW, Action.BW, Action.RECOMPUTE_FW))
    stage_rows = []
    by_stage: dict[int, list] = {}
    for raw in raw_events:
        if raw.tag["action"] in ("fw", "bw", "recompute_fw"):
            by_stage.setdefault(raw.tag["stage"], []).append(raw)
    for stage_idx in sorted(by_stage):
        rows = by_stage[stage_idx]
        stage_busy = sum(r.t_end - r.t_start for r in rows)
        stage_idle = sum(r.stall_before for r in rows)
        occ = (occupancy_from_times(stage_busy, stage_idle)
               if stage_busy + stage_idle > 0 else 1.0)
        stage_rows.append(StageOccupancy(
            stage_id=stage_idx, occupancy=occ,
            busy_s=stage_busy, idle_s=stage_idle,
        ))
    return SimTrace(
        events=events,
        makespan=makespan,
        total_stall=makespan - busy,
        peak_mem=peak,
        per_stage_occupancy=tuple(stage_rows),
    )


# ---------------------------------------------------------------------------
# strategy comparison and stall profiling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StrategyResult:
    strategy: Strategy
    plan: ExecutionPlan
    makespan: float
    total_stall: float
    mean_occupancy: float


def compare_strategies(g: ModelGraph, hw: HardwareSpec, solver: str = "auto",
                       max_blocks: Optional[int] = None) -> dict[Strategy, StrategyResult]:
    """Plan and simulate all three swap strategies on the same model."""
    from .planner import plan_model   # deferred: planner builds on this module

    results = {}
    for strategy in (Strategy.EAGER, Strategy.CAPACITY, Strategy.CAPACITY_RECOMPUTE):
        plan = plan_model(g, hw, strategy=strategy, solver=solver, max_blocks=max_blocks)
        trace = simulate(plan, g, hw)
        results[strategy] = StrategyResult(
            strategy=strategy, plan=plan, makespan=trace.makespan,
            total_stall=trace.total_stall, mean_occupancy=trace.mean_occupancy(),
        )
    return results


def stall_profile(trace: SimTrace, plan: ExecutionPlan):
    """Backward-phase stalls attributed to each block's first layer.

    Returns rows of (layer_id, stall_seconds, stall_normalized) where the
    normalization is by the largest stall (all zeros when stall-free).
    """
    per_block: dict[int, float] = {}
    for _, event in trace.backward_steps():
        per_block[event.block] = per_block.get(event.block, 0.0) + event.stall_before
    rows = []
    for block in sorted(plan.blocks, key=lambda b: b.id):
        rows.append([block.first_layer, per_block.get(block.id, 0.0)])
    peak = max((stall for _, stall in rows), default=0.0)
    return [(layer, stall, (stall / peak if peak > 0 else 0.0))
            for layer, stall in rows]


def stall_profile_csv(rows) -> str:
    lines = ["layer_id,stall_s,stall_norm"]
    for layer, stall, norm in rows:
        lines.append(f"{layer},{stall:.9g},{norm:.9g}")
    return "\n".join(lines) + "\n"
