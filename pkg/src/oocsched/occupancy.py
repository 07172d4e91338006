"""Analytic occupancy model for block-swap pipelines.

Occupancy is the fraction of time the device computes, busy/(busy+idle).
During the backward phase the device consumes previously swapped-out block
buffers; transfers deliver them at the swap-in throughput (the minimum of
far-memory, near-memory and interconnect throughput).  While cumulative
processing time stays ahead of cumulative delivery time the device runs at
occupancy 1; the first backward step where processing overtakes delivery is
the *catch-up step* theta.  From theta on, each step that waits on a
delivery settles into the steady ratio

    occupancy = compute_time(step) / transfer_time(gating block)

clamped to [0, 1].  The model is exact for linear chains of uniform-size
blocks and an approximation otherwise; the event simulator is the ground
truth it is validated against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .cost_model import HardwareSpec, block_cost
from .model_ir import ModelGraph
from .plan import Action, ExecutionPlan, skip_requirement_map

_EPS = 1e-12


@dataclass(frozen=True)
class BufferState:
    """Byte-ledger snapshot for one pipeline step."""

    avail_bytes: float
    swapped_in_bytes: float = 0.0
    processed_bytes: float = 0.0
    required_bytes: float = 0.0
    step: int = 0


@dataclass(frozen=True)
class StepOccupancy:
    step: int
    occupancy: float
    busy_s: float
    idle_s: float


@dataclass(frozen=True)
class OccupancyReport:
    per_step: tuple[StepOccupancy, ...]
    theta: Optional[int]
    mean_occupancy: float

    def to_csv(self) -> str:
        lines = ["step,occupancy,busy_s,idle_s"]
        for s in self.per_step:
            lines.append(f"{s.step},{s.occupancy:.9g},{s.busy_s:.9g},{s.idle_s:.9g}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        theta = "none" if self.theta is None else str(self.theta)
        return f"theta,{theta}\nmean_occupancy,{self.mean_occupancy:.9g}\n"


def occupancy_from_times(busy: float, idle: float) -> float:
    if busy < 0 or idle < 0:
        raise ValueError("busy/idle times must be non-negative")
    total = busy + idle
    if total <= 0:
        raise ValueError("busy + idle must be positive")
    return busy / total


def occupancy_from_buffers(avail: float, required: float) -> float:
    """Available/required buffer ratio as an occupancy proxy, capped at 1."""
    if required <= 0:
        raise ValueError("required bytes must be positive")
    return min(max(avail, 0.0) / required, 1.0)


def advance_buffers(prev: BufferState, swapped_in: float, processed: float,
                    capacity: float) -> BufferState:
    """One step of the free-buffer recurrence.

    Swapped-in bytes consume free space, finished processing releases it;
    the result is floored at zero and capped at device capacity.
    """
    avail = prev.avail_bytes - (swapped_in - processed)
    avail = min(max(avail, 0.0), capacity)
    return BufferState(
        avail_bytes=avail,
        swapped_in_bytes=swapped_in,
        processed_bytes=processed,
        required_bytes=prev.required_bytes,
        step=prev.step + 1,
    )


def swap_in_throughput(hw: HardwareSpec) -> float:
    """Block delivery rate: the slowest link in the far->near path."""
    return hw.swap_throughput()


def swapped_in_this_step(throughput: float, t_proc: float, avail_prev: float) -> float:
    """Bytes deliverable during one processing window, capped by free space."""
    if throughput < 0 or t_proc < 0 or avail_prev < 0:
        raise ValueError("inputs must be non-negative")
    return min(throughput * t_proc, avail_prev)


def refined_occupancy(state: BufferState, active_blocks, hw: HardwareSpec,
                      theta: Optional[int]) -> float:
    """Per-step occupancy with the catch-up case split.

    Steps before theta run at exactly 1.  From theta on, the step occupancy
    is the available bytes over the bytes the active blocks process plus the
    bytes deliverable during their processing, clamped to [0, 1].
    ``active_blocks`` is a sequence of (processed_bytes, t_proc_seconds).
    """
    if theta is None or state.step < theta:
        return 1.0
    rate = swap_in_throughput(hw)
    denom = sum(processed + rate * t_proc for processed, t_proc in active_blocks)
    if denom <= 0:
        return 1.0
    return min(max(state.avail_bytes / denom, 0.0), 1.0)


def coarse_occupancy(state: BufferState, active_blocks, hw: HardwareSpec) -> float:
    """Pre-refinement estimate: same ratio without the catch-up case split.

    Kept for comparison/debugging; the refined form supersedes it.
    """
    rate = swap_in_throughput(hw)
    denom = sum(processed + rate * t_proc for processed, t_proc in active_blocks)
    if denom <= 0:
        return 1.0
    return min(max(state.avail_bytes / denom, 0.0), 1.0)


# ---------------------------------------------------------------------------
# plan-level analysis
# ---------------------------------------------------------------------------

def _backward_profile(plan: ExecutionPlan, g: ModelGraph, hw: HardwareSpec):
    """Durations and first-need mapping of the backward compute steps.

    Returns (durations, needed_at, swap_seconds) where ``needed_at[j]`` lists
    the swapped blocks whose buffers must have been delivered for step j
    (1-based) and nothing earlier.
    """
    costs = {b.id: block_cost(b, g, hw) for b in plan.blocks}
    skip_map = skip_requirement_map(plan.blocks, g)
    swapped = set(plan.swapped_blocks())
    steps = plan.backward_compute_steps()

    durations = []
    first_need: dict[int, int] = {}
    for j, op in enumerate(steps, start=1):
        cost = costs[op.block]
        durations.append(cost.bwd_seconds if op.action is Action.BW else cost.fwd_seconds)
        requires = [op.block] if op.action is Action.BW else (
            [op.block - 1] if op.block >= 2 else [])
        requires += list(skip_map.get(op.block, ()))
        for q in requires:
            if q in swapped and q not in first_need:
                first_need[q] = j

    needed_at: dict[int, list[int]] = {}
    for q, j in first_need.items():
        needed_at.setdefault(j, []).append(q)
    swap_seconds = {q: costs[q].swap_seconds for q in swapped}
    return durations, needed_at, swap_seconds


def find_theta(plan: ExecutionPlan, g: ModelGraph, hw: HardwareSpec) -> Optional[int]:
    """Catch-up step of the backward phase, or None when transfers always win.

    Theta is the smallest step count j such that the compute time of the
    first j backward steps is less than the transfer time of every block
    the first j+1 steps consume; theta == 0 means the very first backward
    step already waits.  Steps are counted from 1 across backward and
    recomputed-forward compute ops; None means the device never waits and
    the whole backward phase can run fully occupied.
    """
    durations, needed_at, swap_seconds = _backward_profile(plan, g, hw)
    n = len(durations)
    cum_proc = 0.0
    cum_transfer = 0.0
    for j in range(0, n):
        # transfers required through step j+1
        for q in needed_at.get(j + 1, ()):
            cum_transfer += swap_seconds[q]
        if cum_proc + _EPS < cum_transfer:
            return j
        cum_proc += durations[j]
    return None


def analytic_report(plan: ExecutionPlan, g: ModelGraph, hw: HardwareSpec) -> OccupancyReport:
    """Predicted per-step occupancy of the backward phase.

    Steps before theta are fully occupied.  From theta on, a step gated by
    a delivery idles for the transfer/compute gap of its gating block.
    """
    durations, needed_at, swap_seconds = _backward_profile(plan, g, hw)
    theta = find_theta(plan, g, hw)
    per_step = []
    busy_total = 0.0
    idle_total = 0.0
    for j, dur in enumerate(durations, start=1):
        idle = 0.0
        if theta is not None and j >= max(theta, 1):
            gating = needed_at.get(j, ())
            if gating:
                pace = sum(swap_seconds[q] for q in gating)
                idle = max(0.0, pace - dur)
        occ = occupancy_from_times(dur, idle) if dur + idle > 0 else 1.0
        per_step.append(StepOccupancy(step=j, occupancy=occ, busy_s=dur, idle_s=idle))
        busy_total += dur
        idle_total += idle
    mean = busy_total / (busy_total + idle_total) if busy_total + idle_total > 0 else 1.0
    return OccupancyReport(per_step=tuple(per_step), theta=theta, mean_occupancy=mean)


def report_from_steps(steps, theta: Optional[int]) -> OccupancyReport:
    """Build a report from measured (step, busy, idle) triples."""
    per_step = tuple(
        StepOccupancy(step=s, occupancy=occupancy_from_times(b, i), busy_s=b, idle_s=i)
        for s, b, i in steps
    )
    busy = sum(s.busy_s for s in per_step)
    idle = sum(s.idle_s for s in per_step)
    mean = busy / (busy + idle) if busy + idle > 0 else 1.0
    return OccupancyReport(per_step=per_step, theta=theta, mean_occupancy=mean)
