"""Block partitioning, recompute selection and schedule generation.

The planner answers three questions for a layer graph on given hardware:

1. how to cut the layer chain into contiguous blocks (exhaustive search of
   all 2^(l-1) cuts for small models, a split-point DP plus local search
   for large ones),
2. which swapped blocks to regenerate by recomputation instead of
   transferring back (cheaper whenever a block's forward compute undercuts
   its transfer), and
3. the staged schedule itself: forward stages with overlapped swap-outs,
   backward stages with paced swap-ins, and recomputed-forward stages
   spliced in front of the backward step that consumes them.

Capacity drives the swap-out policy: the largest suffix of blocks that fits
in device memory (with headroom for one incoming block) is never swapped
out, so the backward phase starts without waiting.  The exhaustive solver
scores a partition by the simulated makespan of its best recompute flag
assignment, which makes the two-stage optimization equivalent to a joint
search and keeps the result a global optimum; the DP mode is a documented
heuristic.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from itertools import combinations
from typing import Iterator, Optional

from .cost_model import BlockCost, HardwareSpec, block_cost
from .model_ir import ModelGraph
from .occupancy import find_theta
from .plan import (Action, Block, ExecutionPlan, PlanOp, Stage, Strategy,
                   plan_string, skip_requirement_map)
from .simulator import DeadlockError, SimTrace, plan_metrics, simulate

_EPS = 1e-12

DEFAULT_EXHAUSTIVE_LAYER_BOUND = 20
DEFAULT_AUTO_EXHAUSTIVE_LAYERS = 12
DEFAULT_OPT2_EXHAUSTIVE_BOUND = 8


class PlannerError(Exception):
    """Planner misuse (bounds, malformed partitions)."""


class InfeasibleModelError(Exception):
    """No feasible plan exists; carries the binding constraint."""

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


def enumerate_partitions(num_layers: int, max_blocks: Optional[int] = None
                         ) -> Iterator[tuple[tuple[int, int], ...]]:
    """All contiguous partitions of layers 1..n into at most max_blocks blocks.

    Deterministic order: fewer blocks first, then lexicographic split points.
    """
    if num_layers < 1:
        raise PlannerError("need at least one layer")
    bound = num_layers if max_blocks is None else min(max_blocks, num_layers)
    for k in range(1, bound + 1):
        for splits in combinations(range(1, num_layers), k - 1):
            bounds = (0,) + splits + (num_layers,)
            yield tuple((bounds[i] + 1, bounds[i + 1]) for i in range(k))


class CostTable:
    """Per-layer cost prefix sums; block costs for any contiguous range in O(1)."""

    def __init__(self, g: ModelGraph, hw: HardwareSpec):
        from .cost_model import layer_memory, layer_ops, weight_elements
        self.mult = hw.backward_multiplier
        self.swap_rate = hw.swap_throughput()
        self.rate = hw.compute_rate
        num = g.num_layers
        self.pre_eff_ops = [0.0] * (num + 1)
        self.pre_bytes = [0.0] * (num + 1)
        self.pre_wt_bytes = [0.0] * (num + 1)
        self.pre_grad = [0.0] * (num + 1)
        self.pre_wt_elems = [0.0] * (num + 1)
        for i in range(1, num + 1):
            layer = g.layer(i)
            mem = layer_memory(layer, g.batch_size)
            eff = hw.kind_efficiency(layer.kind)
            self.pre_eff_ops[i] = self.pre_eff_ops[i - 1] + layer_ops(layer, g.batch_size) / eff
            self.pre_bytes[i] = self.pre_bytes[i - 1] + mem.mem_fwd_bytes + mem.mem_wt_bytes
            self.pre_wt_bytes[i] = self.pre_wt_bytes[i - 1] + mem.mem_wt_bytes
            self.pre_grad[i] = self.pre_grad[i - 1] + mem.mem_grad_bytes
            self.pre_wt_elems[i] = self.pre_wt_elems[i - 1] + weight_elements(layer)

    def range_cost(self, block_id: int, lo: int, hi: int) -> BlockCost:
        fwd = (self.pre_eff_ops[hi] - self.pre_eff_ops[lo - 1]) / self.rate
        total = self.pre_bytes[hi] - self.pre_bytes[lo - 1]
        return BlockCost(
            block_id=block_id,
            fwd_seconds=fwd,
            bwd_seconds=fwd * self.mult,
            bytes=total,
            wt_bytes=self.pre_wt_bytes[hi] - self.pre_wt_bytes[lo - 1],
            grad_bytes=self.pre_grad[hi] - self.pre_grad[lo - 1],
            weight_elems=self.pre_wt_elems[hi] - self.pre_wt_elems[lo - 1],
            swap_seconds=total / self.swap_rate,
        )


def build_blocks(partition, g: ModelGraph, hw: HardwareSpec, table: Optional[CostTable] = None):
    """Materialize Block records (with byte sizes) for a partition."""
    blocks = []
    costs: dict[int, BlockCost] = {}
    for idx, (lo, hi) in enumerate(partition, start=1):
        if table is not None:
            cost = table.range_cost(idx, lo, hi)
        else:
            cost = block_cost(Block(id=idx, first_layer=lo, last_layer=hi), g, hw)
        costs[idx] = cost
        blocks.append(Block(id=idx, first_layer=lo, last_layer=hi, swap_bytes=cost.bytes))
    return tuple(blocks), costs


def retained_start(blocks, costs, capacity: float) -> int:
    """First block index of the device-resident suffix (len(blocks)+1 = none).

    The suffix is the largest tail of blocks that fits next to the first
    incoming swapped block (the deepest one, delivered while the whole
    suffix is still resident), so backward starts immediately and the
    prefetch has headroom.
    """
    nb = len(blocks)
    total = sum(costs[b.id].bytes for b in blocks)
    if total <= capacity + _EPS:
        return 1
    suffix = 0.0
    suffix_from = {nb + 1: 0.0}
    for i in range(nb, 0, -1):
        suffix += costs[i].bytes
        suffix_from[i] = suffix
    for k in range(2, nb + 1):
        if suffix_from[k] + costs[k - 1].bytes <= capacity + _EPS:
            return k
    return nb + 1


def forced_recompute(blocks, g: ModelGraph, k_ret: int) -> set[int]:
    """Non-retained blocks whose skip edges reach past the next block.

    Swapping such a block would drag its buffers back long before its own
    backward step; recomputing avoids the premature transfer.
    """
    block_of = {}
    for b in blocks:
        for lid in b.layer_ids:
            block_of[lid] = b.id
    forced = set()
    for e in g.skip_edges():
        sb, db = block_of[e.src], block_of[e.dst]
        if db > sb + 1 and sb < k_ret and sb != len(blocks):
            forced.add(sb)
    return forced


# ---------------------------------------------------------------------------
# schedule generation
# ---------------------------------------------------------------------------

def generate_schedule(blocks, g: ModelGraph, hw: HardwareSpec,
                      strategy: Strategy = Strategy.CAPACITY_RECOMPUTE,
                      costs: Optional[dict] = None) -> ExecutionPlan:
    """Build the staged schedule for flagged blocks under a strategy."""
    costs = costs if costs is not None else {b.id: block_cost(b, g, hw) for b in blocks}
    nb = len(blocks)
    if nb == 0:
        raise PlannerError("cannot schedule an empty block list")

    if strategy is Strategy.EAGER:
        k_ret = nb + 1
        recompute: set[int] = set()
        swapped = list(range(1, nb + 1))
    else:
        k_ret = retained_start(blocks, costs, hw.capacity_bytes)
        if strategy is Strategy.CAPACITY_RECOMPUTE:
            recompute = {b.id for b in blocks if b.recompute and b.id < k_ret}
        else:
            recompute = set()
        swapped = [i for i in range(1, nb + 1) if i < k_ret and i not in recompute]
    # the terminal block has no forward consumer, so a recompute flag on it
    # degenerates to plain retention: no transfers and nothing to regenerate
    regen = {i for i in recompute if i != nb}

    flagged = tuple(
        b.flagged(recompute=(b.id in recompute),
                  checkpoint=(strategy is not Strategy.EAGER and b.id >= k_ret))
        for b in blocks
    )

    raw_stages: list[list[PlanOp]] = []
    swapped_set = set(swapped)

    # forward: swap a finished block out alongside the next block's compute
    for j in range(1, nb + 1):
        ops = [PlanOp(Action.FW, j)]
        if j >= 2 and (j - 1) in swapped_set:
            ops.append(PlanOp(Action.SWAP_OUT, j - 1))
        raw_stages.append(ops)
    if nb in swapped_set:
        raw_stages.append([PlanOp(Action.SWAP_OUT, nb)])

    if strategy is Strategy.EAGER:
        raw_stages.append([PlanOp(Action.SWAP_IN, nb)])
        for j in range(nb, 1, -1):
            raw_stages.append([PlanOp(Action.BW, j), PlanOp(Action.SWAP_IN, j - 1)])
        raw_stages.append([PlanOp(Action.BW, 1)])
    else:
        raw_stages.extend(
            _capacity_backward_stages(flagged, g, costs, swapped, regen, nb)
        )

    stages = tuple(
        Stage(id=i + 1, ops=tuple(ops), duration=_stage_duration(ops, costs, hw))
        for i, ops in enumerate(raw_stages)
    )
    return ExecutionPlan(stages=stages, strategy=strategy, blocks=flagged)


def _stage_duration(ops, costs, hw) -> float:
    duration = 0.0
    for op in ops:
        cost = costs[op.block]
        if op.action in (Action.FW, Action.RECOMPUTE_FW):
            duration = max(duration, cost.fwd_seconds)
        elif op.action is Action.BW:
            duration = max(duration, cost.bwd_seconds)
        else:
            duration = max(duration, cost.swap_seconds)
    return duration


def _recompute_runs(recompute: set[int], nb: int) -> list[tuple[int, int]]:
    runs = []
    i = 1
    while i <= nb:
        if i in recompute:
            j = i
            while j + 1 <= nb and (j + 1) in recompute:
                j += 1
            runs.append((i, j))
            i = j + 1
        else:
            i += 1
    return runs


def _capacity_backward_stages(blocks, g, costs, swapped, recompute, nb):
    """Backward stages: paced swap-ins riding backward compute, recomputed
    forward runs spliced in front of the step that first needs them."""
    pos_of = {i: nb - i + 1 for i in range(1, nb + 1)}
    block_at = {p: i for i, p in pos_of.items()}

    # who needs a recompute run early: skip targets of its members
    skip_map = skip_requirement_map(blocks, g)
    skip_targets: dict[int, list[int]] = {}
    for dst, sources in skip_map.items():
        for src in sources:
            skip_targets.setdefault(src, []).append(dst)

    runs = _recompute_runs(recompute, nb)
    run_insert_pos = {}
    run_of_start = {}
    for (a, j) in runs:
        pos = pos_of[j]
        for m in range(a, j + 1):
            for dst in skip_targets.get(m, ()):
                pos = min(pos, pos_of[dst])
        run_insert_pos[(a, j)] = pos
        run_of_start[a] = (a, j)

    first_need: dict[int, int] = {}
    for q in swapped:
        need = pos_of[q]
        if (q + 1) in run_of_start:
            need = min(need, run_insert_pos[run_of_start[q + 1]])
        for dst in skip_targets.get(q, ()):
            need = min(need, pos_of[dst])
        first_need[q] = need

    # pace attachments against the predicted transfer channel; a swap-in may
    # never share a stage with its first consumer
    queue = sorted(swapped, key=lambda q: (first_need[q], -q))
    attach: dict[int, list[int]] = {}
    t = 0.0
    chan = 0.0
    qi = 0
    for p in range(1, nb + 1):
        while qi < len(queue) and (chan <= t + _EPS or first_need[queue[qi]] <= p):
            q = queue[qi]
            qi += 1
            pa = max(min(p, first_need[q] - 1), 0)
            attach.setdefault(pa, []).append(q)
            chan = max(chan, t) + costs[q].swap_seconds
        t += costs[block_at[p]].bwd_seconds
    while qi < len(queue):
        q = queue[qi]
        qi += 1
        pa = max(min(nb, first_need[q] - 1), 0)
        attach.setdefault(pa, []).append(q)

    inserts: dict[int, list[tuple[int, int]]] = {}
    for run in runs:
        inserts.setdefault(run_insert_pos[run], []).append(run)

    stages: list[list[PlanOp]] = []
    for q in attach.get(0, ()):
        stages.append([PlanOp(Action.SWAP_IN, q)])
    for p in range(1, nb + 1):
        for (a, j) in sorted(inserts.get(p, ())):
            for m in range(a, j + 1):
                stages.append([PlanOp(Action.RECOMPUTE_FW, m)])
        ops = [PlanOp(Action.BW, block_at[p])]
        for q in attach.get(p, ()):
            ops.append(PlanOp(Action.SWAP_IN, q))
        stages.append(ops)
    return stages


def finalize_plan(plan: ExecutionPlan, g: ModelGraph, hw: HardwareSpec) -> ExecutionPlan:
    """Attach the catch-up step and the simulated makespan prediction."""
    violations = validate_plan(plan, g, hw)
    if violations:
        raise PlannerError("generated plan failed validation: " + violations[0])
    trace = simulate(plan, g, hw)
    return replace(plan, predicted_makespan=trace.makespan,
                   theta=find_theta(plan, g, hw))


# ---------------------------------------------------------------------------
# plan validation
# ---------------------------------------------------------------------------

def validate_plan(plan: ExecutionPlan, g: ModelGraph, hw: HardwareSpec) -> list[str]:
    """Static plan checker; empty list means the plan is accepted."""
    v: list[str] = []
    blocks = plan.blocks
    nb = len(blocks)

    claimed: dict[int, int] = {}
    for b in blocks:
        if b.first_layer > b.last_layer:
            v.append(f"block {b.id} has empty layer range")
        for lid in b.layer_ids:
            if lid in claimed:
                v.append(f"layer {lid} appears in blocks {claimed[lid]} and {b.id}")
            claimed[lid] = b.id
    for lid in range(1, g.num_layers + 1):
        if lid not in claimed:
            v.append(f"layer {lid} not covered by any block")
    if [b.id for b in blocks] != list(range(1, nb + 1)):
        v.append("block ids are not the contiguous sequence 1..n")
    else:
        for prev, b in zip(blocks, blocks[1:]):
            if b.first_layer != prev.last_layer + 1:
                v.append(f"blocks {prev.id} and {b.id} are not contiguous")
    for b in blocks:
        if b.recompute and b.checkpoint:
            v.append(f"block {b.id} is both recompute and checkpoint")

    fw_seq = [op.block for s in plan.stages for op in s.ops if op.action is Action.FW]
    if fw_seq != list(range(1, nb + 1)):
        v.append("forward ops must run each block exactly once in ascending order")
    bw_seq = [op.block for s in plan.stages for op in s.ops if op.action is Action.BW]
    if bw_seq != list(range(nb, 0, -1)):
        v.append("backward ops must run each block exactly once in descending order")
    for action, label in ((Action.SWAP_IN, "swap-in"), (Action.SWAP_OUT, "swap-out")):
        seen = set()
        for s in plan.stages:
            for op in s.ops:
                if op.action is action:
                    if op.block in seen:
                        v.append(f"block {op.block} has more than one {label}")
                    seen.add(op.block)

    skip_map = skip_requirement_map(blocks, g)
    bytes_of = {b.id: b.swap_bytes for b in blocks}
    recompute_flag = {b.id: b.recompute for b in blocks}

    # same-stage independence
    for s in plan.stages:
        produced = {op.block for op in s.ops
                    if op.action in (Action.FW, Action.RECOMPUTE_FW, Action.SWAP_IN)}
        fw_here = {op.block for op in s.ops
                   if op.action in (Action.FW, Action.RECOMPUTE_FW)}
        out_done_here = {op.block for op in s.ops if op.action is Action.SWAP_OUT}
        for op in s.ops:
            needs: tuple[int, ...] = ()
            if op.action is Action.FW and op.block >= 2:
                needs = (op.block - 1,)
            elif op.action is Action.RECOMPUTE_FW:
                needs = ((op.block - 1,) if op.block >= 2 else ()) + skip_map.get(op.block, ())
            elif op.action is Action.BW:
                needs = (op.block,) + skip_map.get(op.block, ())
            elif op.action is Action.SWAP_OUT and op.block in fw_here:
                v.append(f"stage {s.id}: swap-out of block {op.block} overlaps its forward")
            elif op.action is Action.SWAP_IN and op.block in out_done_here:
                v.append(f"stage {s.id}: swap-in of block {op.block} overlaps its swap-out")
            clash = [q for q in needs if q in produced]
            if clash:
                v.append(f"stage {s.id}: op on block {op.block} reads block {clash[0]} "
                         "produced in the same stage")

    v.extend(_residency_memory_walk(plan, g, hw, skip_map=skip_map))
    return v


def _residency_memory_walk(plan: ExecutionPlan, g: ModelGraph, hw: HardwareSpec,
                           skip_map=None, first_only: bool = False,
                           stats: Optional[dict] = None) -> list[str]:
    """Stage-granular residency/memory ledger; the data-safety core of
    validate_plan, usable standalone as a fast feasibility probe."""
    if skip_map is None:
        skip_map = skip_requirement_map(plan.blocks, g)
    peak_demand = 0.0
    bytes_of = {b.id: b.swap_bytes for b in plan.blocks}
    recompute_flag = {b.id: b.recompute for b in plan.blocks}
    capacity = hw.capacity_bytes
    v: list[str] = []
    resident: set[int] = set()
    on_host: set[int] = set()
    fw_done: set[int] = set()
    resident_bytes = 0.0
    peak_violated = False
    for s in plan.stages:
        demand = resident_bytes
        for op in s.ops:
            b = op.block
            if op.action is Action.FW:
                if b >= 2 and (b - 1) not in resident:
                    v.append(f"block {b} forward before block {b - 1} residency")
                demand += bytes_of[b]
            elif op.action is Action.RECOMPUTE_FW:
                if not recompute_flag.get(b):
                    v.append(f"block {b} recomputed but not flagged recompute")
                for q in ((b - 1,) if b >= 2 else ()) + skip_map.get(b, ()):
                    if q not in resident:
                        v.append(f"block {b} recompute before block {q} residency")
                demand += bytes_of[b]
            elif op.action is Action.BW:
                if b not in resident:
                    v.append(f"block {b} backward before residency")
                for q in skip_map.get(b, ()):
                    if q not in resident:
                        v.append(f"block {b} backward before skip-source block {q} residency")
            elif op.action is Action.SWAP_OUT:
                if b not in fw_done:
                    v.append(f"block {b} swap-out before its forward")
                if b not in resident:
                    v.append(f"block {b} swap-out while not resident")
            elif op.action is Action.SWAP_IN:
                if b not in on_host:
                    v.append(f"block {b} swap-in before its swap-out")
                if b in resident:
                    v.append(f"block {b} swap-in while already resident")
                demand += bytes_of[b]
        peak_demand = max(peak_demand, demand)
        if demand > capacity + _EPS and not peak_violated:
            v.append(f"stage {s.id}: demands {demand:g} B, exceeding capacity "
                     f"{capacity:g} B")
            peak_violated = True
        if v and first_only and stats is None:
            return v
        # end-of-stage effects
        for op in s.ops:
            b = op.block
            if op.action is Action.FW:
                if b not in resident:
                    resident.add(b)
                    resident_bytes += bytes_of[b]
                fw_done.add(b)
                if b >= 2 and recompute_flag.get(b - 1) and (b - 1) in resident:
                    resident.discard(b - 1)
                    resident_bytes -= bytes_of[b - 1]
            elif op.action in (Action.RECOMPUTE_FW, Action.SWAP_IN):
                if b not in resident:
                    resident.add(b)
                    resident_bytes += bytes_of[b]
                on_host.discard(b)
            elif op.action is Action.SWAP_OUT:
                if b in resident:
                    resident.discard(b)
                    resident_bytes -= bytes_of[b]
                on_host.add(b)
            elif op.action is Action.BW:
                if b in resident:
                    resident.discard(b)
                    resident_bytes -= bytes_of[b]
    if stats is not None:
        stats["peak_demand"] = peak_demand
    return v


# ---------------------------------------------------------------------------
# candidate evaluation and the two optimization stages
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CandidateResult:
    feasible: bool
    makespan: float
    total_stall: float
    sum_occupancy: float
    plan: Optional[ExecutionPlan] = None
    trace: Optional[SimTrace] = None
    reason: str = ""


def evaluate_blocks(blocks, g: ModelGraph, hw: HardwareSpec,
                    strategy: Strategy, costs=None, lean: bool = True) -> CandidateResult:
    plan = generate_schedule(blocks, g, hw, strategy, costs=costs)
    if lean:
        # generated plans are structurally sound by construction; only the
        # residency/memory ledger can fail
        violations = _residency_memory_walk(plan, g, hw, first_only=True)
    else:
        violations = validate_plan(plan, g, hw)
    if violations:
        return CandidateResult(False, float("inf"), float("inf"), 0.0, reason=violations[0])
    try:
        if lean:
            makespan, stall, _ = plan_metrics(plan, g, hw, costs=costs)
            return CandidateResult(True, makespan, stall, 0.0, plan=plan)
        trace = simulate(plan, g, hw, costs=costs)
    except DeadlockError as exc:
        return CandidateResult(False, float("inf"), float("inf"), 0.0, reason=str(exc))
    sum_occ = sum(row.occupancy for row in trace.per_stage_occupancy)
    return CandidateResult(True, trace.makespan, trace.total_stall, sum_occ,
                           plan=plan, trace=trace)


def score_partition(partition, g: ModelGraph, hw: HardwareSpec,
                    strategy: Strategy = Strategy.CAPACITY):
    """(sum of per-stage occupancy, feasible) for one partition."""
    blocks, costs = build_blocks(partition, g, hw)
    if strategy is Strategy.CAPACITY_RECOMPUTE:
        blocks = solve_opt2(blocks, g, hw, costs=costs)
    res = evaluate_blocks(blocks, g, hw, strategy, costs=costs, lean=False)
    return res.sum_occupancy if res.feasible else 0.0, res.feasible


def _recompute_candidates(blocks, costs, g, hw):
    nb = len(blocks)
    k_ret = retained_start(blocks, costs, hw.capacity_bytes)
    forced = forced_recompute(blocks, g, k_ret)
    swapped0 = [i for i in range(1, nb + 1) if i < k_ret]
    free = [i for i in swapped0 if i not in forced]
    return k_ret, forced, free


def _greedy_recompute(blocks, costs, g, hw) -> set[int]:
    """Alternating heuristic: walking from the deep end, flag a swapped block
    whose forward compute beats its transfer, never two adjacent."""
    _, forced, free = _recompute_candidates(blocks, costs, g, hw)
    flags = set(forced)
    for d in sorted(free, reverse=True):
        if (d + 1) in flags:
            continue
        if costs[d].fwd_seconds < costs[d].swap_seconds - _EPS:
            flags.add(d)
    return flags


def solve_opt2(blocks, g: ModelGraph, hw: HardwareSpec, mode: str = "auto",
               costs=None, exhaustive_bound: int = DEFAULT_OPT2_EXHAUSTIVE_BOUND):
    """Mark swapped blocks for recomputation.

    Exhaustive mode evaluates every flag assignment by simulated makespan
    (ties: fewer recomputed blocks, then earliest); the greedy mode applies
    the alternating compute-vs-transfer rule.  Blocks whose skip edges jump
    past the next block are always forced to recompute.
    """
    costs = costs if costs is not None else {b.id: block_cost(b, g, hw) for b in blocks}
    _, forced, free = _recompute_candidates(blocks, costs, g, hw)
    if mode not in ("auto", "exhaustive", "greedy"):
        raise PlannerError(f"unknown opt2 mode {mode!r}")
    if mode == "greedy" or (mode == "auto" and len(free) > exhaustive_bound):
        best_blocks = None
        best_makespan = float("inf")
        for flags in (_greedy_recompute(blocks, costs, g, hw), set(forced)):
            flagged = tuple(b.flagged(recompute=(b.id in flags)) for b in blocks)
            result = evaluate_blocks(flagged, g, hw, Strategy.CAPACITY_RECOMPUTE,
                                     costs=costs)
            if result.feasible and result.makespan < best_makespan:
                best_blocks, best_makespan = flagged, result.makespan
        if best_blocks is not None:
            return best_blocks
        return tuple(b.flagged(recompute=(b.id in forced)) for b in blocks)

    nb = len(blocks)
    best_blocks = None
    best_key = None
    for r in range(0, len(free) + 1):
        for combo in combinations(free, r):
            flags = forced | set(combo)
            flagged = tuple(b.flagged(recompute=(b.id in flags)) for b in blocks)
            result = evaluate_blocks(flagged, g, hw, Strategy.CAPACITY_RECOMPUTE, costs=costs)
            if not result.feasible:
                continue
            key = (result.makespan, result.total_stall, len(flags), _flags_key(flags, nb))
            if best_key is None or key < best_key:
                best_key = key
                best_blocks = flagged
    if best_blocks is None:
        return tuple(b.flagged(recompute=(b.id in forced)) for b in blocks)
    return best_blocks


def _flags_key(flags, nb):
    """Ties prefer recomputing blocks nearest the retained tail (deep end)."""
    return tuple(sorted(nb - f for f in flags))


def _transfer_lower_bound(costs, swapped, duplex):
    moved = sum(costs[q].swap_seconds for q in swapped)
    return moved if duplex else 2.0 * moved


def _run_bytes_exceed(flags_sorted, costs, nb, capacity) -> bool:
    """A maximal run of recomputed blocks re-runs as one resident chain;
    if any run's bytes alone exceed capacity the plan cannot validate."""
    run_bytes = 0.0
    prev = None
    for f in flags_sorted:
        if f == nb:
            continue
        if prev is not None and f == prev + 1:
            run_bytes += costs[f].bytes
        else:
            run_bytes = costs[f].bytes
        if run_bytes > capacity + _EPS:
            return True
        prev = f
    return False


def _search_exhaustive(g, hw, strategy, max_blocks, layer_bound, opt2_bound):
    """Joint partition x recompute-flag search by simulated makespan.

    Candidates whose compute/transfer lower bound already exceeds the
    incumbent are skipped without simulation; the incumbent is seeded from
    the heuristic solver so most of the space prunes away.
    """
    num = g.num_layers
    if num > layer_bound:
        raise PlannerError(
            f"exhaustive mode is limited to {layer_bound} layers (model has {num}); "
            "use the dp solver")
    table = CostTable(g, hw)
    base_compute = (table.pre_eff_ops[num] / table.rate) * (1.0 + table.mult)
    best: Optional[CandidateResult] = None
    best_key = None
    first_reason = ""

    def consider(blocks, costs, flags, nb, splits):
        nonlocal best, best_key, first_reason
        flagged = tuple(b.flagged(recompute=(b.id in flags)) for b in blocks)
        result = evaluate_blocks(flagged, g, hw, strategy, costs=costs)
        if not result.feasible:
            if not first_reason:
                first_reason = result.reason
            return
        key = (result.makespan, result.total_stall, nb, splits,
               len(flags), _flags_key(flags, nb))
        if best_key is None or key < best_key:
            best_key, best = key, result

    try:
        seed = _dp_partition(g, hw, strategy, max_blocks, table=table)
        blocks, costs = build_blocks(seed, g, hw, table)
        seed_flags = (_greedy_recompute(blocks, costs, g, hw)
                      if strategy is Strategy.CAPACITY_RECOMPUTE else set())
        consider(blocks, costs, seed_flags, len(blocks),
                 tuple(hi for _, hi in seed[:-1]))
    except InfeasibleModelError:
        pass

    xfer_scale = 1.0 if hw.duplex else 2.0
    for partition in enumerate_partitions(num, max_blocks):
        blocks, costs = build_blocks(partition, g, hw, table)
        nb = len(blocks)
        splits = tuple(hi for _, hi in partition[:-1])

        if strategy is Strategy.EAGER:
            lb = max(base_compute,
                     _transfer_lower_bound(costs, range(1, nb + 1), hw.duplex))
            if best is None or lb <= best.makespan + 1e-12:
                consider(blocks, costs, set(), nb, splits)
            continue

        if strategy is Strategy.CAPACITY:
            k_ret = retained_start(blocks, costs, hw.capacity_bytes)
            swapped = range(1, k_ret)
            lb = max(base_compute, _transfer_lower_bound(costs, swapped, hw.duplex))
            if best is None or lb <= best.makespan + 1e-12:
                consider(blocks, costs, set(), nb, splits)
            continue

        k_ret, forced, free = _recompute_candidates(blocks, costs, g, hw)
        if len(free) > opt2_bound:
            consider(blocks, costs, _greedy_recompute(blocks, costs, g, hw),
                     nb, splits)
            continue
        compute0 = base_compute + sum(costs[f].fwd_seconds for f in forced
                                      if f != nb)
        transfer0 = sum(costs[i].swap_seconds for i in range(1, k_ret)
                        if i not in forced) * xfer_scale
        max_saving = sum(costs[f].swap_seconds for f in free) * xfer_scale
        if best is not None and \
                max(compute0, transfer0 - max_saving) > best.makespan + 1e-12:
            continue   # no flag assignment of this partition can win
        forced_sorted = sorted(forced)
        capacity = hw.capacity_bytes
        for r in range(0, len(free) + 1):
            for combo in combinations(free, r):
                lb_compute = compute0 + sum(costs[c].fwd_seconds for c in combo
                                            if c != nb)
                lb_transfer = transfer0 - sum(costs[c].swap_seconds
                                              for c in combo) * xfer_scale
                if best is not None and \
                        max(lb_compute, lb_transfer) > best.makespan + 1e-12:
                    continue
                if _run_bytes_exceed(sorted(set(combo).union(forced_sorted)),
                                     costs, nb, capacity):
                    continue   # a recompute chain alone overflows the device
                consider(blocks, costs, forced | set(combo), nb, splits)
    if best is None:
        finest = tuple((i, i) for i in range(1, num + 1))
        blocks, costs = build_blocks(finest, g, hw, table)
        res = evaluate_blocks(blocks, g, hw, strategy, costs=costs)
        raise InfeasibleModelError(res.reason or first_reason or
                                   "no feasible partition under the memory capacity")
    return best


def solve_opt1(g: ModelGraph, hw: HardwareSpec, mode: str = "exhaustive",
               strategy: Strategy = Strategy.CAPACITY,
               max_blocks: Optional[int] = None,
               layer_bound: int = DEFAULT_EXHAUSTIVE_LAYER_BOUND):
    """Best contiguous partition for the strategy; returns a Block tuple."""
    if mode == "exhaustive":
        best = _search_exhaustive(g, hw, strategy, max_blocks, layer_bound,
                                  DEFAULT_OPT2_EXHAUSTIVE_BOUND)
        return tuple(b.flagged(recompute=False) for b in best.plan.blocks)
    if mode == "dp":
        partition = _dp_partition(g, hw, strategy, max_blocks)
        blocks, _ = build_blocks(partition, g, hw)
        return blocks
    raise PlannerError(f"unknown solver mode {mode!r}")


# ---------------------------------------------------------------------------
# split-point DP + local search (heuristic solver for large models)
# ---------------------------------------------------------------------------

def _dp_partition(g, hw, strategy, max_blocks, table: Optional[CostTable] = None):
    num = g.num_layers
    bound = num if max_blocks is None else min(max_blocks, num)
    table = table if table is not None else CostTable(g, hw)

    def range_cost(lo, hi):
        fw = (table.pre_eff_ops[hi] - table.pre_eff_ops[lo - 1]) / table.rate
        swap = (table.pre_bytes[hi] - table.pre_bytes[lo - 1]) / table.swap_rate
        if hw.duplex:
            return max(fw, swap) + max(fw * table.mult, swap)
        return max(fw * (1.0 + table.mult), 2.0 * swap)

    INF = float("inf")
    dp = [[INF] * (bound + 1) for _ in range(num + 1)]
    parent = [[0] * (bound + 1) for _ in range(num + 1)]
    dp[0][0] = 0.0
    for i in range(1, num + 1):
        for k in range(1, min(i, bound) + 1):
            for j in range(k - 1, i):
                if dp[j][k - 1] == INF:
                    continue
                cand = dp[j][k - 1] + range_cost(j + 1, i)
                if cand < dp[i][k]:
                    dp[i][k] = cand
                    parent[i][k] = j
    best_k = min(range(1, bound + 1), key=lambda k: (dp[num][k], k))
    splits = []
    i, k = num, best_k
    while k > 1:
        j = parent[i][k]
        splits.append(j)
        i, k = j, k - 1
    splits.reverse()

    seeds = [tuple(splits)]
    if num <= bound:
        seeds.append(tuple(range(1, num)))   # all singletons
    seeds.append(tuple())                    # one block
    return _polish_splits(seeds, g, hw, strategy, bound, table)


def _splits_to_partition(splits, num):
    bounds = (0,) + tuple(splits) + (num,)
    return tuple((bounds[i] + 1, bounds[i + 1]) for i in range(len(bounds) - 1))


_PENALTY_CAPACITY = 1e15
_PENALTY_STRUCTURAL = 1e18


def _eval_one(blocks, g, hw, strategy, costs):
    """Makespan, or a graded penalty so the local search can climb back
    toward feasibility (capacity overage gives it a gradient)."""
    plan = generate_schedule(blocks, g, hw, strategy, costs=costs)
    stats: dict = {}
    violations = _residency_memory_walk(plan, g, hw, stats=stats)
    if violations:
        if all("exceeding capacity" in v for v in violations):
            return _PENALTY_CAPACITY + stats["peak_demand"] - hw.capacity_bytes
        return _PENALTY_STRUCTURAL
    try:
        makespan, _, _ = plan_metrics(plan, g, hw, costs=costs)
    except DeadlockError:
        return _PENALTY_STRUCTURAL
    return makespan


def _eval_splits(splits, g, hw, strategy, table):
    partition = _splits_to_partition(splits, g.num_layers)
    blocks, costs = build_blocks(partition, g, hw, table)
    if strategy is Strategy.CAPACITY_RECOMPUTE:
        flags = _greedy_recompute(blocks, costs, g, hw)
        flagged = tuple(b.flagged(recompute=(b.id in flags)) for b in blocks)
        cost = _eval_one(flagged, g, hw, strategy, costs)
        if cost < _PENALTY_CAPACITY:
            return cost
        # greedy flags can overshoot the ledger; retry without them
        return min(cost, _eval_one(blocks, g, hw, strategy, costs))
    return _eval_one(blocks, g, hw, strategy, costs)


def _polish_splits(seeds, g, hw, strategy, bound, table, max_rounds: int = 40):
    num = g.num_layers
    best = None
    best_cost = float("inf")
    for seed in seeds:
        cost = _eval_splits(seed, g, hw, strategy, table)
        if cost < best_cost:
            best, best_cost = tuple(seed), cost
    if best is None:
        best, best_cost = tuple(), _eval_splits((), g, hw, strategy, table)

    for _ in range(max_rounds):
        improved = False
        current = set(best)
        moves = []
        for s in sorted(current):
            moves.append(current - {s})                      # drop a split
            if s - 1 >= 1 and s - 1 not in current:
                moves.append((current - {s}) | {s - 1})      # shift left
            if s + 1 <= num - 1 and s + 1 not in current:
                moves.append((current - {s}) | {s + 1})      # shift right
        if len(current) + 2 <= bound:
            for s in range(1, num):
                if s not in current:
                    moves.append(current | {s})              # add a split
        for cand in moves:
            if len(cand) + 1 > bound:
                continue
            cand_t = tuple(sorted(cand))
            cost = _eval_splits(cand_t, g, hw, strategy, table)
            if cost < best_cost - _EPS:
                best, best_cost = cand_t, cost
                improved = True
                break
        if not improved:
            break
    if best_cost >= _PENALTY_CAPACITY:
        raise InfeasibleModelError("no feasible partition found by the dp solver")
    return _splits_to_partition(best, num)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def plan_model(g: ModelGraph, hw: HardwareSpec,
               strategy: Strategy = Strategy.CAPACITY_RECOMPUTE,
               solver: str = "auto", max_blocks: Optional[int] = None,
               layer_bound: int = DEFAULT_EXHAUSTIVE_LAYER_BOUND) -> ExecutionPlan:
    """Partition, flag and schedule a model; returns a finalized plan."""
    if solver == "auto":
        solver = "exhaustive" if g.num_layers <= DEFAULT_AUTO_EXHAUSTIVE_LAYERS else "dp"
    if solver == "exhaustive":
        best = _search_exhaustive(g, hw, strategy, max_blocks, layer_bound,
                                  DEFAULT_OPT2_EXHAUSTIVE_BOUND)
        return finalize_plan(best.plan, g, hw)
    if solver != "dp":
        raise PlannerError(f"unknown solver {solver!r}")
    table = CostTable(g, hw)
    partition = _dp_partition(g, hw, strategy, max_blocks, table=table)
    blocks, costs = build_blocks(partition, g, hw, table)
    if strategy is Strategy.CAPACITY_RECOMPUTE:
        blocks = solve_opt2(blocks, g, hw, costs=costs)
    plan = generate_schedule(blocks, g, hw, strategy, costs=costs)
    violations = validate_plan(plan, g, hw)
    if violations:
        raise InfeasibleModelError(violations[0])
    return finalize_plan(plan, g, hw)
