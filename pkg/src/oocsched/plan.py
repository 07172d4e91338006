"""Execution-plan data structures shared by the planner, simulator and models.

A plan is an ordered list of *stages*.  Ops inside one stage are mutually
independent and may overlap; the stage sequence orders each resource's work
queue.  Rendering follows the compact schedule notation::

    F1 → F2||S1out → F3 → ... → B6||S3in → B5 → F4 → B4||S1in → ... → B1

``F``/``B`` are forward/backward compute on a block, ``S..out``/``S..in``
are block transfers to and from far memory, and an ``F`` appearing in the
backward phase is a recomputed forward (rendered identically on purpose).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Optional

from .model_ir import ModelGraph


class Action(str, enum.Enum):
    FW = "fw"
    BW = "bw"
    SWAP_IN = "swap_in"
    SWAP_OUT = "swap_out"
    RECOMPUTE_FW = "recompute_fw"


class Strategy(str, enum.Enum):
    EAGER = "eager"
    CAPACITY = "capacity"
    CAPACITY_RECOMPUTE = "capacity-recompute"


@dataclass(frozen=True)
class Block:
    """A contiguous run of layers moved, computed and updated as one unit."""

    id: int
    first_layer: int
    last_layer: int
    swap_bytes: float = 0.0
    recompute: bool = False
    checkpoint: bool = False   # activations stay device-resident under the plan

    @property
    def layer_ids(self) -> range:
        return range(self.first_layer, self.last_layer + 1)

    def flagged(self, recompute=None, checkpoint=None) -> "Block":
        return Block(
            id=self.id, first_layer=self.first_layer, last_layer=self.last_layer,
            swap_bytes=self.swap_bytes,
            recompute=self.recompute if recompute is None else recompute,
            checkpoint=self.checkpoint if checkpoint is None else checkpoint,
        )


@dataclass(frozen=True)
class PlanOp:
    action: Action
    block: int


@dataclass(frozen=True)
class Stage:
    id: int
    ops: tuple[PlanOp, ...]
    duration: float = 0.0


@dataclass(frozen=True)
class ExecutionPlan:
    stages: tuple[Stage, ...]
    strategy: Strategy
    blocks: tuple[Block, ...]
    predicted_makespan: float = 0.0
    theta: Optional[int] = None

    def block(self, block_id: int) -> Block:
        return self.blocks[block_id - 1]

    def backward_start_index(self) -> int:
        """Index of the first backward-phase stage (backward or recompute op)."""
        for idx, stage in enumerate(self.stages):
            for op in stage.ops:
                if op.action in (Action.BW, Action.RECOMPUTE_FW):
                    return idx
        return len(self.stages)

    def backward_compute_steps(self) -> list[PlanOp]:
        """Compute ops of the backward phase, in stage order."""
        start = self.backward_start_index()
        steps = []
        for stage in self.stages[start:]:
            for op in stage.ops:
                if op.action in (Action.BW, Action.RECOMPUTE_FW):
                    steps.append(op)
        return steps

    def swapped_blocks(self) -> list[int]:
        return sorted({op.block for stage in self.stages for op in stage.ops
                       if op.action is Action.SWAP_IN})


def skip_requirement_map(blocks, g: ModelGraph) -> dict[int, tuple[int, ...]]:
    """Residency demands induced by skip edges that jump over a block boundary
    into a non-adjacent block.

    Backward (or recomputed forward) work on the target block needs the
    source block's buffers on device; skips within a block or into the
    immediately following block only route gradients and demand nothing.
    """
    block_of = {}
    for b in blocks:
        for lid in b.layer_ids:
            block_of[lid] = b.id
    demands: dict[int, set] = {}
    for e in g.skip_edges():
        src_b, dst_b = block_of[e.src], block_of[e.dst]
        if dst_b > src_b + 1:
            demands.setdefault(dst_b, set()).add(src_b)
    return {k: tuple(sorted(v)) for k, v in demands.items()}


def op_requires(op: PlanOp, skip_map: dict[int, tuple[int, ...]]) -> tuple[int, ...]:
    """Blocks that must be resident when the op starts."""
    if op.action is Action.FW:
        return (op.block - 1,) if op.block >= 2 else ()
    if op.action is Action.RECOMPUTE_FW:
        base = (op.block - 1,) if op.block >= 2 else ()
        return base + skip_map.get(op.block, ())
    if op.action is Action.BW:
        return (op.block,) + skip_map.get(op.block, ())
    return ()


# ---------------------------------------------------------------------------
# rendering and (de)serialization
# ---------------------------------------------------------------------------

_RENDER_PRIORITY = {
    Action.FW: 0, Action.RECOMPUTE_FW: 0, Action.BW: 0,
    Action.SWAP_IN: 1, Action.SWAP_OUT: 2,
}


def op_code(op: PlanOp) -> str:
    if op.action in (Action.FW, Action.RECOMPUTE_FW):
        return f"F{op.block}"
    if op.action is Action.BW:
        return f"B{op.block}"
    if op.action is Action.SWAP_IN:
        return f"S{op.block}in"
    return f"S{op.block}out"


def stage_text(stage: Stage) -> str:
    ops = sorted(stage.ops, key=lambda o: (_RENDER_PRIORITY[o.action], o.block))
    return "||".join(op_code(o) for o in ops)


def plan_string(plan: ExecutionPlan) -> str:
    return " → ".join(stage_text(s) for s in plan.stages)


def plan_text(plan: ExecutionPlan) -> str:
    """Multi-line rendering, one stage per line."""
    lines = []
    for idx, stage in enumerate(plan.stages):
        prefix = "" if idx == 0 else "→ "
        lines.append(prefix + stage_text(stage))
    return "\n".join(lines) + "\n"


def plan_to_dict(plan: ExecutionPlan) -> dict:
    return {
        "strategy": plan.strategy.value,
        "predicted_makespan": plan.predicted_makespan,
        "theta": plan.theta,
        "blocks": [
            {
                "id": b.id,
                "layers": [b.first_layer, b.last_layer],
                "swap_bytes": b.swap_bytes,
                "recompute": b.recompute,
                "checkpoint": b.checkpoint,
            }
            for b in plan.blocks
        ],
        "stages": [
            {
                "id": s.id,
                "duration": s.duration,
                "ops": [[op.action.value, op.block] for op in s.ops],
            }
            for s in plan.stages
        ],
    }


def plan_from_dict(data: dict) -> ExecutionPlan:
    blocks = tuple(
        Block(
            id=entry["id"],
            first_layer=entry["layers"][0],
            last_layer=entry["layers"][1],
            swap_bytes=entry.get("swap_bytes", 0.0),
            recompute=entry.get("recompute", False),
            checkpoint=entry.get("checkpoint", False),
        )
        for entry in data["blocks"]
    )
    stages = tuple(
        Stage(
            id=entry["id"],
            ops=tuple(PlanOp(Action(a), b) for a, b in entry["ops"]),
            duration=entry.get("duration", 0.0),
        )
        for entry in data["stages"]
    )
    return ExecutionPlan(
        stages=stages,
        strategy=Strategy(data["strategy"]),
        blocks=blocks,
        predicted_makespan=data.get("predicted_makespan", 0.0),
        theta=data.get("theta"),
    )


def write_plan(plan: ExecutionPlan, text_path=None, json_path=None) -> None:
    if text_path is not None:
        with open(text_path, "w", encoding="utf-8") as fh:
            fh.write(plan_text(plan))
    if json_path is not None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(plan_to_dict(plan), fh, indent=2)
            fh.write("\n")


def read_plan(json_path) -> ExecutionPlan:
    with open(json_path, "r", encoding="utf-8") as fh:
        return plan_from_dict(json.load(fh))
