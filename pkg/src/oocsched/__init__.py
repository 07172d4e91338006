"""Out-of-core training schedule planning and simulation toolkit."""

from .cost_model import (BlockCost, HardwareSpec, LayerCost, block_cost,
                         block_ops, compute_time, layer_memory, layer_ops,
                         parse_hardware, swap_time)
from .model_ir import (Edge, LayerKind, LayerSpec, MemoryOverride, ModelGraph,
                       ModelFormatError, ModelValidationError, build_graph,
                       parse_model, serialize_model, validate_dag, write_model)
from .occupancy import (BufferState, OccupancyReport, advance_buffers,
                        analytic_report, find_theta, occupancy_from_buffers,
                        occupancy_from_times, refined_occupancy,
                        swap_in_throughput, swapped_in_this_step)
from .plan import (Action, Block, ExecutionPlan, PlanOp, Stage, Strategy,
                   plan_string, plan_text, read_plan, write_plan)
from .planner import (InfeasibleModelError, PlannerError, enumerate_partitions,
                      generate_schedule, plan_model, score_partition,
                      solve_opt1, solve_opt2, validate_plan)
from .simulator import (DeadlockError, SimEvent, SimTrace, compare_strategies,
                        simulate, stall_profile)

__all__ = [name for name in dir() if not name.startswith("_")]

__version__ = "0.1.0"
