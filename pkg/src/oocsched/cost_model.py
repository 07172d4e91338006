"""Operation counts, memory footprints and time conversion for layer blocks.

Operation counts are direct-algorithm tallies (multiply-add pairs count as
one operation each, matching a naive loop-nest implementation):

==================  =====================================================
Conv                Wout * Hout * Cout * K * K * Cin          (per sample)
ReLU                Y                                          (per sample)
Pool                Wout * Hout * Cout * K * K * Cin * c       (per sample)
BatchNorm           3*B + 4*X + 2*Y          (whole mini-batch, B = batch)
LSTM                20 * Y                                     (per sample)
SelfAttention       4*dk^3 + dk^2 + 2*dk                       (per sample)
FullyConnected      X * Y  (== WT)                             (per sample)
Softmax             2 * X                                      (per sample)
Dropout/ElementWise/Add   X;  Reshape  0                       (per sample)
==================  =====================================================

Per-sample counts scale linearly with the mini-batch size; the BatchNorm
formula already spans the whole mini-batch (its X/Y are mini-batch element
counts), so it is affine rather than proportional in the batch.

Memory is estimated analytically (output elements * element bytes * batch
for activations, kind-specific weight counts) unless the layer carries a
measured override, which is returned verbatim and shadows the analytic
path entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

from .model_ir import LayerKind, LayerSpec, ModelGraph

POOL_MAX = 1.0
POOL_AVG = 2.0

DEFAULT_BACKWARD_MULTIPLIER = 2.0


class CostModelError(Exception):
    pass


class HardwareFormatError(Exception):
    pass


@dataclass(frozen=True)
class HardwareSpec:
    """Device description: capacity, the three transfer throughputs, and rates.

    ``swap throughput`` used for block transfers is the minimum of the far
    memory, near memory and interconnect throughputs.  ``duplex`` marks an
    interconnect able to move data in and out simultaneously.
    """

    capacity_bytes: float
    far_mem_bw: float
    near_mem_bw: float
    interconnect_bw: float
    compute_rate: float
    host_update_rate: float = 1e9
    duplex: bool = True
    backward_multiplier: float = DEFAULT_BACKWARD_MULTIPLIER
    efficiency: dict = field(default_factory=dict)   # kind name -> multiplier

    def __post_init__(self):
        for name in ("capacity_bytes", "far_mem_bw", "near_mem_bw",
                     "interconnect_bw", "compute_rate", "host_update_rate"):
            if getattr(self, name) <= 0:
                raise HardwareFormatError(f"{name} must be strictly positive")
        if self.backward_multiplier <= 0:
            raise HardwareFormatError("backward_multiplier must be strictly positive")

    def swap_throughput(self) -> float:
        return min(self.far_mem_bw, self.near_mem_bw, self.interconnect_bw)

    def kind_efficiency(self, kind: LayerKind) -> float:
        return float(self.efficiency.get(kind.value, 1.0))


@dataclass(frozen=True)
class LayerCost:
    layer_id: int
    ops: float
    mem_fwd_bytes: float
    mem_wt_bytes: float
    mem_grad_bytes: float


def _check_batch(batch: int):
    if batch < 1:
        raise CostModelError(f"batch size {batch} must be >= 1")


def ops_conv(l: LayerSpec, batch: int = 1) -> float:
    _check_batch(batch)
    return (l.require("w_out") * l.require("h_out") * l.require("c_out")
            * l.require("k") ** 2 * l.require("c_in")) * batch


def ops_relu(l: LayerSpec, batch: int = 1) -> float:
    _check_batch(batch)
    return l.require("y_count") * batch


def ops_pool(l: LayerSpec, batch: int = 1) -> float:
    _check_batch(batch)
    return (l.require("w_out") * l.require("h_out") * l.require("c_out")
            * l.require("k") ** 2 * l.require("c_in") * l.require("pool_factor")) * batch


def ops_batchnorm(l: LayerSpec, batch: int = 1) -> float:
    # mean (B) + variance (2B) + normalize (4X) + scale/shift (2Y), whole batch
    _check_batch(batch)
    return 3 * batch + 4 * l.require("x_count") + 2 * l.require("y_count")


def ops_lstm(l: LayerSpec, batch: int = 1) -> float:
    # four gate tensors combined by five elementwise passes
    _check_batch(batch)
    return 20 * l.require("y_count") * batch


def ops_self_attention(l: LayerSpec, batch: int = 1) -> float:
    _check_batch(batch)
    d_k = l.require("d_k")
    return (4 * d_k**3 + d_k**2 + 2 * d_k) * batch


def ops_fc(l: LayerSpec, batch: int = 1) -> float:
    _check_batch(batch)
    if l.wt_count is not None:
        return l.wt_count * batch
    return l.require("x_count") * l.require("y_count") * batch


def ops_softmax(l: LayerSpec, batch: int = 1) -> float:
    _check_batch(batch)
    return 2 * l.require("x_count") * batch


def ops_other(l: LayerSpec, batch: int = 1) -> float:
    _check_batch(batch)
    if l.kind is LayerKind.RESHAPE:
        return 0.0
    return l.require("x_count") * batch


_OPS_DISPATCH = {
    LayerKind.CONV: ops_conv,
    LayerKind.RELU: ops_relu,
    LayerKind.POOL: ops_pool,
    LayerKind.BATCHNORM: ops_batchnorm,
    LayerKind.LSTM: ops_lstm,
    LayerKind.SELF_ATTENTION: ops_self_attention,
    LayerKind.FULLY_CONNECTED: ops_fc,
    LayerKind.SOFTMAX: ops_softmax,
    LayerKind.DROPOUT: ops_other,
    LayerKind.RESHAPE: ops_other,
    LayerKind.ELEMENTWISE: ops_other,
    LayerKind.ADD: ops_other,
}


def layer_ops(l: LayerSpec, batch: int = 1) -> float:
    return _OPS_DISPATCH[l.kind](l, batch)


def _output_elements(l: LayerSpec) -> float:
    """Per-sample output element count, derived from shape when Y is absent."""
    if l.y_count is not None:
        return l.y_count
    if l.kind in (LayerKind.CONV, LayerKind.POOL):
        return l.require("w_out") * l.require("h_out") * l.require("c_out")
    if l.kind is LayerKind.SELF_ATTENTION:
        d_k = l.require("d_k")
        return d_k * (l.d_v if l.d_v is not None else d_k)
    if l.kind is LayerKind.RESHAPE:
        return 0.0   # metadata-only view, no new buffer
    if l.kind in (LayerKind.SOFTMAX, LayerKind.DROPOUT, LayerKind.ELEMENTWISE, LayerKind.ADD):
        return l.require("x_count")
    return l.require("y_count")


def weight_elements(l: LayerSpec) -> float:
    """Per-layer trainable element count; explicit WT wins over kind rules."""
    if l.wt_count is not None:
        return l.wt_count
    if l.kind is LayerKind.CONV:
        return l.require("k") ** 2 * l.require("c_in") * l.require("c_out")
    if l.kind is LayerKind.BATCHNORM:
        return 2 * l.require("c_in")
    if l.kind is LayerKind.LSTM:
        x, y = l.require("x_count"), l.require("y_count")
        return 4 * (x + y + 1) * y
    if l.kind is LayerKind.FULLY_CONNECTED:
        return l.require("x_count") * l.require("y_count")
    return 0.0


def layer_memory(l: LayerSpec, batch: int = 1) -> LayerCost:
    """Memory footprint in bytes; measured overrides shadow the analytic path."""
    _check_batch(batch)
    ov = l.memory_override
    analytic_fwd = _output_elements(l) * l.element_bytes * batch
    analytic_wt = weight_elements(l) * l.element_bytes
    fwd = ov.fwd if ov is not None and ov.fwd is not None else analytic_fwd
    wt = ov.wt if ov is not None and ov.wt is not None else analytic_wt
    grad = ov.grad if ov is not None and ov.grad is not None else wt
    return LayerCost(layer_id=l.id, ops=layer_ops(l, batch),
                     mem_fwd_bytes=fwd, mem_wt_bytes=wt, mem_grad_bytes=grad)


def ops_for_layers(g: ModelGraph, layer_ids: Iterable[int]) -> float:
    return sum(layer_ops(g.layer(i), g.batch_size) for i in layer_ids)


def block_ops(b, g: ModelGraph) -> float:
    """Aggregate forward operation count of a block (sum over its layers)."""
    return ops_for_layers(g, b.layer_ids)


@dataclass(frozen=True)
class BlockCost:
    """Time/byte profile of one block under a given model and hardware."""

    block_id: int
    fwd_seconds: float       # forward compute
    bwd_seconds: float       # backward compute
    bytes: float             # resident / transferred unit: activations + weights
    wt_bytes: float          # weights alone (next-iteration return leg)
    grad_bytes: float        # gradients exchanged by the data-parallel pipeline
    weight_elems: float
    swap_seconds: float      # whole-unit transfer time at min throughput


def _effective_ops(g: ModelGraph, layer_ids, hw: HardwareSpec) -> float:
    total = 0.0
    for i in layer_ids:
        layer = g.layer(i)
        eff = hw.kind_efficiency(layer.kind)
        if eff <= 0:
            raise CostModelError(f"efficiency.{layer.kind.value} must be positive")
        total += layer_ops(layer, g.batch_size) / eff
    return total


def block_cost(block, g: ModelGraph, hw: HardwareSpec) -> BlockCost:
    layer_ids = list(block.layer_ids)
    eff_ops = _effective_ops(g, layer_ids, hw)
    fwd = eff_ops / hw.compute_rate
    total_bytes = 0.0
    wt_bytes = 0.0
    grad = 0.0
    wt_elems = 0.0
    for i in layer_ids:
        mem = layer_memory(g.layer(i), g.batch_size)
        total_bytes += mem.mem_fwd_bytes + mem.mem_wt_bytes
        wt_bytes += mem.mem_wt_bytes
        grad += mem.mem_grad_bytes
        wt_elems += weight_elements(g.layer(i))
    return BlockCost(
        block_id=block.id,
        fwd_seconds=fwd,
        bwd_seconds=fwd * hw.backward_multiplier,
        bytes=total_bytes,
        wt_bytes=wt_bytes,
        grad_bytes=grad,
        weight_elems=wt_elems,
        swap_seconds=total_bytes / hw.swap_throughput(),
    )


def compute_time(block, g: ModelGraph, hw: HardwareSpec, direction: str = "fw") -> float:
    """Seconds of device compute for a block pass (``fw`` or ``bw``)."""
    eff_ops = _effective_ops(g, block.layer_ids, hw)
    seconds = eff_ops / hw.compute_rate
    if direction == "bw":
        return seconds * hw.backward_multiplier
    if direction != "fw":
        raise CostModelError(f"unknown direction {direction!r}")
    return seconds


def swap_time(block, g: ModelGraph, hw: HardwareSpec, direction: str = "in") -> float:
    """Seconds to move a block's buffers over the slowest link in the path."""
    if direction not in ("in", "out"):
        raise CostModelError(f"unknown direction {direction!r}")
    total = 0.0
    for i in block.layer_ids:
        mem = layer_memory(g.layer(i), g.batch_size)
        total += mem.mem_fwd_bytes + mem.mem_wt_bytes
    return total / hw.swap_throughput()


# ---------------------------------------------------------------------------
# hardware spec file:  key = value, one per line, '#' comments
# ---------------------------------------------------------------------------

_HW_FLOAT_KEYS = (
    "capacity_bytes", "far_mem_bw", "near_mem_bw", "interconnect_bw",
    "compute_rate", "host_update_rate", "backward_multiplier",
)


def parse_hardware_text(text: str) -> HardwareSpec:
    values: dict = {}
    efficiency: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise HardwareFormatError(f"line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key in _HW_FLOAT_KEYS:
            try:
                values[key] = float(value)
            except ValueError:
                raise HardwareFormatError(f"line {lineno}: bad number {value!r}") from None
        elif key == "duplex":
            if value.lower() not in ("true", "false"):
                raise HardwareFormatError(f"line {lineno}: duplex must be true or false")
            values["duplex"] = value.lower() == "true"
        elif key.startswith("efficiency."):
            kind = key.split(".", 1)[1]
            if kind not in {k.value for k in LayerKind}:
                raise HardwareFormatError(f"line {lineno}: unknown kind {kind!r}")
            efficiency[kind] = float(value)
        else:
            raise HardwareFormatError(f"line {lineno}: unknown key {key!r}")
    missing = [k for k in ("capacity_bytes", "far_mem_bw", "near_mem_bw",
                           "interconnect_bw", "compute_rate") if k not in values]
    if missing:
        raise HardwareFormatError(f"missing keys: {', '.join(missing)}")
    return HardwareSpec(efficiency=efficiency, **values)


def parse_hardware(path) -> HardwareSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_hardware_text(fh.read())


def serialize_hardware(hw: HardwareSpec) -> str:
    lines = [
        f"capacity_bytes = {hw.capacity_bytes:g}",
        f"far_mem_bw = {hw.far_mem_bw:g}",
        f"near_mem_bw = {hw.near_mem_bw:g}",
        f"interconnect_bw = {hw.interconnect_bw:g}",
        f"compute_rate = {hw.compute_rate:g}",
        f"host_update_rate = {hw.host_update_rate:g}",
        f"duplex = {'true' if hw.duplex else 'false'}",
        f"backward_multiplier = {hw.backward_multiplier:g}",
    ]
    for kind in sorted(hw.efficiency):
        lines.append(f"efficiency.{kind} = {hw.efficiency[kind]:g}")
    return "\n".join(lines) + "\n"


def write_hardware(hw: HardwareSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_hardware(hw))
