"""Layer-graph intermediate representation and its on-disk text format.

A model is an ordered list of layers (ids 1..l) plus forward-only dependency
edges.  Consecutive edges (i, i+1) form the execution chain; any edge that
jumps further ahead must carry an explicit ``skip`` flag so the planner can
reason about residual / U-Net style connectivity without inferring it.

File format (hand-writable, one fixture per file)::

    # comment
    version = 1
    batch_size = 8

    [layers]
    1 Conv Wout=2 Hout=2 Cin=3 Cout=4 K=3 elem=4
    2 ReLU Y=16
    3 FullyConnected X=16 Y=10 mem_fwd=1000 mem_wt=2000 mem_grad=2000

    [edges]
    1 -> 2
    2 -> 3
    1 -> 3 skip

If the ``[edges]`` section is omitted entirely, the plain chain
1->2->...->l is assumed.  Unknown keys are rejected.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional


class ModelFormatError(Exception):
    """Malformed model file (syntax, unknown key, bad literal)."""


class ModelValidationError(Exception):
    """Structurally well-formed model that violates graph invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class LayerKind(str, enum.Enum):
    CONV = "Conv"
    RELU = "ReLU"
    POOL = "Pool"
    BATCHNORM = "BatchNorm"
    LSTM = "LSTM"
    SELF_ATTENTION = "SelfAttention"
    FULLY_CONNECTED = "FullyConnected"
    SOFTMAX = "Softmax"
    DROPOUT = "Dropout"
    RESHAPE = "Reshape"
    ELEMENTWISE = "ElementWise"
    ADD = "Add"


# Shape keys each kind must / may carry.  Everything else must be absent.
REQUIRED_FIELDS = {
    LayerKind.CONV: ("w_out", "h_out", "c_in", "c_out", "k"),
    LayerKind.RELU: ("y_count",),
    LayerKind.POOL: ("w_out", "h_out", "c_in", "c_out", "k", "pool_factor"),
    LayerKind.BATCHNORM: ("x_count", "y_count", "c_in"),
    LayerKind.LSTM: ("x_count", "y_count"),
    LayerKind.SELF_ATTENTION: ("d_k",),
    LayerKind.FULLY_CONNECTED: ("x_count", "y_count"),
    LayerKind.SOFTMAX: ("x_count",),
    LayerKind.DROPOUT: ("x_count",),
    LayerKind.RESHAPE: ("x_count",),
    LayerKind.ELEMENTWISE: ("x_count",),
    LayerKind.ADD: ("x_count",),
}

OPTIONAL_FIELDS = {
    LayerKind.CONV: ("y_count",),
    LayerKind.POOL: ("y_count",),
    LayerKind.SELF_ATTENTION: ("d_v", "y_count"),
    LayerKind.FULLY_CONNECTED: ("wt_count",),
    LayerKind.SOFTMAX: ("y_count",),
    LayerKind.RESHAPE: ("y_count",),
}

_SHAPE_FIELDS = (
    "w_out", "h_out", "c_in", "c_out", "k", "pool_factor",
    "d_k", "d_v", "x_count", "y_count", "wt_count",
)

# file key -> dataclass field
_KEY_MAP = {
    "Wout": "w_out", "Hout": "h_out", "Cin": "c_in", "Cout": "c_out",
    "K": "k", "c": "pool_factor", "dk": "d_k", "dv": "d_v",
    "X": "x_count", "Y": "y_count", "WT": "wt_count",
}
_FIELD_TO_KEY = {v: k for k, v in _KEY_MAP.items()}

DEFAULT_ELEMENT_BYTES = 4


@dataclass(frozen=True)
class MemoryOverride:
    """Measured per-layer byte counts that shadow the analytic estimator."""

    fwd: Optional[int] = None
    wt: Optional[int] = None
    grad: Optional[int] = None

    def any_set(self) -> bool:
        return any(v is not None for v in (self.fwd, self.wt, self.grad))


@dataclass(frozen=True)
class LayerSpec:
    id: int
    kind: LayerKind
    w_out: Optional[int] = None
    h_out: Optional[int] = None
    c_in: Optional[int] = None
    c_out: Optional[int] = None
    k: Optional[int] = None
    pool_factor: Optional[float] = None   # 1 = max pooling, 2 = average
    d_k: Optional[int] = None
    d_v: Optional[int] = None
    x_count: Optional[int] = None
    y_count: Optional[int] = None
    wt_count: Optional[int] = None
    element_bytes: int = DEFAULT_ELEMENT_BYTES
    memory_override: Optional[MemoryOverride] = None

    def require(self, name: str) -> float:
        value = getattr(self, name)
        if value is None:
            raise ModelValidationError(
                [f"layer {self.id}: {self.kind.value} requires {_FIELD_TO_KEY[name]}"]
            )
        return value


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    skip: bool = False


@dataclass(frozen=True)
class ModelGraph:
    layers: tuple[LayerSpec, ...]
    edges: tuple[Edge, ...]
    batch_size: int = 1

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def layer(self, layer_id: int) -> LayerSpec:
        return self.layers[layer_id - 1]

    def skip_edges(self) -> tuple[Edge, ...]:
        return tuple(e for e in self.edges if e.skip)

    def with_batch_size(self, batch_size: int) -> "ModelGraph":
        return replace(self, batch_size=batch_size)


def chain_edges(num_layers: int) -> tuple[Edge, ...]:
    return tuple(Edge(i, i + 1) for i in range(1, num_layers))


def validate_dag(g: ModelGraph) -> list[str]:
    """Check all graph invariants; returns one message per violation."""
    violations: list[str] = []
    seen_ids = set()
    for layer in g.layers:
        if layer.id in seen_ids:
            violations.append(f"duplicate id {layer.id}")
        seen_ids.add(layer.id)
    expected = list(range(1, len(g.layers) + 1))
    actual = [layer.id for layer in g.layers]
    if actual != expected and not any(v.startswith("duplicate") for v in violations):
        violations.append(f"layer ids {actual} are not the contiguous sequence 1..{len(g.layers)}")

    if g.batch_size < 1:
        violations.append(f"batch_size {g.batch_size} must be >= 1")

    n = len(g.layers)
    seen_edges = set()
    for e in g.edges:
        if (e.src, e.dst) in seen_edges:
            violations.append(f"duplicate edge {e.src} -> {e.dst}")
        seen_edges.add((e.src, e.dst))
        if not (1 <= e.src <= n and 1 <= e.dst <= n):
            violations.append(f"edge {e.src} -> {e.dst} references unknown layer")
            continue
        if e.src >= e.dst:
            violations.append(f"backward edge {e.src} -> {e.dst}")
            continue
        if e.dst > e.src + 1 and not e.skip:
            violations.append(f"edge {e.src} -> {e.dst} jumps layers but lacks the skip flag")
        if e.dst == e.src + 1 and e.skip:
            violations.append(f"edge {e.src} -> {e.dst} is consecutive and must not be flagged skip")

    incoming = {i: 0 for i in range(1, n + 1)}
    outgoing = {i: 0 for i in range(1, n + 1)}
    for e in g.edges:
        if 1 <= e.src <= n and 1 <= e.dst <= n and e.src < e.dst:
            outgoing[e.src] += 1
            incoming[e.dst] += 1
    for i in range(2, n + 1):
        if incoming[i] == 0:
            violations.append(f"layer {i} has no incoming edge")
    for i in range(1, n):
        if outgoing[i] == 0:
            violations.append(f"layer {i} has no outgoing edge")

    violations.extend(_validate_layer_fields(g))
    return violations


def _validate_layer_fields(g: ModelGraph) -> list[str]:
    violations = []
    for layer in g.layers:
        if not isinstance(layer.kind, LayerKind):
            violations.append(f"layer {layer.id}: unknown kind {layer.kind!r}")
            continue
        required = REQUIRED_FIELDS[layer.kind]
        allowed = set(required) | set(OPTIONAL_FIELDS.get(layer.kind, ()))
        for name in required:
            value = getattr(layer, name)
            if value is None:
                violations.append(
                    f"layer {layer.id}: {layer.kind.value} requires {_FIELD_TO_KEY[name]}"
                )
            elif value <= 0:
                violations.append(
                    f"layer {layer.id}: {_FIELD_TO_KEY[name]}={value} must be strictly positive"
                )
        for name in _SHAPE_FIELDS:
            value = getattr(layer, name)
            if name not in allowed and value not in (None, 0):
                violations.append(
                    f"layer {layer.id}: {_FIELD_TO_KEY[name]} not used by {layer.kind.value}"
                )
            elif name in allowed and value is not None and value <= 0:
                violations.append(
                    f"layer {layer.id}: {_FIELD_TO_KEY[name]}={value} must be strictly positive"
                )
        if layer.element_bytes <= 0:
            violations.append(f"layer {layer.id}: elem={layer.element_bytes} must be positive")
    return violations


def build_graph(layers, edges=None, batch_size=1, validate=True) -> ModelGraph:
    if edges is None:
        edges = chain_edges(len(layers))
    g = ModelGraph(layers=tuple(layers), edges=tuple(edges), batch_size=batch_size)
    if validate:
        violations = validate_dag(g)
        if violations:
            raise ModelValidationError(violations)
    return g


# ---------------------------------------------------------------------------
# parsing / serialization
# ---------------------------------------------------------------------------

def _parse_int(token: str, context: str) -> int:
    try:
        value = float(token)
    except ValueError:
        raise ModelFormatError(f"{context}: expected a number, got {token!r}") from None
    if value != int(value):
        raise ModelFormatError(f"{context}: expected an integer, got {token!r}")
    return int(value)


def parse_model_text(text: str) -> ModelGraph:
    header: dict[str, str] = {}
    layers: list[LayerSpec] = []
    edges: list[Edge] = []
    saw_edges_section = False
    section = "header"

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if line == "[layers]":
                section = "layers"
            elif line == "[edges]":
                section = "edges"
                saw_edges_section = True
            else:
                raise ModelFormatError(f"line {lineno}: unknown section {line}")
            continue
        if section == "header":
            if "=" not in line:
                raise ModelFormatError(f"line {lineno}: expected key = value in header")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in ("version", "batch_size"):
                raise ModelFormatError(f"line {lineno}: unknown header key {key!r}")
            header[key] = value
        elif section == "layers":
            layers.append(_parse_layer_line(line, lineno))
        else:
            edges.append(_parse_edge_line(line, lineno))

    if header.get("version") != "1":
        raise ModelFormatError(f"unsupported or missing version {header.get('version')!r}")
    if "batch_size" not in header:
        raise ModelFormatError("missing batch_size header")
    batch_size = _parse_int(header["batch_size"], "batch_size")
    if not layers:
        raise ModelFormatError("model declares no layers")

    g = ModelGraph(
        layers=tuple(layers),
        edges=tuple(edges) if saw_edges_section else chain_edges(len(layers)),
        batch_size=batch_size,
    )
    violations = validate_dag(g)
    if violations:
        raise ModelValidationError(violations)
    return g


def _parse_layer_line(line: str, lineno: int) -> LayerSpec:
    tokens = line.split()
    if len(tokens) < 2:
        raise ModelFormatError(f"line {lineno}: layer record needs 'id kind key=value...'")
    layer_id = _parse_int(tokens[0], f"line {lineno}: layer id")
    try:
        kind = LayerKind(tokens[1])
    except ValueError:
        raise ModelFormatError(f"line {lineno}: unknown layer kind {tokens[1]!r}") from None

    fields: dict = {}
    override: dict = {}
    for token in tokens[2:]:
        if "=" not in token:
            raise ModelFormatError(f"line {lineno}: expected key=value, got {token!r}")
        key, _, value = token.partition("=")
        ctx = f"line {lineno}: layer {layer_id} key {key}"
        if key in _KEY_MAP:
            name = _KEY_MAP[key]
            fields[name] = float(value) if name == "pool_factor" else _parse_int(value, ctx)
        elif key == "elem":
            fields["element_bytes"] = _parse_int(value, ctx)
        elif key == "mem_fwd":
            override["fwd"] = _parse_int(value, ctx)
        elif key == "mem_wt":
            override["wt"] = _parse_int(value, ctx)
        elif key == "mem_grad":
            override["grad"] = _parse_int(value, ctx)
        else:
            raise ModelFormatError(f"line {lineno}: layer {layer_id} has unknown key {key!r}")
    if override:
        fields["memory_override"] = MemoryOverride(**override)
    return LayerSpec(id=layer_id, kind=kind, **fields)


def _parse_edge_line(line: str, lineno: int) -> Edge:
    tokens = line.split()
    if len(tokens) not in (3, 4) or tokens[1] != "->":
        raise ModelFormatError(f"line {lineno}: expected 'i -> j [skip]'")
    skip = False
    if len(tokens) == 4:
        if tokens[3] != "skip":
            raise ModelFormatError(f"line {lineno}: trailing token must be 'skip'")
        skip = True
    src = _parse_int(tokens[0], f"line {lineno}: edge source")
    dst = _parse_int(tokens[2], f"line {lineno}: edge target")
    return Edge(src=src, dst=dst, skip=skip)


def parse_model(path) -> ModelGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_model_text(fh.read())


def serialize_model(g: ModelGraph) -> str:
    lines = ["version = 1", f"batch_size = {g.batch_size}", "", "[layers]"]
    for layer in g.layers:
        parts = [str(layer.id), layer.kind.value]
        for name in _SHAPE_FIELDS:
            value = getattr(layer, name)
            if value is not None:
                if name == "pool_factor":
                    rendered = f"{value:g}"
                else:
                    rendered = str(int(value))
                parts.append(f"{_FIELD_TO_KEY[name]}={rendered}")
        parts.append(f"elem={layer.element_bytes}")
        ov = layer.memory_override
        if ov is not None:
            if ov.fwd is not None:
                parts.append(f"mem_fwd={ov.fwd}")
            if ov.wt is not None:
                parts.append(f"mem_wt={ov.wt}")
            if ov.grad is not None:
                parts.append(f"mem_grad={ov.grad}")
        lines.append(" ".join(parts))
    lines.append("")
    lines.append("[edges]")
    for e in g.edges:
        suffix = " skip" if e.skip else ""
        lines.append(f"{e.src} -> {e.dst}{suffix}")
    return "\n".join(lines) + "\n"


def write_model(g: ModelGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_model(g))
