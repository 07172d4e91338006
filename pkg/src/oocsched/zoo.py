"""Synthetic model and hardware builders for demos, tests and fuzzing.

Nothing here is a real network; the builders produce self-consistent
fixtures whose compute/transfer ratios are easy to reason about: a uniform
chain for timeline studies, a conv stack with ImageNet-like proportions for
batch sweeps, a contracting/expansive graph with long skips, and randomized
linear models for fuzz campaigns.
"""

from __future__ import annotations

import random

from .cost_model import HardwareSpec, layer_memory, layer_ops
from .model_ir import Edge, LayerKind, LayerSpec, ModelGraph, build_graph, chain_edges


def uniform_chain_model(num_layers: int = 6, elems: int = 100,
                        element_bytes: int = 4, batch: int = 1) -> ModelGraph:
    """Linear chain of identical elementwise layers (one block each)."""
    layers = [LayerSpec(id=i, kind=LayerKind.ELEMENTWISE, x_count=elems,
                        element_bytes=element_bytes)
              for i in range(1, num_layers + 1)]
    return build_graph(layers, batch_size=batch)


def uniform_chain_hardware(g: ModelGraph, swap_compute_ratio: float = 2.0,
                           capacity_blocks: float = 3.0,
                           duplex: bool = True) -> HardwareSpec:
    """Hardware tuned so each layer computes in 1 s and swaps in
    ``swap_compute_ratio`` seconds; capacity holds ``capacity_blocks`` layers."""
    layer = g.layer(1)
    ops = layer_ops(layer, g.batch_size)
    mem = layer_memory(layer, g.batch_size)
    block_bytes = mem.mem_fwd_bytes + mem.mem_wt_bytes
    swap_bw = block_bytes / swap_compute_ratio
    return HardwareSpec(
        capacity_bytes=capacity_blocks * block_bytes,
        far_mem_bw=1e12,
        near_mem_bw=1e12,
        interconnect_bw=swap_bw,
        compute_rate=ops,
        host_update_rate=1e9,
        duplex=duplex,
        backward_multiplier=1.0,
    )


def swap_timeline_fixture():
    """The six-block illustration: uniform blocks, transfers twice as slow
    as compute, room for three blocks on the device."""
    g = uniform_chain_model(num_layers=6)
    hw = uniform_chain_hardware(g, swap_compute_ratio=2.0, capacity_blocks=3.0)
    return g, hw


def fc_chain_model(num_layers: int = 6, features: int = 64, batch: int = 2) -> ModelGraph:
    """Chain of equal fully-connected layers; weights dominate the footprint,
    which exercises gradient exchange and host updates."""
    layers = [LayerSpec(id=i, kind=LayerKind.FULLY_CONNECTED,
                        x_count=features, y_count=features)
              for i in range(1, num_layers + 1)]
    return build_graph(layers, batch_size=batch)


def conv_stack_model(conv_stages: int = 16, width: int = 32, channels: int = 16,
                     batch: int = 8) -> ModelGraph:
    """Conv/BN/ReLU stack with pool+classifier tail, 3*stages+2 layers.

    Spatial size halves and channel count doubles every four conv stages,
    mimicking a deep residual classifier's volume profile.
    """
    layers = []
    lid = 1
    w, c = width, channels
    c_prev = 3
    for s in range(conv_stages):
        if s > 0 and s % 4 == 0:
            w = max(w // 2, 4)
            c = min(c * 2, 256)
        area = w * w
        layers.append(LayerSpec(id=lid, kind=LayerKind.CONV, w_out=w, h_out=w,
                                c_in=c_prev, c_out=c, k=3))
        lid += 1
        layers.append(LayerSpec(id=lid, kind=LayerKind.BATCHNORM,
                                x_count=area * c, y_count=area * c, c_in=c))
        lid += 1
        layers.append(LayerSpec(id=lid, kind=LayerKind.RELU, y_count=area * c))
        lid += 1
        c_prev = c
    layers.append(LayerSpec(id=lid, kind=LayerKind.POOL, w_out=1, h_out=1,
                            c_in=c_prev, c_out=c_prev, k=w, pool_factor=2.0))
    lid += 1
    layers.append(LayerSpec(id=lid, kind=LayerKind.FULLY_CONNECTED,
                            x_count=c_prev, y_count=100))
    return build_graph(layers, batch_size=batch)


def conv_stack_hardware(capacity_bytes: float = 24e6) -> HardwareSpec:
    """Accelerator-flavoured numbers: fast compute, 16 GB/s interconnect."""
    return HardwareSpec(
        capacity_bytes=capacity_bytes,
        far_mem_bw=50e9,
        near_mem_bw=900e9,
        interconnect_bw=16e9,
        compute_rate=1e14,
        host_update_rate=2e9,
        duplex=True,
        backward_multiplier=2.0,
    )


def unet_model(batch: int = 1, elems: int = 4096) -> ModelGraph:
    """27-layer contracting/expansive graph with four long skip edges.

    Four [Conv, ReLU, Pool] contracting levels, a two-layer bottleneck,
    four [Conv, ReLU, Add] expansive levels and a classifier head; each
    pre-pool activation feeds the matching expansive merge.
    """
    layers = []
    lid = 1
    c = 8
    area = elems // c
    for _ in range(4):   # contracting: Conv, ReLU, Pool
        layers.append(LayerSpec(id=lid, kind=LayerKind.CONV, w_out=int(area ** 0.5) or 1,
                                h_out=int(area ** 0.5) or 1, c_in=c, c_out=c, k=3,
                                y_count=area * c))
        lid += 1
        layers.append(LayerSpec(id=lid, kind=LayerKind.RELU, y_count=area * c))
        lid += 1
        layers.append(LayerSpec(id=lid, kind=LayerKind.POOL, w_out=int(area ** 0.5) // 2 or 1,
                                h_out=int(area ** 0.5) // 2 or 1, c_in=c, c_out=c, k=2,
                                pool_factor=1.0, y_count=area * c // 4))
        lid += 1
        area = max(area // 4, 16)
    layers.append(LayerSpec(id=lid, kind=LayerKind.CONV, w_out=int(area ** 0.5) or 1,
                            h_out=int(area ** 0.5) or 1, c_in=c, c_out=c, k=3,
                            y_count=area * c))
    lid += 1
    layers.append(LayerSpec(id=lid, kind=LayerKind.RELU, y_count=area * c))
    lid += 1
    for _ in range(4):   # expansive: Conv, ReLU, Add (skip merge)
        area = min(area * 4, elems)
        layers.append(LayerSpec(id=lid, kind=LayerKind.CONV, w_out=int(area ** 0.5) or 1,
                                h_out=int(area ** 0.5) or 1, c_in=c, c_out=c, k=3,
                                y_count=area * c))
        lid += 1
        layers.append(LayerSpec(id=lid, kind=LayerKind.RELU, y_count=area * c))
        lid += 1
        layers.append(LayerSpec(id=lid, kind=LayerKind.ADD, x_count=area * c))
        lid += 1
    layers.append(LayerSpec(id=lid, kind=LayerKind.SOFTMAX, x_count=area * c))

    edges = list(chain_edges(len(layers)))
    # pre-pool activation of contracting level L feeds the merge of the
    # mirrored expansive level: 2 -> 26, 5 -> 23, 8 -> 20, 11 -> 17
    for src, dst in ((2, 26), (5, 23), (8, 20), (11, 17)):
        edges.append(Edge(src, dst, skip=True))
    return build_graph(layers, edges=edges, batch_size=batch)


def unet_hardware(g: ModelGraph, capacity_fraction: float = 0.5,
                  swap_compute_ratio: float = 2.0) -> HardwareSpec:
    total_bytes = 0.0
    total_ops = 0.0
    for layer in g.layers:
        mem = layer_memory(layer, g.batch_size)
        total_bytes += mem.mem_fwd_bytes + mem.mem_wt_bytes
        total_ops += layer_ops(layer, g.batch_size)
    mean_layer_seconds = 1.0
    rate = total_ops / (g.num_layers * mean_layer_seconds)
    mean_bytes = total_bytes / g.num_layers
    return HardwareSpec(
        capacity_bytes=total_bytes * capacity_fraction,
        far_mem_bw=1e12,
        near_mem_bw=1e12,
        interconnect_bw=mean_bytes / (mean_layer_seconds * swap_compute_ratio),
        compute_rate=rate,
        host_update_rate=1e9,
        duplex=True,
        backward_multiplier=1.0,
    )


def bottleneck_model(levels: int = 3, elems: int = 256, batch: int = 1) -> ModelGraph:
    """Residual-style chain: levels of [EW, EW, Add] with a skip jumping the
    two elementwise layers (k -> k+2 pattern), plus a classifier layer."""
    layers = []
    edges = []
    lid = 1
    for _ in range(levels):
        base = lid
        layers.append(LayerSpec(id=lid, kind=LayerKind.ELEMENTWISE, x_count=elems))
        lid += 1
        layers.append(LayerSpec(id=lid, kind=LayerKind.ELEMENTWISE, x_count=elems))
        lid += 1
        layers.append(LayerSpec(id=lid, kind=LayerKind.ADD, x_count=elems))
        lid += 1
        edges.append(Edge(base, base + 2, skip=True))
    layers.append(LayerSpec(id=lid, kind=LayerKind.SOFTMAX, x_count=elems))
    edges = list(chain_edges(len(layers))) + edges
    return build_graph(layers, edges=edges, batch_size=batch)


# ---------------------------------------------------------------------------
# randomized fixtures for fuzzing
# ---------------------------------------------------------------------------

_RANDOM_KINDS = (LayerKind.ELEMENTWISE, LayerKind.RELU, LayerKind.FULLY_CONNECTED,
                 LayerKind.DROPOUT, LayerKind.ADD, LayerKind.SOFTMAX)


def random_linear_model(rng: random.Random, num_layers: int,
                        max_elems: int = 200) -> ModelGraph:
    layers = []
    for i in range(1, num_layers + 1):
        kind = rng.choice(_RANDOM_KINDS)
        n = rng.randint(8, max_elems)
        if kind is LayerKind.RELU:
            spec = LayerSpec(id=i, kind=kind, y_count=n)
        elif kind is LayerKind.FULLY_CONNECTED:
            spec = LayerSpec(id=i, kind=kind, x_count=n, y_count=rng.randint(4, 64))
        else:
            spec = LayerSpec(id=i, kind=kind, x_count=n)
        layers.append(spec)
    return build_graph(layers, batch_size=rng.randint(1, 4))


def random_hardware(rng: random.Random, g: ModelGraph,
                    allow_tight: bool = True) -> HardwareSpec:
    """Hardware drawn around the model's own scale.

    Capacity is sampled between "tight but schedulable" (every consecutive
    layer pair plus one incoming block fits) and "everything fits"; the
    swap/compute ratio spans hidden-transfer to transfer-bound regimes.
    """
    per_layer = []
    total_ops = 0.0
    for layer in g.layers:
        mem = layer_memory(layer, g.batch_size)
        per_layer.append(mem.mem_fwd_bytes + mem.mem_wt_bytes)
        total_ops += layer_ops(layer, g.batch_size)
    total_bytes = sum(per_layer)
    pair_peak = max(
        (per_layer[i] + per_layer[i + 1] for i in range(len(per_layer) - 1)),
        default=per_layer[0],
    )
    floor = max(pair_peak, 2.0 * max(per_layer)) * 1.05
    if allow_tight:
        capacity = max(floor, total_bytes * rng.uniform(0.3, 1.2))
    else:
        capacity = total_bytes * 1.5
    layer_seconds = 1.0
    rate = total_ops / (g.num_layers * layer_seconds)
    ratio = rng.uniform(0.3, 4.0)
    mean_bytes = total_bytes / g.num_layers
    return HardwareSpec(
        capacity_bytes=capacity,
        far_mem_bw=1e12,
        near_mem_bw=1e12,
        interconnect_bw=mean_bytes / (layer_seconds * ratio),
        compute_rate=rate,
        host_update_rate=rng.choice([1e6, 1e9]),
        duplex=rng.random() < 0.8,
        backward_multiplier=rng.choice([1.0, 2.0]),
    )
