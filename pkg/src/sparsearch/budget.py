"""FLOPs and memory-access accounting, and the adaptive sparsity weights.

Counting conventions (all acceptance numbers assume these):
  * one multiply-add = 1 FLOP; every kernel tap counts, padding included
  * pooling, BN, ReLU, global average pool = 0 FLOPs (no multiplies)
  * MAC = activation reads + writes + parameter reads, in scalar words;
    pooling moves activations so its MAC is nonzero
  * H, W passed to the per-op functions are the op's input spatial dims;
    stride-2 kinds halve them internally (ceil)
"""

from __future__ import annotations

import numpy as np

from .graph import pruned_mask
from .ops import OperationKind


def flops_conv(c_in, c_out, kernel, h_out, w_out):
    return h_out * w_out * c_in * c_out * kernel * kernel


def flops_of_op(kind, c_in, c_out, h, w):
    if min(c_in, c_out, h, w) < 1:
        raise ValueError("op dimensions must be positive")
    if kind is OperationKind.SEP_CONV_3X3:
        return h * w * c_in * 9 + h * w * c_in * c_out
    if kind is OperationKind.SEP_CONV_5X5:
        return h * w * c_in * 25 + h * w * c_in * c_out
    if kind in (OperationKind.AVG_POOL_3X3, OperationKind.MAX_POOL_3X3):
        return 0
    if kind is OperationKind.REDUCTION_CONV:
        ho, wo = -(-h // 2), -(-w // 2)
        return flops_conv(c_in, c_out, 1, ho, wo) + flops_conv(c_in, c_out, 3, ho, wo)
    if kind is OperationKind.IDENTITY:
        return 0
    raise ValueError(f"unknown operation kind {kind!r}")


def mac_of_op(kind, c_in, c_out, h, w):
    if min(c_in, c_out, h, w) < 1:
        raise ValueError("op dimensions must be positive")
    if kind is OperationKind.SEP_CONV_3X3:
        return h * w * c_in + h * w * c_out + (9 * c_in + c_in * c_out)
    if kind is OperationKind.SEP_CONV_5X5:
        return h * w * c_in + h * w * c_out + (25 * c_in + c_in * c_out)
    if kind in (OperationKind.AVG_POOL_3X3, OperationKind.MAX_POOL_3X3):
        return 2 * h * w * c_in
    if kind is OperationKind.REDUCTION_CONV:
        ho, wo = -(-h // 2), -(-w // 2)
        return h * w * c_in + ho * wo * c_out + 10 * c_in * c_out
    if kind is OperationKind.IDENTITY:
        return 0
    raise ValueError(f"unknown operation kind {kind!r}")


def block_flops_from_kinds(kinds, n_contrib, channels, size):
    total = sum(flops_of_op(k, channels, channels, size, size) for k in kinds)
    if n_contrib > 0:
        total += flops_conv(n_contrib * channels, channels, 1, size, size)
    return total


def flops_of_block(graph, channels, size, mask=None):
    """FLOPs of the ops kept by the mask (default: the graph's active mask)."""
    if mask is None:
        mask = graph.active
    alive = [n for n in graph.op_nodes() if any(mask[e] for e in graph.in_edges[n])]
    kinds = [graph.kind_of(n) for n in alive]
    n_contrib = sum(1 for n in alive if mask[graph.out_edge[n]])
    return block_flops_from_kinds(kinds, n_contrib, channels, size)


def flops_of_full_block(graph, channels, size):
    """FLOPs_block: every edge active."""
    return flops_of_block(graph, channels, size, mask=np.ones(len(graph.edges), dtype=bool))


def adaptive_flops_gamma(base_gamma, flops_t, flops_block):
    """Ratio-scaled sparsity weight for one block: gamma * kept/full."""
    if flops_block <= 0:
        raise ValueError("flops_block must be positive")
    if not 0 <= flops_t <= flops_block:
        raise ValueError("flops_t must lie in [0, flops_block]")
    return base_gamma * flops_t / flops_block


def adaptive_mac_gamma(base_gamma, mac_mn, mac_max):
    """Per-operation sparsity weight: gamma * MAC(op)/MAC_max."""
    if mac_max <= 0:
        raise ValueError("mac_max must be positive")
    return base_gamma * mac_mn / mac_max


def network_flops(net, pruned=True):
    """Total network FLOPs; pruned=False counts every edge active."""
    cfg = net.config
    widths = net.widths
    sizes = [-(-cfg.image_size // 2 ** s) for s in range(cfg.stages)]
    total = flops_conv(cfg.in_channels, widths[0], 3, cfg.image_size, cfg.image_size)
    for s, blocks in enumerate(net.stages):
        for block in blocks:
            if pruned:
                mask = pruned_mask(block.graph)
                total += flops_of_block(block.graph, widths[s], sizes[s], mask=mask)
            else:
                total += flops_of_full_block(block.graph, widths[s], sizes[s])
        if s + 1 < cfg.stages:
            total += flops_of_op(OperationKind.REDUCTION_CONV, widths[s], widths[s + 1],
                                 sizes[s], sizes[s])
    total += widths[-1] * cfg.num_classes
    return total


def descriptor_flops(desc, widths=None):
    """Network FLOPs of a descriptor, optionally at overridden stage widths."""
    widths = list(widths) if widths is not None else list(desc.stage_widths)
    sizes = [-(-desc.image_size // 2 ** s) for s in range(desc.stages)]
    total = flops_conv(desc.in_channels, widths[0], 3, desc.image_size, desc.image_size)
    for bi, block in enumerate(desc.blocks):
        s = bi // desc.blocks_per_stage
        kinds = [OperationKind(kind) for _, _, kind in block.ops]
        n_contrib = sum(1 for _, _, dl, _, _ in block.edges if dl == desc.levels + 1)
        total += block_flops_from_kinds(kinds, n_contrib, widths[s], sizes[s])
    for s in range(desc.stages - 1):
        total += flops_of_op(OperationKind.REDUCTION_CONV, widths[s], widths[s + 1],
                             sizes[s], sizes[s])
    total += widths[-1] * desc.num_classes
    return total


def per_block_flops(net):
    """Surviving FLOPs of each conv block, stage-major (for metrics/balance checks)."""
    cfg = net.config
    sizes = [-(-cfg.image_size // 2 ** s) for s in range(cfg.stages)]
    out = []
    for s, blocks in enumerate(net.stages):
        for block in blocks:
            mask = pruned_mask(block.graph)
            out.append(flops_of_block(block.graph, net.widths[s], sizes[s], mask=mask))
    return out


def edge_gammas(net, policy, base_gamma):
    """Per-edge sparsity weights for every factor table, per the active policy.

    adaptive_flops: one weight per block (Eq-style kept/full FLOPs ratio), on
    all of that block's edges. adaptive_mac: a weight per op on its incoming
    edges (output edges keep the base weight); MAC_max is the static maximum
    over the full network. In shared mode, per-instance weights are averaged
    so a full graph still sees exactly base_gamma.
    """
    if policy not in ("none", "adaptive_flops", "adaptive_mac"):
        raise ValueError(f"unknown budget policy {policy!r}")
    cfg = net.config
    sizes = [-(-cfg.image_size // 2 ** s) for s in range(cfg.stages)]
    tables = {name: [] for name, _ in net.lambda_tables()}

    if policy == "none":
        return {name: np.full(len(g.edges), float(base_gamma))
                for name, g in net.lambda_tables()}

    if policy == "adaptive_mac":
        mac_max = 0
        for s, blocks in enumerate(net.stages):
            for block in blocks:
                for n in block.graph.op_nodes():
                    mac_max = max(mac_max, mac_of_op(block.graph.kind_of(n),
                                                     net.widths[s], net.widths[s],
                                                     sizes[s], sizes[s]))

    shared = cfg.lambda_mode == "shared"
    bi = 0
    for s, blocks in enumerate(net.stages):
        for b, block in enumerate(blocks):
            g = block.graph
            name = "lambda.shared" if shared else f"lambda.s{s}b{b}"
            per_edge = np.empty(len(g.edges))
            if policy == "adaptive_flops":
                kept = flops_of_block(g, net.widths[s], sizes[s], mask=pruned_mask(g))
                full = flops_of_full_block(g, net.widths[s], sizes[s])
                per_edge[:] = adaptive_flops_gamma(base_gamma, kept, full)
            else:
                per_edge[:] = base_gamma
                for n in g.op_nodes():
                    mac = mac_of_op(g.kind_of(n), net.widths[s], net.widths[s],
                                    sizes[s], sizes[s])
                    gam = adaptive_mac_gamma(base_gamma, mac, mac_max)
                    for e in g.in_edges[n]:
                        per_edge[e] = gam
            tables[name].append(per_edge)
            bi += 1
    return {name: np.mean(stack, axis=0) for name, stack in tables.items()}


def cost_table(config):
    """Rows (kind, c_in, c_out, h, w, flops, mac) over the network's stage dims."""
    widths = config.stage_widths()
    sizes = [-(-config.image_size // 2 ** s) for s in range(config.stages)]
    rows = []
    for s in range(config.stages):
        c, hw = widths[s], sizes[s]
        for kind in (OperationKind.SEP_CONV_3X3, OperationKind.SEP_CONV_5X5,
                     OperationKind.AVG_POOL_3X3, OperationKind.MAX_POOL_3X3):
            rows.append((kind.value, c, c, hw, hw,
                         flops_of_op(kind, c, c, hw, hw), mac_of_op(kind, c, c, hw, hw)))
        n_full = config.levels * config.ops_per_level
        rows.append(("conv1x1_reduce_full", n_full * c, c, hw, hw,
                     flops_conv(n_full * c, c, 1, hw, hw),
                     hw * hw * n_full * c + hw * hw * c + n_full * c * c))
        if s + 1 < config.stages:
            kind = OperationKind.REDUCTION_CONV
            rows.append((kind.value, c, widths[s + 1], hw, hw,
                         flops_of_op(kind, c, widths[s + 1], hw, hw),
                         mac_of_op(kind, c, widths[s + 1], hw, hw)))
    return rows
