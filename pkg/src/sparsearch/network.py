"""Network assembly and forward semantics.

Each op node transforms the factor-weighted sum of its active inputs; the
block output concatenates the factor-scaled contributing nodes, maps them
back to the block width with a 1x1 Conv-BN-ReLU, and adds the block input
as a residual. A block with no contributing node is the identity.
"""

from __future__ import annotations

import numpy as np

from . import functional as F
from . import ops
from .graph import BlockGraph, node_slot, prune
from .ops import ConvBnParams, HeadParams, OperationKind, ReductionParams
from .tensor import Tensor


class ConvBlock:
    def __init__(self, rng, graph, channels, dtype=np.float64, exact_r=False):
        self.graph = graph
        self.channels = channels
        self.node_params = {
            node: ops.make_op_params(rng, graph.kind_of(node), channels, dtype=dtype)
            for node in graph.op_nodes()
            if graph.active_in_edges(node)
        }
        r_in = len(graph.contributing_ops()) if exact_r else graph.levels * graph.ops_per_level
        self.r = ConvBnParams(rng, max(1, r_in) * channels, channels, 1, dtype=dtype)
        self.exact_r = exact_r

    def named_parameters(self, prefix):
        for node, p in sorted(self.node_params.items()):
            if p is not None:
                yield from p.named_parameters(f"{prefix}.node{node[0]}_{node[1]}")
        yield from self.r.named_parameters(prefix + ".r")

    def named_buffers(self, prefix):
        for node, p in sorted(self.node_params.items()):
            if p is not None:
                yield from p.named_buffers(f"{prefix}.node{node[0]}_{node[1]}")
        yield from self.r.named_buffers(prefix + ".r")

    def drop_dead_params(self):
        """Free learnable state of ops that are no longer alive."""
        alive = set(self.graph.alive_ops())
        for node in list(self.node_params):
            if node not in alive:
                del self.node_params[node]


def block_forward(block, prev, training):
    """Evaluate one block on the previous block's output."""
    g = block.graph
    h = {g.input_node: prev}
    for node in g.op_nodes():
        eids = g.active_in_edges(node)
        if not eids:
            continue
        xs = []
        for e in eids:
            src = g.edges[e][0]
            if src not in h:
                raise ValueError(f"edge from pruned op {src} is still active")
            xs.append(h[src])
        agg = F.edge_weighted_sum(xs, g.lam, eids)
        h[node] = ops.apply_op(g.kind_of(node), agg, block.node_params.get(node), training)

    contrib = [n for n in g.contributing_ops() if n in h]
    if not contrib:
        return prev
    pieces = [F.scale_by_index(h[n], g.lam, g.out_edge[n]) for n in contrib]
    cat = F.concat_channels(pieces)
    if block.exact_r:
        kernel = block.r.kernel
    else:
        c = block.channels
        idx = np.concatenate(
            [np.arange(node_slot(n, g.ops_per_level) * c, (node_slot(n, g.ops_per_level) + 1) * c)
             for n in contrib])
        kernel = F.take_channels(block.r.kernel, idx)
    y = F.conv2d(cat, kernel)
    y = F.relu(ops.batch_norm(y, block.r.bn, training))
    return F.add(y, prev)


class Network:
    """Stem, S stages of B blocks with reductions between stages, and a head."""

    def __init__(self, config, rng, dtype=np.float64, lam_requires_grad=True,
                 graphs=None, exact_r=False, widths=None):
        self.config = config
        self.dtype = dtype
        widths = list(widths) if widths is not None else config.stage_widths()
        self.widths = widths
        self.stem = ConvBnParams(rng, config.in_channels, widths[0], 3, dtype=dtype)

        if graphs is None:
            if config.lambda_mode == "shared":
                shared = BlockGraph(config.levels, config.ops_per_level, dtype=dtype,
                                    lam_requires_grad=lam_requires_grad)
                graphs = [shared] * (config.stages * config.blocks_per_stage)
            else:
                graphs = [BlockGraph(config.levels, config.ops_per_level, dtype=dtype,
                                     lam_requires_grad=lam_requires_grad)
                          for _ in range(config.stages * config.blocks_per_stage)]
        self.stages = []
        gi = 0
        for s in range(config.stages):
            blocks = []
            for _ in range(config.blocks_per_stage):
                blocks.append(ConvBlock(rng, graphs[gi], widths[s], dtype=dtype, exact_r=exact_r))
                gi += 1
            self.stages.append(blocks)
        self.reductions = [ReductionParams(rng, widths[s], widths[s + 1], dtype=dtype)
                           for s in range(config.stages - 1)]
        self.head = HeadParams(rng, widths[-1], config.num_classes, dtype=dtype)
        self.bn_scales_frozen = False

    def forward(self, x, training=False):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        y = ops.conv_bn_relu(x, self.stem, training)
        for s, blocks in enumerate(self.stages):
            for block in blocks:
                y = block_forward(block, y, training)
            if s < len(self.reductions):
                y = ops.reduction_block(y, self.reductions[s], training)
        return ops.classifier_head(y, self.head)

    def blocks(self):
        for blocks in self.stages:
            yield from blocks

    def graphs(self):
        return [b.graph for b in self.blocks()]

    def lambda_tables(self):
        """Distinct (name, BlockGraph) factor tables, one in shared mode."""
        if self.config.lambda_mode == "shared":
            return [("lambda.shared", self.stages[0][0].graph)]
        tables = []
        for s, blocks in enumerate(self.stages):
            for b, block in enumerate(blocks):
                tables.append((f"lambda.s{s}b{b}", block.graph))
        return tables

    def named_parameters(self):
        """(name, tensor, kind) for every weight; kind drives decay/freeze policy."""
        out = list(self.stem.named_parameters("stem"))
        for s, blocks in enumerate(self.stages):
            for b, block in enumerate(blocks):
                out.extend(block.named_parameters(f"stage{s}.block{b}"))
        for s, red in enumerate(self.reductions):
            out.extend(red.named_parameters(f"reduction{s}"))
        out.extend(self.head.named_parameters("head"))
        return out

    def trainable_parameters(self):
        return [(n, t, k) for n, t, k in self.named_parameters()
                if not (self.bn_scales_frozen and k == "bn_scale")]

    def named_buffers(self):
        out = list(self.stem.named_buffers("stem"))
        for s, blocks in enumerate(self.stages):
            for b, block in enumerate(blocks):
                out.extend(block.named_buffers(f"stage{s}.block{b}"))
        for s, red in enumerate(self.reductions):
            out.extend(red.named_buffers(f"reduction{s}"))
        out.extend(self.head.named_buffers("head"))
        return out

    def pruned_view(self):
        """A network sharing every weight, with pruned graphs (for equivalence checks)."""
        view = Network.__new__(Network)
        view.__dict__.update(self.__dict__)
        if self.config.lambda_mode == "shared":
            pg = prune(self.stages[0][0].graph)
            mapping = {id(self.stages[0][0].graph): pg}
        else:
            mapping = {id(b.graph): prune(b.graph) for b in self.blocks()}
        view.stages = []
        for blocks in self.stages:
            row = []
            for b in blocks:
                nb = ConvBlock.__new__(ConvBlock)
                nb.__dict__.update(b.__dict__)
                nb.graph = mapping[id(b.graph)]
                row.append(nb)
            view.stages.append(row)
        return view


def forward_equivalence_check(network, x, training=False, pruned=None):
    """Max |full forward - pruned forward| over logits, for identical weights."""
    full = network.forward(x, training=training)
    view = pruned if pruned is not None else network.pruned_view()
    cut = view.forward(x, training=training)
    return float(np.max(np.abs(full.data - cut.data)))


def build_from_descriptor(desc, rng, dtype=np.float64):
    """Materialize the retrain network: factors gone, edges plain sums, BN learnable."""
    from .graph import NetworkConfig, validate_descriptor

    validate_descriptor(desc)
    config = NetworkConfig(
        stages=desc.stages, blocks_per_stage=desc.blocks_per_stage,
        levels=desc.levels, ops_per_level=desc.ops_per_level,
        init_channels=1, num_classes=desc.num_classes,
        in_channels=desc.in_channels, image_size=desc.image_size,
        lambda_mode="full",
    )
    graphs = []
    for block in desc.blocks:
        kinds = [[None] * desc.ops_per_level for _ in range(desc.levels)]
        for level, index, kind in block.ops:
            kinds[level - 1][index - 1] = OperationKind(kind)
        for row in kinds:
            for j, k in enumerate(row):
                if k is None:
                    row[j] = ops.level_op_kinds(desc.ops_per_level)[j]
        g = BlockGraph(desc.levels, desc.ops_per_level, op_kinds=kinds,
                       lam_init=1.0, dtype=dtype, lam_requires_grad=False)
        g.active[:] = False
        for sl, si, dl, di, _lam in block.edges:
            g.active[g.edge_index[((sl, si), (dl, di))]] = True
        g.lam.data[:] = 1.0
        graphs.append(g)
    net = Network(config, rng, dtype=dtype, lam_requires_grad=False,
                  graphs=graphs, exact_r=True, widths=desc.stage_widths)
    for block in net.blocks():
        block.drop_dead_params()
    return net
