"""The completely-connected block DAG and its pruning.

A block has M levels of N operations. Every op receives the block input and
all ops of earlier levels, each flow scaled by one entry of the block's
factor vector; every op also has one edge to the block output. Nodes are
(level, index) pairs: (0,0) is the input, (M+1,0) the output.

Pruning deactivates exactly-zero factors, then removes operations with no
active incoming edge or no active path to the output, to a fixpoint.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .ops import BLOCK_OPERATIONS, OperationKind, level_op_kinds
from .tensor import Tensor


def edge_count(levels, ops_per_level):
    """Closed form for the number of edges in a complete block."""
    m, n = levels, ops_per_level
    return sum(n * ((i - 1) * n + 1) for i in range(1, m + 1)) + m * n


def node_slot(node, ops_per_level):
    """Dense index of an op node in (level, index) order."""
    level, index = node
    return (level - 1) * ops_per_level + (index - 1)


class BlockGraph:
    """Topology plus per-edge scaling factors and the active mask."""

    def __init__(self, levels, ops_per_level, op_kinds=None, lam_init=1.0,
                 dtype=np.float64, lam_requires_grad=True):
        if levels < 1 or ops_per_level < 1:
            raise ValueError("block needs at least one level and one op per level")
        self.levels = levels
        self.ops_per_level = ops_per_level
        if op_kinds is None:
            op_kinds = [level_op_kinds(ops_per_level) for _ in range(levels)]
        for row in op_kinds:
            if len(row) != ops_per_level or any(k not in BLOCK_OPERATIONS for k in row):
                raise ValueError("op_kinds must assign a block operation to every slot")
        self.op_kinds = op_kinds

        self.input_node = (0, 0)
        self.output_node = (levels + 1, 0)
        self.edges = []
        self.in_edges = {}    # op node -> incoming edge ids
        self.out_edge = {}    # op node -> id of its edge to the output
        self.op_successors = {n: [] for n in self.op_nodes()}  # op -> [(edge, dst_op)]
        for i in range(1, levels + 1):
            for j in range(1, ops_per_level + 1):
                dst = (i, j)
                ids = []
                for src in self._predecessors(dst):
                    ids.append(len(self.edges))
                    self.edges.append((src, dst))
                    if src != self.input_node:
                        self.op_successors[src].append((ids[-1], dst))
                self.in_edges[dst] = ids
        for node in self.op_nodes():
            self.out_edge[node] = len(self.edges)
            self.edges.append((node, self.output_node))
        self.edge_index = {e: i for i, e in enumerate(self.edges)}
        assert len(self.edges) == edge_count(levels, ops_per_level)

        self.lam = Tensor(np.full(len(self.edges), lam_init, dtype=dtype),
                          requires_grad=lam_requires_grad)
        self.active = np.ones(len(self.edges), dtype=bool)

    def _predecessors(self, dst):
        yield self.input_node
        for m in range(1, dst[0]):
            for n in range(1, self.ops_per_level + 1):
                yield (m, n)

    def op_nodes(self):
        for i in range(1, self.levels + 1):
            for j in range(1, self.ops_per_level + 1):
                yield (i, j)

    def kind_of(self, node):
        return self.op_kinds[node[0] - 1][node[1] - 1]

    def active_in_edges(self, node):
        return [e for e in self.in_edges[node] if self.active[e]]

    def alive_ops(self):
        return [n for n in self.op_nodes() if self.active_in_edges(n)]

    def contributing_ops(self):
        """Alive ops whose edge to the output is active, in (level, index) order."""
        return [n for n in self.alive_ops() if self.active[self.out_edge[n]]]

    def active_edge_total(self):
        return int(self.active.sum())


def pruned_mask(graph, lam=None):
    """Active mask after removing zero-factor edges and dead ops (fixpoint)."""
    values = graph.lam.data if lam is None else np.asarray(lam)
    active = graph.active & (values != 0.0)
    alive = set(graph.op_nodes())
    while True:
        reach = {u for u in alive if active[graph.out_edge[u]]}
        grown = True
        while grown:
            grown = False
            for u in alive - reach:
                for e, v in graph.op_successors[u]:
                    if active[e] and v in reach:
                        reach.add(u)
                        grown = True
                        break
        dead = {u for u in alive
                if u not in reach or not any(active[e] for e in graph.in_edges[u])}
        if not dead:
            return active
        for u in dead:
            for e in graph.in_edges[u]:
                active[e] = False
            for e, _ in graph.op_successors[u]:
                active[e] = False
            active[graph.out_edge[u]] = False
        alive -= dead


def prune(graph, lam=None):
    """Pruned copy of the graph; shares the factor tensor, new mask."""
    out = BlockGraph.__new__(BlockGraph)
    out.__dict__.update(graph.__dict__)
    out.active = pruned_mask(graph, lam)
    return out


@dataclass
class BlockDescriptor:
    # ops: [level, index, kind]; edges: [src_level, src_index, dst_level, dst_index, lam]
    ops: list = field(default_factory=list)
    edges: list = field(default_factory=list)

    @staticmethod
    def from_graph(graph):
        mask = pruned_mask(graph)
        ops = [[n[0], n[1], graph.kind_of(n).value]
               for n in graph.op_nodes()
               if any(mask[e] for e in graph.in_edges[n])]
        edges = [[s[0], s[1], d[0], d[1], float(graph.lam.data[i])]
                 for i, (s, d) in enumerate(graph.edges) if mask[i]]
        return BlockDescriptor(ops=ops, edges=edges)


@dataclass
class NetworkConfig:
    stages: int
    blocks_per_stage: int
    levels: int
    ops_per_level: int
    init_channels: int
    num_classes: int
    in_channels: int = 1
    image_size: int = 16
    width_multiplier: float = 1.0
    lambda_mode: str = "shared"

    def __post_init__(self):
        if self.lambda_mode not in ("shared", "full"):
            raise ValueError(f"lambda_mode must be shared or full, got {self.lambda_mode!r}")
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be > 0")

    def stage_widths(self):
        return [max(1, int(math.floor(self.width_multiplier * self.init_channels * 2 ** s + 0.5)))
                for s in range(self.stages)]

    def stage_sizes(self):
        return [-(-self.image_size // 2 ** s) for s in range(self.stages)]


@dataclass
class ArchitectureDescriptor:
    """Serialized pruned network: the search's output artifact."""

    stages: int
    blocks_per_stage: int
    levels: int
    ops_per_level: int
    stage_widths: list
    num_classes: int
    in_channels: int
    image_size: int
    lambda_mode: str
    blocks: list  # BlockDescriptor per block, stage-major
    provenance: dict = field(default_factory=dict)

    def to_json(self):
        doc = {
            "format": "sparsearch-descriptor-v1",
            "stages": self.stages,
            "blocks_per_stage": self.blocks_per_stage,
            "levels": self.levels,
            "ops_per_level": self.ops_per_level,
            "stage_widths": list(self.stage_widths),
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "image_size": self.image_size,
            "lambda_mode": self.lambda_mode,
            "blocks": [{"ops": b.ops, "edges": b.edges} for b in self.blocks],
            "provenance": self.provenance,
        }
        return json.dumps(doc, sort_keys=True, indent=2)


def serialize(descriptor):
    return descriptor.to_json().encode("utf-8")


def deserialize(payload):
    if isinstance(payload, bytes):
        payload = payload.decode("utf-8")
    try:
        doc = json.loads(payload)
    except json.JSONDecodeError as exc:
        raise ValueError(f"descriptor parse error at position {exc.pos}: {exc.msg}") from exc
    if not isinstance(doc, dict) or doc.get("format") != "sparsearch-descriptor-v1":
        raise ValueError("not a sparsearch descriptor (missing format tag)")
    required = ["stages", "blocks_per_stage", "levels", "ops_per_level", "stage_widths",
                "num_classes", "in_channels", "image_size", "lambda_mode", "blocks",
                "provenance"]
    missing = [k for k in required if k not in doc]
    if missing:
        raise ValueError(f"descriptor missing fields: {missing}")
    desc = ArchitectureDescriptor(
        stages=doc["stages"], blocks_per_stage=doc["blocks_per_stage"],
        levels=doc["levels"], ops_per_level=doc["ops_per_level"],
        stage_widths=list(doc["stage_widths"]), num_classes=doc["num_classes"],
        in_channels=doc["in_channels"], image_size=doc["image_size"],
        lambda_mode=doc["lambda_mode"],
        blocks=[BlockDescriptor(ops=[list(o) for o in b["ops"]],
                                edges=[list(e) for e in b["edges"]])
                for b in doc["blocks"]],
        provenance=dict(doc["provenance"]),
    )
    validate_descriptor(desc)
    return desc


def validate_descriptor(desc):
    """Check the descriptor describes a valid sub-graph of the complete block."""
    if desc.stages < 1 or desc.blocks_per_stage < 1:
        raise ValueError("descriptor needs at least one stage and block")
    if len(desc.blocks) != desc.stages * desc.blocks_per_stage:
        raise ValueError(
            f"descriptor has {len(desc.blocks)} blocks, expected "
            f"{desc.stages * desc.blocks_per_stage}")
    if len(desc.stage_widths) != desc.stages:
        raise ValueError("stage_widths length must equal stages")
    m, n = desc.levels, desc.ops_per_level
    kinds = {k.value for k in BLOCK_OPERATIONS}
    for bi, block in enumerate(desc.blocks):
        ops = set()
        for level, index, kind in block.ops:
            if not (1 <= level <= m and 1 <= index <= n):
                raise ValueError(f"block {bi}: op ({level},{index}) out of range")
            if kind not in kinds:
                raise ValueError(f"block {bi}: {kind!r} is not a block operation")
            ops.add((level, index))
        in_deg = {op: 0 for op in ops}
        succ = {op: [] for op in ops}
        to_output = set()
        for sl, si, dl, di, lam in block.edges:
            src, dst = (sl, si), (dl, di)
            if src != (0, 0) and src not in ops:
                raise ValueError(f"block {bi}: edge from unknown op {src}")
            if dst == (m + 1, 0):
                if src == (0, 0) or src not in ops:
                    raise ValueError(f"block {bi}: output edge from invalid node {src}")
                to_output.add(src)
                continue
            if dst not in ops:
                raise ValueError(f"block {bi}: edge into unknown op {dst}")
            if src != (0, 0) and sl >= dl:
                raise ValueError(f"block {bi}: edge {src}->{dst} is not level-increasing")
            if lam == 0.0:
                raise ValueError(f"block {bi}: surviving edge {src}->{dst} has zero factor")
            in_deg[dst] += 1
            if src != (0, 0):
                succ[src].append(dst)
        for op, deg in in_deg.items():
            if deg == 0:
                raise ValueError(f"block {bi}: op {op} has no active input edge")
        reach = set(to_output)
        # walk backwards: an op reaches output if a successor does
        changed = True
        while changed:
            changed = False
            for src, dsts in succ.items():
                if src not in reach and any(d in reach for d in dsts):
                    reach.add(src)
                    changed = True
        dangling = ops - reach
        if dangling:
            raise ValueError(f"block {bi}: ops {sorted(dangling)} have no path to output")


def descriptor_from_network(config, graphs, provenance=None):
    """Descriptor for the pruned state of per-block graphs (stage-major order)."""
    return ArchitectureDescriptor(
        stages=config.stages, blocks_per_stage=config.blocks_per_stage,
        levels=config.levels, ops_per_level=config.ops_per_level,
        stage_widths=config.stage_widths(), num_classes=config.num_classes,
        in_channels=config.in_channels, image_size=config.image_size,
        lambda_mode=config.lambda_mode,
        blocks=[BlockDescriptor.from_graph(g) for g in graphs],
        provenance=provenance or {},
    )


def config_hash(doc):
    """Stable hash of a JSON-serializable config document."""
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def export_dot(desc):
    """One DOT digraph per block; edge labels carry the factor at prune time."""
    graphs = {}
    for bi, block in enumerate(desc.blocks):
        stage, pos = divmod(bi, desc.blocks_per_stage)
        lines = [f"digraph block_s{stage}_b{pos} {{", "  rankdir=LR;"]
        lines.append('  n0_0 [label="input" shape=box];')
        out_name = f"n{desc.levels + 1}_0"
        lines.append(f'  {out_name} [label="output" shape=box];')
        for level, index, kind in block.ops:
            lines.append(f'  n{level}_{index} [label="{kind}\\n({level},{index})"];')
        for sl, si, dl, di, lam in block.edges:
            lines.append(f'  n{sl}_{si} -> n{dl}_{di} [label="{lam:.4g}"];')
        lines.append("}")
        graphs[f"block_s{stage}_b{pos}"] = "\n".join(lines) + "\n"
    return graphs
