import json

import numpy as np
import pytest

from oracles import enumerate_block_edges
from sparsearch import functional as F
from sparsearch.graph import (ArchitectureDescriptor, BlockDescriptor, BlockGraph,
                              NetworkConfig, deserialize, edge_count, export_dot, prune,
                              pruned_mask, serialize, validate_descriptor)
from sparsearch.network import (Network, block_forward, build_from_descriptor,
                                forward_equivalence_check)
from sparsearch.ops import OperationKind
from sparsearch.pipeline import random_descriptor
from sparsearch.tensor import Tape, Tensor


def test_edge_count_smallest_block():
    assert edge_count(1, 1) == 2


def test_edge_count_examples():
    assert edge_count(4, 4) == 128
    assert edge_count(2, 2) == 12


@pytest.mark.parametrize("m", range(1, 6))
@pytest.mark.parametrize("n", range(1, 6))
def test_edge_count_matches_enumeration(m, n):
    assert edge_count(m, n) == len(enumerate_block_edges(m, n))
    g = BlockGraph(m, n)
    assert sorted(g.edges) == sorted(enumerate_block_edges(m, n))


def test_build_block_initial_state():
    g = BlockGraph(2, 3)
    assert np.all(g.active)
    assert np.all(g.lam.data == 1.0)
    incoming = [len(g.in_edges[(2, j)]) for j in range(1, 4)]
    assert incoming == [4, 4, 4]  # (m-1)*N + 1 at level 2


def test_node_forward_all_zero_lambda_pool_gives_zeros():
    g = BlockGraph(1, 1, op_kinds=[[OperationKind.AVG_POOL_3X3]])
    g.lam.data[:] = 0.0
    x = Tensor(np.random.default_rng(0).normal(size=(1, 2, 4, 4)))
    summed = F.edge_weighted_sum([x], g.lam, [g.in_edges[(1, 1)][0]])
    node_out = F.avg_pool3x3(summed)
    assert np.array_equal(node_out.data, np.zeros_like(x.data))


def test_block_identity_when_no_contributing_ops():
    from sparsearch.network import ConvBlock
    g = BlockGraph(2, 2)
    for n in g.op_nodes():
        g.lam.data[g.out_edge[n]] = 0.0
    pruned = prune(g)
    block = ConvBlock(np.random.default_rng(0), pruned, 3)
    prev = Tensor(np.random.default_rng(1).normal(size=(2, 3, 6, 6)))
    out = block_forward(block, prev, training=True)
    assert out.data is prev.data


def test_single_edge_unit_factor_applies_op_unscaled():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(2, 3, 5, 5)))
    g = BlockGraph(1, 1, op_kinds=[[OperationKind.MAX_POOL_3X3]])
    eid = g.in_edges[(1, 1)][0]
    summed = F.edge_weighted_sum([x], g.lam, [eid])
    assert np.array_equal(summed.data, x.data)


def test_pruned_subgraph_sum_semantics():
    # a node fed only by nodes 2 and 4 sees exactly h2 + h4 at unit factors
    rng = np.random.default_rng(2)
    g = BlockGraph(2, 2)
    h2 = Tensor(rng.normal(size=(1, 2, 4, 4)))
    h4 = Tensor(rng.normal(size=(1, 2, 4, 4)))
    dst = (2, 1)
    keep = {((1, 2), dst), ((1, 1), dst)}
    ids = [g.edge_index[e] for e in keep]
    out = F.edge_weighted_sum([h2, h4], g.lam, ids)
    assert np.max(np.abs(out.data - (h2.data + h4.data))) < 1e-15


def test_prune_noop_when_all_nonzero():
    g = BlockGraph(2, 2)
    g.lam.data[:] = 0.7
    assert np.all(pruned_mask(g))


def test_prune_cascades_no_input_ops():
    g = BlockGraph(2, 2)
    # starve op (1,1): zero its single incoming edge
    g.lam.data[g.in_edges[(1, 1)][0]] = 0.0
    mask = pruned_mask(g)
    assert not mask[g.in_edges[(1, 1)][0]]
    assert not mask[g.out_edge[(1, 1)]]
    for e, v in g.op_successors[(1, 1)]:
        assert not mask[e]
    # other ops keep their paths
    assert mask[g.out_edge[(1, 2)]]


def test_prune_removes_ops_without_path_to_output():
    g = BlockGraph(2, 1)
    # cut (1,1)'s output edge and its edge to (2,1): no path remains
    g.lam.data[g.out_edge[(1, 1)]] = 0.0
    g.lam.data[g.edge_index[((1, 1), (2, 1))]] = 0.0
    mask = pruned_mask(g)
    assert not any(mask[e] for e in g.in_edges[(1, 1)])
    # (2,1) still fed by block input
    assert mask[g.edge_index[((0, 0), (2, 1))]]


def test_prune_idempotent():
    rng = np.random.default_rng(3)
    for trial in range(20):
        g = BlockGraph(3, 3)
        lam = rng.normal(size=len(g.edges))
        lam[rng.random(len(g.edges)) < 0.5] = 0.0
        g.lam.data[:] = lam
        once = pruned_mask(g)
        g2 = prune(g)
        twice = pruned_mask(g2)
        assert np.array_equal(once, twice)


def test_prune_keeps_connected_ops():
    rng = np.random.default_rng(4)
    for trial in range(20):
        g = BlockGraph(3, 2)
        lam = rng.normal(size=len(g.edges))
        lam[rng.random(len(g.edges)) < 0.4] = 0.0
        g.lam.data[:] = lam
        mask = pruned_mask(g)
        # every surviving op has input and a path to output
        alive = [n for n in g.op_nodes() if any(mask[e] for e in g.in_edges[n])]
        for n in alive:
            assert any(mask[e] for e in g.in_edges[n])
            # BFS forward to the output
            seen, stack = set(), [n]
            reached = False
            while stack:
                u = stack.pop()
                if mask[g.out_edge[u]]:
                    reached = True
                    break
                for e, v in g.op_successors[u]:
                    if mask[e] and v not in seen:
                        seen.add(v)
                        stack.append(v)
            assert reached


def _toy_net(lambda_mode="full", seed=0):
    cfg = NetworkConfig(stages=1, blocks_per_stage=1, levels=4, ops_per_level=4,
                        init_channels=4, num_classes=3, in_channels=1, image_size=8,
                        lambda_mode=lambda_mode)
    return cfg, Network(cfg, np.random.default_rng(seed))


def test_forward_equivalence_no_zeros_is_bit_exact():
    cfg, net = _toy_net()
    x = np.random.default_rng(1).normal(size=(2, 1, 8, 8))
    assert forward_equivalence_check(net, x) == 0.0


@pytest.mark.parametrize("training", [False, True])
def test_forward_equivalence_random_half_zeros(training):
    rng = np.random.default_rng(5)
    for trial in range(5):
        cfg, net = _toy_net(seed=trial)
        for g in net.graphs():
            lam = rng.normal(size=len(g.edges))
            lam[rng.random(len(g.edges)) < 0.5] = 0.0
            g.lam.data[:] = lam
        x = rng.normal(size=(2, 1, 8, 8))
        assert forward_equivalence_check(net, x, training=training) < 1e-10


def test_forward_equivalence_all_output_edges_zero():
    cfg, net = _toy_net()
    for g in net.graphs():
        for n in g.op_nodes():
            g.lam.data[g.out_edge[n]] = 0.0
    x = np.random.default_rng(2).normal(size=(2, 1, 8, 8))
    assert forward_equivalence_check(net, x) == 0.0


def test_eval_forward_deterministic():
    cfg, net = _toy_net()
    x = np.random.default_rng(3).normal(size=(3, 1, 8, 8))
    a = net.forward(x, training=False).data
    b = net.forward(x, training=False).data
    assert np.array_equal(a, b)


def test_eval_forward_batch_composition_independent():
    cfg, net = _toy_net()
    rng = np.random.default_rng(4)
    a = rng.normal(size=(2, 1, 8, 8))
    b = rng.normal(size=(3, 1, 8, 8))
    oa = net.forward(a, training=False).data
    ob = net.forward(b, training=False).data
    oab = net.forward(np.concatenate([a, b]), training=False).data
    assert np.max(np.abs(oab - np.concatenate([oa, ob]))) < 1e-10


def test_shared_lambda_grad_equals_sum_of_per_block_grads():
    cfg = NetworkConfig(stages=1, blocks_per_stage=2, levels=2, ops_per_level=2,
                        init_channels=3, num_classes=2, in_channels=1, image_size=8,
                        lambda_mode="shared")
    net = Network(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 1, 8, 8))
    y = np.array([0, 1])
    shared = net.stages[0][0].graph

    def loss_with_lam(values):
        shared.lam.data[:] = values
        with Tape() as tape:
            out = net.forward(x, training=False)
            loss = F.softmax_cross_entropy(out, y)
        return loss.item(), tape

    base = shared.lam.data.copy()
    _, tape = loss_with_lam(base)
    shared.lam.grad = None
    with Tape() as tape:
        out = net.forward(x, training=False)
        loss = F.softmax_cross_entropy(out, y)
    tape.backward(loss)
    analytic = shared.lam.grad.copy()

    eps = 1e-6
    for e in range(0, len(base), 7):
        up = base.copy()
        up[e] += eps
        lo = base.copy()
        lo[e] -= eps
        f_up, _ = loss_with_lam(up)
        f_lo, _ = loss_with_lam(lo)
        numeric = (f_up - f_lo) / (2 * eps)
        assert abs(numeric - analytic[e]) < 1e-5 * max(1.0, abs(analytic[e]))
    shared.lam.data[:] = base


def test_flops_monotone_under_pruning():
    from sparsearch.budget import flops_of_block, flops_of_full_block
    rng = np.random.default_rng(6)
    g = BlockGraph(3, 3)
    full = flops_of_full_block(g, 4, 8)
    lam = rng.normal(size=len(g.edges))
    lam[rng.random(len(g.edges)) < 0.5] = 0.0
    g.lam.data[:] = lam
    pruned = flops_of_block(g, 4, 8, mask=pruned_mask(g))
    assert pruned <= full
    g.lam.data[:] = 1.0
    assert flops_of_block(g, 4, 8, mask=pruned_mask(g)) == full


def test_descriptor_roundtrip_random_instances():
    cfg = NetworkConfig(stages=2, blocks_per_stage=2, levels=2, ops_per_level=4,
                        init_channels=4, num_classes=3, in_channels=1, image_size=16,
                        lambda_mode="full")
    rng = np.random.default_rng(7)
    for trial in range(100):
        desc = random_descriptor(cfg, int(rng.integers(0, 33)), trial)
        back = deserialize(serialize(desc))
        assert back == desc


def test_descriptor_truncated_payload_errors():
    cfg = NetworkConfig(stages=1, blocks_per_stage=1, levels=2, ops_per_level=2,
                        init_channels=4, num_classes=2, in_channels=1, image_size=8)
    desc = random_descriptor(cfg, 6, 0)
    payload = serialize(desc)
    with pytest.raises(ValueError, match="parse error"):
        deserialize(payload[: len(payload) // 2])


def test_descriptor_validation_rejects_dangling_op():
    cfg = NetworkConfig(stages=1, blocks_per_stage=1, levels=2, ops_per_level=2,
                        init_channels=4, num_classes=2, in_channels=1, image_size=8)
    desc = random_descriptor(cfg, 0, 1)  # identity block
    doc = json.loads(serialize(desc))
    doc["blocks"][0]["ops"].append([1, 2, "sep_conv_3x3"])  # op with no edges at all
    with pytest.raises(ValueError, match="no active input"):
        deserialize(json.dumps(doc))

    doc2 = json.loads(serialize(desc))
    # op fed by the input but with no route to the block output
    doc2["blocks"][0]["ops"].append([1, 1, "sep_conv_3x3"])
    doc2["blocks"][0]["edges"].append([0, 0, 1, 1, 1.0])
    with pytest.raises(ValueError, match="no path to output"):
        deserialize(json.dumps(doc2))


def test_descriptor_validation_rejects_zero_factor_edge():
    cfg = NetworkConfig(stages=1, blocks_per_stage=1, levels=1, ops_per_level=1,
                        init_channels=4, num_classes=2, in_channels=1, image_size=8)
    desc = random_descriptor(cfg, 2, 0)
    doc = json.loads(serialize(desc))
    doc["blocks"][0]["edges"][0][4] = 0.0
    with pytest.raises(ValueError, match="zero factor"):
        deserialize(json.dumps(doc))


def test_export_dot_structure():
    cfg = NetworkConfig(stages=1, blocks_per_stage=2, levels=2, ops_per_level=2,
                        init_channels=4, num_classes=2, in_channels=1, image_size=8,
                        lambda_mode="full")
    desc = random_descriptor(cfg, 8, 3)
    graphs = export_dot(desc)
    assert set(graphs) == {"block_s0_b0", "block_s0_b1"}
    for text in graphs.values():
        assert text.startswith("digraph")
        assert text.rstrip().endswith("}")
        # every edge line references declared nodes
        lines = text.splitlines()
        declared = {ln.strip().split(" ")[0] for ln in lines if "[label=" in ln and "->" not in ln}
        for ln in lines:
            if "->" in ln:
                src, rest = ln.strip().split(" -> ")
                dst = rest.split(" ")[0]
                assert src in declared and dst in declared


def test_retrain_network_matches_descriptor_topology():
    cfg = NetworkConfig(stages=2, blocks_per_stage=1, levels=2, ops_per_level=4,
                        init_channels=4, num_classes=3, in_channels=1, image_size=16,
                        lambda_mode="full")
    desc = random_descriptor(cfg, 20, 9)
    net = build_from_descriptor(desc, np.random.default_rng(0))
    for block, bdesc in zip(net.blocks(), desc.blocks):
        alive = {tuple(op[:2]) for op in bdesc.ops}
        assert set(block.node_params) == alive
        assert not block.graph.lam.requires_grad
    x = np.random.default_rng(1).normal(size=(2, 1, 16, 16))
    assert net.forward(x, training=True).shape == (2, 3)


def test_identity_descriptor_network_is_stem_reductions_head():
    from sparsearch import ops as O
    cfg = NetworkConfig(stages=2, blocks_per_stage=2, levels=2, ops_per_level=4,
                        init_channels=4, num_classes=3, in_channels=1, image_size=16)
    desc = random_descriptor(cfg, 0, 0)
    net = build_from_descriptor(desc, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(2, 1, 16, 16))
    got = net.forward(x, training=False).data
    y = O.conv_bn_relu(Tensor(x), net.stem, False)
    y = O.reduction_block(y, net.reductions[0], False)
    want = O.classifier_head(y, net.head).data
    assert np.array_equal(got, want)
