"""Three-stage procedure: pretrain the full network, jointly search weights
and edge factors on split data with periodic hard pruning, then retrain the
discovered architecture from scratch.

Stage isolation contracts enforced here: factors stay bit-identical during
pretraining, BN scales stay frozen through stages 1-2, hard-pruned edges
never reactivate (their weights are deleted), and the test set is read only
by the final evaluation (Dataset.take keeps the audit counter).
"""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from . import budget
from .data import augment_batch
from .graph import (ArchitectureDescriptor, BlockDescriptor, BlockGraph,
                    descriptor_from_network, pruned_mask)
from .network import Network, build_from_descriptor
from .ops import softmax_cross_entropy
from .optim import ApgNag, DivergenceError, Nag, schedule_lr
from .tensor import Tape

log = logging.getLogger("sparsearch")

MOMENTUM = 0.9

# rng stream codes, so every stage reseeds identically across process boundaries
RNG_DATA, RNG_SPLIT, RNG_INIT, RNG_PRETRAIN, RNG_SEARCH, RNG_RETRAIN_INIT, \
    RNG_RETRAIN, RNG_RANDOM_ARCH = range(8)


def rng_for(seed, stream):
    return np.random.default_rng([seed, stream])


@dataclass
class SearchSchedule:
    pretrain_epochs: int = 5
    search_epochs: int = 30
    retrain_epochs: int = 30
    prune_interval_epochs: int = 5
    w_updates: int = 1
    lambda_updates: int = 1
    batch_size: int = 32
    lr: float = 0.1
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.w_updates < 1 or self.lambda_updates < 1:
            raise ValueError("w_updates and lambda_updates must be >= 1")
        if self.prune_interval_epochs < 1:
            raise ValueError("prune_interval_epochs must be >= 1")
        if self.lr_schedule not in ("constant", "linear-decay"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")


@dataclass
class DataSplit:
    weight_indices: np.ndarray
    structure_indices: np.ndarray
    ratio: float

    def __eq__(self, other):
        return (isinstance(other, DataSplit)
                and np.array_equal(self.weight_indices, other.weight_indices)
                and np.array_equal(self.structure_indices, other.structure_indices)
                and self.ratio == other.ratio)


def split_dataset(dataset, ratio, seed):
    """Stratified-by-class disjoint split; deterministic per seed."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("split ratio must lie in (0, 1)")
    if len(dataset) == 0:
        raise ValueError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    weights, structures = [], []
    for k in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == k)
        if idx.size < 2:
            raise ValueError(
                f"class {k} has {idx.size} samples; need at least one per side")
        perm = rng.permutation(idx)
        n_w = min(max(int(round(ratio * idx.size)), 1), idx.size - 1)
        weights.append(perm[:n_w])
        structures.append(perm[n_w:])
    return DataSplit(np.sort(np.concatenate(weights)),
                     np.sort(np.concatenate(structures)), ratio)


class BatchStream:
    """Infinite shuffled minibatch source over a subset of a dataset."""

    def __init__(self, dataset, indices, batch_size, rng, augment=False):
        self.dataset = dataset
        self.indices = np.asarray(indices)
        if self.indices.size == 0:
            raise ValueError("batch stream over an empty index set")
        self.batch_size = batch_size
        self.rng = rng
        self.augment = augment
        self._order = None
        self._pos = 0

    @property
    def batches_per_pass(self):
        return -(-self.indices.size // self.batch_size)

    def next_batch(self):
        if self._order is None or self._pos >= self._order.size:
            self._order = self.rng.permutation(self.indices)
            self._pos = 0
        batch = self._order[self._pos : self._pos + self.batch_size]
        self._pos += batch.size
        images, labels = self.dataset.take(batch)
        if self.augment:
            images = augment_batch(self.rng, images)
        return images, labels


class MetricsWriter:
    """Per-epoch CSV: loss/accuracy, surviving edges, per-block FLOPs, gamma range."""

    COLUMNS = ["epoch", "stage", "loss", "accuracy", "active_edges",
               "block_flops", "gamma_min", "gamma_mean", "gamma_max"]

    def __init__(self, path=None):
        self.path = path
        self.rows = []

    def log(self, epoch, stage, loss, accuracy, active_edges, block_flops, gammas):
        gam = np.concatenate([np.atleast_1d(g) for g in gammas]) if gammas else np.zeros(1)
        self.rows.append([epoch, stage, f"{loss:.6f}", f"{accuracy:.4f}",
                          active_edges, json.dumps([int(f) for f in block_flops]),
                          f"{gam.min():.3e}", f"{gam.mean():.3e}", f"{gam.max():.3e}"])
        self.flush()

    def flush(self):
        if self.path is None:
            return
        import csv
        import io
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(self.COLUMNS)
        writer.writerows(self.rows)
        atomic_write_text(self.path, buf.getvalue())


def atomic_write_text(path, text):
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, payload):
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _clear_grads(net):
    for _, tensor, _ in net.named_parameters():
        tensor.grad = None
    for _, graph in net.lambda_tables():
        graph.lam.grad = None


@contextmanager
def _grads_disabled(tensors):
    """Skip gradient computation for these leaves inside the context."""
    saved = [(t, t.requires_grad) for t in tensors]
    for t, _ in saved:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in saved:
            t.requires_grad = flag


def train_step(net, images, labels):
    """One forward/backward; returns (loss, batch accuracy) with grads populated."""
    _clear_grads(net)
    with Tape() as tape:
        logits = net.forward(images, training=True)
        loss = softmax_cross_entropy(logits, labels)
    if not np.isfinite(loss.data):
        raise DivergenceError("non-finite training loss")
    tape.backward(loss)
    acc = float((logits.data.argmax(axis=1) == labels).mean())
    return loss.item(), acc


def evaluate(net, dataset, batch_size=64):
    """Eval-mode accuracy over a dataset (reads are audited via take)."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        images, labels = dataset.take(idx)
        logits = net.forward(images, training=False)
        correct += int((logits.data.argmax(axis=1) == labels).sum())
    return correct / len(dataset)


def network_active_edges(net):
    """Surviving edges over distinct factor tables (shared table counts once)."""
    return sum(int(g.active.sum()) for _, g in net.lambda_tables())


def hard_prune(net, apg=None):
    """Delete zero-factor edges, dead ops, and their weights, permanently."""
    for name, graph in net.lambda_tables():
        mask = pruned_mask(graph)
        graph.active[:] = mask
        graph.lam.data[~mask] = 0.0
        if apg is not None:
            apg.clear_pruned(name, graph.lam, mask)
    for block in net.blocks():
        block.drop_dead_params()


def pretrain(net, dataset, split, schedule, delta, seed=0, metrics=None, rng=None,
             augment=False):
    """Stage 1: NAG on the weight set only; factors and BN scales untouched."""
    net.bn_scales_frozen = True
    nag = Nag(schedule.lr, MOMENTUM, delta)
    stream = BatchStream(dataset, split.weight_indices, schedule.batch_size,
                         rng if rng is not None else rng_for(seed, RNG_PRETRAIN),
                         augment=augment)
    lam_before = [g.lam.data.copy() for _, g in net.lambda_tables()]
    lam_leaves = [g.lam for _, g in net.lambda_tables()]
    for epoch in range(schedule.pretrain_epochs):
        nag.lr = schedule_lr(schedule.lr_schedule, schedule.lr, epoch,
                             schedule.pretrain_epochs)
        losses, accs = [], []
        with _grads_disabled(lam_leaves):
            for _ in range(stream.batches_per_pass):
                images, labels = stream.next_batch()
                loss, acc = train_step(net, images, labels)
                nag.step(net.trainable_parameters())
                losses.append(loss)
                accs.append(acc)
        if metrics is not None:
            metrics.log(epoch, "pretrain", float(np.mean(losses)), float(np.mean(accs)),
                        network_active_edges(net), budget.per_block_flops(net), [])
    for before, (_, g) in zip(lam_before, net.lambda_tables()):
        assert np.array_equal(before, g.lam.data), "factors drifted during pretrain"
    return nag


@dataclass
class SearchResult:
    epochs_run: int
    stop_reason: str
    active_edges: int
    history: list = field(default_factory=list)


def search(net, dataset, split, schedule, cfg, seed=0, metrics=None, apg=None,
           nag=None, rng=None):
    """Stage 2: interleaved weight (NAG) and factor (APG-NAG) optimization."""
    rng = rng if rng is not None else rng_for(seed, RNG_SEARCH)
    w_stream = BatchStream(dataset, split.weight_indices, schedule.batch_size, rng,
                           augment=cfg.augment)
    s_stream = BatchStream(dataset, split.structure_indices, schedule.batch_size, rng)
    return search_loop(net, w_stream, s_stream, schedule, cfg, metrics=metrics,
                       apg=apg, nag=nag)


def search_loop(net, w_stream, s_stream, schedule, cfg, metrics=None, apg=None, nag=None):
    net.bn_scales_frozen = True
    nag = nag if nag is not None else Nag(schedule.lr, MOMENTUM, cfg.delta)
    apg = apg if apg is not None else ApgNag(schedule.lr, MOMENTUM)
    tables = net.lambda_tables()
    prev_masks = None
    stable_checks = 0
    stop_reason = "epoch_cap"
    epochs_run = 0
    history = []

    for epoch in range(schedule.search_epochs):
        # search runs at a constant rate for both weights and factors; the
        # lr_schedule knob only shapes pretraining and retraining
        nag.lr = schedule.lr
        apg.lr = schedule.lr
        gammas = budget.edge_gammas(net, cfg.budget_policy, cfg.gamma)
        cycles = -(-w_stream.batches_per_pass // schedule.w_updates)
        losses, accs = [], []
        lam_leaves = [graph.lam for _, graph in tables]
        weight_leaves = [t for _, t, _ in net.named_parameters()]
        for _ in range(cycles):
            with _grads_disabled(lam_leaves):
                for _ in range(schedule.w_updates):
                    images, labels = w_stream.next_batch()
                    loss, acc = train_step(net, images, labels)
                    nag.step(net.trainable_parameters())
                    losses.append(loss)
                    accs.append(acc)
            with _grads_disabled(weight_leaves):
                for _ in range(schedule.lambda_updates):
                    images, labels = s_stream.next_batch()
                    train_step(net, images, labels)
                    for name, graph in tables:
                        apg.step(name, graph.lam, gammas[name])
        epochs_run = epoch + 1
        history.append({"epoch": epoch,
                        "loss": float(np.mean(losses)),
                        "accuracy": float(np.mean(accs)),
                        "active_edges": network_active_edges(net)})
        if metrics is not None:
            metrics.log(epoch, "search", history[-1]["loss"], history[-1]["accuracy"],
                        history[-1]["active_edges"], budget.per_block_flops(net),
                        list(gammas.values()))
        if (epoch + 1) % schedule.prune_interval_epochs == 0:
            hard_prune(net, apg)
            masks = tuple(g.active.tobytes() for _, g in tables)
            stable_checks = stable_checks + 1 if masks == prev_masks else 1
            prev_masks = masks
            if all(len(g.contributing_ops()) == 0 for _, g in tables):
                log.warning("every block pruned to identity; stopping search early")
                stop_reason = "degenerate"
                break
            if stable_checks >= 3:
                stop_reason = "stable"
                break

    hard_prune(net, apg)
    return SearchResult(epochs_run=epochs_run, stop_reason=stop_reason,
                        active_edges=network_active_edges(net), history=history)


class InfeasibleBudgetError(ValueError):
    """Raised when no width multiplier can meet the FLOPs target."""


def finalize(desc, target_flops):
    """Fit the widest multiplier in (0, 8] whose rounded widths stay in budget."""
    if target_flops is None or target_flops <= 0:
        raise ValueError("target_flops must be positive")
    base = list(desc.stage_widths)

    def widths_at(w):
        return [max(1, int(math.floor(w * c + 0.5))) for c in base]

    def flops_at(w):
        return budget.descriptor_flops(desc, widths_at(w))

    floor_flops = budget.descriptor_flops(desc, [1] * desc.stages)
    if floor_flops > target_flops:
        raise InfeasibleBudgetError(
            f"budget {target_flops} below minimum achievable {floor_flops}")
    if flops_at(1.0) == target_flops:
        multiplier = 1.0
    elif flops_at(8.0) <= target_flops:
        multiplier = 8.0
    else:
        lo = 1.0 if flops_at(1.0) <= target_flops else 1e-9
        hi = 8.0
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if flops_at(mid) <= target_flops:
                lo = mid
            else:
                hi = mid
        multiplier = lo
    out = replace(desc, stage_widths=widths_at(multiplier),
                  provenance={**desc.provenance, "width_multiplier": multiplier,
                              "target_flops": target_flops})
    return out


def random_block_graph(levels, ops_per_level, edge_target, rng, attempts=100,
                       dtype=np.float64):
    """Uniform random valid sub-block with at most edge_target active edges.

    Retries a few samples and keeps the one closest to the target from below.
    """
    graph = BlockGraph(levels, ops_per_level, dtype=dtype, lam_requires_grad=False)
    total = len(graph.edges)
    if edge_target > total:
        raise ValueError(f"edge_target {edge_target} exceeds {total} edges")
    if edge_target == 0:
        graph.active[:] = False
        return graph
    best = None
    for _ in range(attempts):
        chosen = rng.choice(total, size=edge_target, replace=False)
        mask = np.zeros(total, dtype=bool)
        mask[chosen] = True
        graph.active[:] = mask
        fixed = pruned_mask(graph)
        count = int(fixed.sum())
        if best is None or count > int(best.sum()):
            best = fixed
        if count == edge_target:
            break
    graph.active[:] = best
    return graph


def random_architecture(levels, ops_per_level, edge_target, seed):
    """Random valid single-block layout with at most edge_target edges."""
    graph = random_block_graph(levels, ops_per_level, edge_target,
                               np.random.default_rng(seed))
    return BlockDescriptor.from_graph(graph)


def random_descriptor(config, edge_targets, seed):
    """Random network matching the macro config, with per-block edge budgets."""
    rng = rng_for(seed, RNG_RANDOM_ARCH)
    n_blocks = config.stages * config.blocks_per_stage
    if isinstance(edge_targets, int):
        edge_targets = [edge_targets] * n_blocks
    if config.lambda_mode == "shared":
        graph = random_block_graph(config.levels, config.ops_per_level,
                                   edge_targets[0], rng)
        blocks = [BlockDescriptor.from_graph(graph) for _ in range(n_blocks)]
    else:
        blocks = [BlockDescriptor.from_graph(
                      random_block_graph(config.levels, config.ops_per_level, t, rng))
                  for t in edge_targets]
    return ArchitectureDescriptor(
        stages=config.stages, blocks_per_stage=config.blocks_per_stage,
        levels=config.levels, ops_per_level=config.ops_per_level,
        stage_widths=config.stage_widths(), num_classes=config.num_classes,
        in_channels=config.in_channels, image_size=config.image_size,
        lambda_mode=config.lambda_mode, blocks=blocks,
        provenance={"seed": seed, "source": "random"},
    )


def retrain(desc, train_dataset, test_dataset, schedule, delta, seed,
            metrics=None, augment=False):
    """Stage 3: fresh weights, learnable BN scales, plain-sum edges; returns
    (network, test accuracy)."""
    net = build_from_descriptor(desc, rng_for(seed, RNG_RETRAIN_INIT))
    net.bn_scales_frozen = False
    nag = Nag(schedule.lr, MOMENTUM, delta)
    stream = BatchStream(train_dataset, np.arange(len(train_dataset)),
                         schedule.batch_size, rng_for(seed, RNG_RETRAIN),
                         augment=augment)
    for epoch in range(schedule.retrain_epochs):
        nag.lr = schedule_lr(schedule.lr_schedule, schedule.lr, epoch,
                             schedule.retrain_epochs)
        losses, accs = [], []
        for _ in range(stream.batches_per_pass):
            images, labels = stream.next_batch()
            loss, acc = train_step(net, images, labels)
            nag.step(net.trainable_parameters())
            losses.append(loss)
            accs.append(acc)
        if metrics is not None:
            metrics.log(epoch, "retrain", float(np.mean(losses)), float(np.mean(accs)),
                        0, [], [])
    accuracy = evaluate(net, test_dataset, schedule.batch_size)
    return net, accuracy
