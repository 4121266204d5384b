"""Experiment orchestration: data preparation, staged runs, run-all."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from . import budget, pipeline
from .checkpoint import (load_checkpoint, restore_network, restore_optimizer,
                         rng_state_doc, save_checkpoint)
from .config import CifarSpec, IdxSpec, SyntheticSpec, config_to_doc, dump_config
from .data import (Dataset, compute_norm_stats, load_cifar_binary, load_idx,
                   normalize, synth_dataset)
from .graph import (config_hash, descriptor_from_network, deserialize, export_dot,
                    serialize)
from .network import Network, build_from_descriptor
from .optim import ApgNag, Nag
from .pipeline import (DataSplit, MetricsWriter, atomic_write_bytes,
                       atomic_write_text, rng_for, split_dataset)

log = logging.getLogger("sparsearch")


@dataclass
class RunPaths:
    out_dir: str

    def __post_init__(self):
        self.config = os.path.join(self.out_dir, "config.json")
        self.pretrain_ckpt = os.path.join(self.out_dir, "pretrain.npz")
        self.search_ckpt = os.path.join(self.out_dir, "search.npz")
        self.retrain_ckpt = os.path.join(self.out_dir, "retrain.npz")
        self.descriptor = os.path.join(self.out_dir, "descriptor.json")
        self.metrics = os.path.join(self.out_dir, "metrics.csv")
        self.result = os.path.join(self.out_dir, "result.json")
        self.dot_dir = os.path.join(self.out_dir, "dot")


def net_dtype(cfg):
    return np.float32 if cfg.precision == "f32" else np.float64


def prepare_raw_data(cfg):
    """Load or generate the train/test datasets, unnormalized."""
    ds = cfg.dataset
    if isinstance(ds, SyntheticSpec):
        per_class = ds.train_per_class + ds.test_per_class
        full = synth_dataset(ds.num_classes, per_class, ds.size, [cfg.seed, pipeline.RNG_DATA])
        train_idx, test_idx = [], []
        for k in range(ds.num_classes):
            base = k * per_class
            train_idx.extend(range(base, base + ds.train_per_class))
            test_idx.extend(range(base + ds.train_per_class, base + per_class))
        train, test = full.subset(train_idx), full.subset(test_idx)
    elif isinstance(ds, IdxSpec):
        train = load_idx(ds.train_images, ds.train_labels)
        test = load_idx(ds.test_images, ds.test_labels)
    elif isinstance(ds, CifarSpec):
        def load_all(paths):
            parts = [load_cifar_binary(p) for p in paths]
            images = np.concatenate([p.images for p in parts])
            labels = np.concatenate([p.labels for p in parts])
            return Dataset(images, labels, 10)
        train, test = load_all(ds.train_files), load_all(ds.test_files)
    else:
        raise ValueError(f"unknown dataset spec {type(ds).__name__}")

    net = cfg.network
    if train.num_classes != net.num_classes:
        raise ValueError(f"dataset has {train.num_classes} classes, "
                         f"network configured for {net.num_classes}")
    if train.images.shape[1] != net.in_channels or train.images.shape[2] != net.image_size:
        raise ValueError(
            f"dataset shape {train.images.shape[1:]} does not match network config "
            f"({net.in_channels}, {net.image_size}, {net.image_size})")
    return train, test


def prepare_data(cfg):
    """Train/test datasets normalized with stats from the training portion only."""
    train, test = prepare_raw_data(cfg)
    stats = compute_norm_stats(train)
    return normalize(train, stats), normalize(test, stats), stats


def make_split(cfg, train):
    if cfg.split_training:
        return split_dataset(train, cfg.split_ratio, [cfg.seed, pipeline.RNG_SPLIT])
    everything = np.arange(len(train))
    return DataSplit(everything, everything.copy(), 1.0)


def _stats_doc(stats):
    mean, std = stats
    return {"mean": mean.tolist(), "std": std.tolist()}


def _base_meta(cfg, stats, stage):
    return {"stage": stage, "seed": cfg.seed, "config": config_to_doc(cfg),
            "norm_stats": _stats_doc(stats)}


def _provenance(cfg):
    return {"config_hash": config_hash(config_to_doc(cfg)), "seed": cfg.seed}


def run_pretrain(cfg):
    paths = RunPaths(cfg.out_dir)
    atomic_write_text(paths.config, dump_config(cfg))
    train, test, stats = prepare_data(cfg)
    split = make_split(cfg, train)
    net = Network(cfg.network, rng_for(cfg.seed, pipeline.RNG_INIT), dtype=net_dtype(cfg))
    metrics = MetricsWriter(paths.metrics)
    rng = rng_for(cfg.seed, pipeline.RNG_PRETRAIN)
    nag = pipeline.pretrain(net, train, split, cfg.schedule, cfg.delta, rng=rng,
                            metrics=metrics, augment=cfg.augment)
    meta = _base_meta(cfg, stats, "pretrain")
    meta["rng_state"] = rng_state_doc(rng)
    save_checkpoint(paths.pretrain_ckpt, net, [nag], meta=meta)
    return net


def _searched_network(cfg, train, split, metrics, paths):
    net = Network(cfg.network, rng_for(cfg.seed, pipeline.RNG_INIT), dtype=net_dtype(cfg))
    if cfg.pretrain:
        if not os.path.exists(paths.pretrain_ckpt):
            raise FileNotFoundError(
                f"{paths.pretrain_ckpt} not found; run the pretrain stage first "
                "or set pretrain=false")
        arrays, _ = load_checkpoint(paths.pretrain_ckpt)
        restore_network(net, arrays)
    rng = rng_for(cfg.seed, pipeline.RNG_SEARCH)
    apg = ApgNag(cfg.schedule.lr, pipeline.MOMENTUM)
    nag = Nag(cfg.schedule.lr, pipeline.MOMENTUM, cfg.delta)
    result = pipeline.search(net, train, split, cfg.schedule, cfg, metrics=metrics,
                             apg=apg, nag=nag, rng=rng)
    return net, result, (nag, apg), rng


def run_search(cfg):
    paths = RunPaths(cfg.out_dir)
    atomic_write_text(paths.config, dump_config(cfg))
    train, test, stats = prepare_data(cfg)
    split = make_split(cfg, train)
    metrics = MetricsWriter(paths.metrics)
    net, result, opts, rng = _searched_network(cfg, train, split, metrics, paths)
    desc = descriptor_from_network(cfg.network, net.graphs(), provenance=_provenance(cfg))
    atomic_write_bytes(paths.descriptor, serialize(desc))
    write_dot_files(desc, paths.dot_dir)
    meta = _base_meta(cfg, stats, "search")
    meta["rng_state"] = rng_state_doc(rng)
    meta["search"] = {"stop_reason": result.stop_reason, "epochs_run": result.epochs_run,
                      "active_edges": result.active_edges}
    save_checkpoint(paths.search_ckpt, net, list(opts), meta=meta)
    return net, result, desc


def write_dot_files(desc, dot_dir):
    for name, text in export_dot(desc).items():
        atomic_write_text(os.path.join(dot_dir, f"{name}.dot"), text)


def load_descriptor(path):
    with open(path, "rb") as f:
        return deserialize(f.read())


def run_finalize(cfg):
    paths = RunPaths(cfg.out_dir)
    desc = load_descriptor(paths.descriptor)
    if cfg.target_flops is None:
        log.info("no target_flops set; descriptor left at unit width multiplier")
        return desc
    final = pipeline.finalize(desc, cfg.target_flops)
    atomic_write_bytes(paths.descriptor, serialize(final))
    write_dot_files(final, paths.dot_dir)
    return final


def run_retrain(cfg, desc=None, train=None, test=None, stats=None, metrics=None):
    paths = RunPaths(cfg.out_dir)
    if desc is None:
        desc = load_descriptor(paths.descriptor)
    if train is None:
        train, test, stats = prepare_data(cfg)
    if metrics is None:
        metrics = MetricsWriter(paths.metrics)
    test_reads_before = test.read_count
    net, accuracy = pipeline.retrain(desc, train, test, cfg.schedule, cfg.delta,
                                     cfg.seed, metrics=metrics, augment=cfg.augment)
    meta = _base_meta(cfg, stats, "retrain")
    meta["descriptor"] = json.loads(desc.to_json())
    meta["test_accuracy"] = accuracy
    save_checkpoint(paths.retrain_ckpt, net, meta=meta)
    return net, accuracy, test_reads_before


def run_eval(cfg):
    """Rebuild the retrained model from its checkpoint and score the test set.

    The test data is normalized with the stats persisted in the checkpoint, so
    the reported accuracy reproduces the training run's final eval bit-exactly.
    """
    paths = RunPaths(cfg.out_dir)
    arrays, meta = load_checkpoint(paths.retrain_ckpt)
    desc = deserialize(json.dumps(meta["descriptor"]))
    net = build_from_descriptor(desc, rng_for(cfg.seed, pipeline.RNG_RETRAIN_INIT),
                                dtype=net_dtype(cfg))
    net.bn_scales_frozen = False
    restore_network(net, arrays)
    _, test_raw = prepare_raw_data(cfg)
    stats = (np.asarray(meta["norm_stats"]["mean"]), np.asarray(meta["norm_stats"]["std"]))
    test = normalize(test_raw, stats)
    accuracy = pipeline.evaluate(net, test, cfg.schedule.batch_size)
    return accuracy, meta


@dataclass
class RunResult:
    descriptor: object
    test_accuracy: float
    active_edges: int
    stop_reason: str
    search_epochs_run: int
    test_reads_before_final_eval: int
    searched_flops: int
    final_flops: int


def run_all(cfg):
    """Chain pretrain, search, finalize, and retrain; emit every artifact."""
    paths = RunPaths(cfg.out_dir)
    atomic_write_text(paths.config, dump_config(cfg))
    train, test, stats = prepare_data(cfg)
    split = make_split(cfg, train)
    metrics = MetricsWriter(paths.metrics)
    dtype = net_dtype(cfg)

    net = Network(cfg.network, rng_for(cfg.seed, pipeline.RNG_INIT), dtype=dtype)
    if cfg.pretrain:
        rng = rng_for(cfg.seed, pipeline.RNG_PRETRAIN)
        nag = pipeline.pretrain(net, train, split, cfg.schedule, cfg.delta, rng=rng,
                                metrics=metrics, augment=cfg.augment)
        meta = _base_meta(cfg, stats, "pretrain")
        meta["rng_state"] = rng_state_doc(rng)
        save_checkpoint(paths.pretrain_ckpt, net, [nag], meta=meta)

    rng = rng_for(cfg.seed, pipeline.RNG_SEARCH)
    apg = ApgNag(cfg.schedule.lr, pipeline.MOMENTUM)
    nag = Nag(cfg.schedule.lr, pipeline.MOMENTUM, cfg.delta)
    result = pipeline.search(net, train, split, cfg.schedule, cfg, metrics=metrics,
                             apg=apg, nag=nag, rng=rng)
    desc = descriptor_from_network(cfg.network, net.graphs(), provenance=_provenance(cfg))
    searched_flops = budget.descriptor_flops(desc)
    if cfg.target_flops is not None:
        desc = pipeline.finalize(desc, cfg.target_flops)
    atomic_write_bytes(paths.descriptor, serialize(desc))
    write_dot_files(desc, paths.dot_dir)
    meta = _base_meta(cfg, stats, "search")
    meta["rng_state"] = rng_state_doc(rng)
    meta["search"] = {"stop_reason": result.stop_reason, "epochs_run": result.epochs_run,
                      "active_edges": result.active_edges}
    save_checkpoint(paths.search_ckpt, net, [nag, apg], meta=meta)

    _, accuracy, test_reads_before = run_retrain(
        cfg, desc=desc, train=train, test=test, stats=stats, metrics=metrics)
    run_result = RunResult(
        descriptor=desc, test_accuracy=accuracy, active_edges=result.active_edges,
        stop_reason=result.stop_reason, search_epochs_run=result.epochs_run,
        test_reads_before_final_eval=test_reads_before,
        searched_flops=searched_flops, final_flops=budget.descriptor_flops(desc),
    )
    atomic_write_text(paths.result, json.dumps({
        "test_accuracy": run_result.test_accuracy,
        "active_edges": run_result.active_edges,
        "stop_reason": run_result.stop_reason,
        "search_epochs_run": run_result.search_epochs_run,
        "test_reads_before_final_eval": run_result.test_reads_before_final_eval,
        "searched_flops": run_result.searched_flops,
        "final_flops": run_result.final_flops,
    }, indent=2, sort_keys=True))
    return run_result
