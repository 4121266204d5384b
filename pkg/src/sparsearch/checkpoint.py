"""Stage-boundary checkpoints: weights, factors and masks, optimizer buffers,
RNG state, and normalization stats, in one atomically-written npz."""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np


def save_checkpoint(path, net, optimizers=(), meta=None):
    arrays = {}
    for name, tensor, _ in net.named_parameters():
        arrays[f"param.{name}"] = tensor.data
    for name, buf in net.named_buffers():
        arrays[f"buffer.{name}"] = buf
    for name, graph in net.lambda_tables():
        arrays[f"lam.{name}"] = graph.lam.data
        arrays[f"mask.{name}"] = graph.active
    for opt in optimizers:
        for key, value in opt.state_arrays().items():
            arrays[f"opt.{key}"] = value
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    arrays["__meta__"] = np.frombuffer(blob, dtype=np.uint8)

    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".npz.tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            np.savez(f, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode("utf-8"))
    return arrays, meta


def restore_network(net, arrays):
    """Load a checkpoint's state into a freshly built network of the same config."""
    for name, graph in net.lambda_tables():
        graph.active[:] = arrays[f"mask.{name}"]
        graph.lam.data[:] = arrays[f"lam.{name}"]
    for block in net.blocks():
        block.drop_dead_params()
    saved_params = {k[len("param."):] for k in arrays if k.startswith("param.")}
    current = {name: tensor for name, tensor, _ in net.named_parameters()}
    missing = saved_params.symmetric_difference(current)
    if missing:
        raise ValueError(f"checkpoint/network parameter mismatch: {sorted(missing)[:5]}")
    for name, tensor in current.items():
        saved = arrays[f"param.{name}"]
        if saved.shape != tensor.data.shape:
            raise ValueError(f"shape mismatch for {name}: {saved.shape} vs {tensor.data.shape}")
        tensor.data[:] = saved
    for name, buf in net.named_buffers():
        buf[:] = arrays[f"buffer.{name}"]


def restore_optimizer(opt, arrays):
    opt.load_state({k[len("opt."):]: v for k, v in arrays.items() if k.startswith("opt.")})


def rng_state_doc(rng):
    return json.loads(json.dumps(rng.bit_generator.state, default=int))
