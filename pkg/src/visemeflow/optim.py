"""SGD-with-momentum training loop and deterministic checkpoint files.

A checkpoint file starts with the magic bytes ``NCKP``, a little-endian u32
header length, and a JSON header (architecture descriptor, training metadata,
and a tensor manifest).  The payload is the parameter tensors sorted by name,
each prefixed with a u16 name length and the UTF-8 name, then serialized in
the same ``NTSR`` layout used for standalone tensor files.
"""

from __future__ import annotations

import fnmatch
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    DataError,
    HeaderMismatchError,
    ShapeMismatchError,
    TrainingDivergedError,
    TruncatedPayloadError,
)
from .tensor import read_tensor, write_tensor

_CKPT_MAGIC = b"NCKP"
_DTYPE_NAMES = {np.dtype("<f4"): "f32", np.dtype("<f8"): "f64"}


@dataclass
class OptimizerState:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    clip_norm: float | None = None
    velocities: dict = field(default_factory=dict)


@dataclass
class ModelCheckpoint:
    architecture: dict
    params: dict
    metadata: dict


def sgd_momentum_step(params: dict, grads: dict, state: OptimizerState) -> dict:
    """Apply v <- mu*v - lr*g; p <- p + v to every parameter, in place."""
    for name in params:
        if name not in grads:
            raise ShapeMismatchError(f"missing gradient for parameter '{name}'")
        p = params[name]
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatchError(
                f"gradient shape {g.shape} does not match parameter "
                f"'{name}' shape {p.shape}"
            )
        v = state.velocities.get(name)
        if v is None:
            v = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ShapeMismatchError(
                f"velocity shape {v.shape} does not match parameter "
                f"'{name}' shape {p.shape}"
            )
        v = state.momentum * v - state.learning_rate * g.astype(p.dtype, copy=False)
        state.velocities[name] = v
        params[name] = p + v
    return params


def clip_gradients(grads: dict, clip_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``clip_norm``.

    Returns the pre-clip norm.
    """
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = float(np.sqrt(total))
    if norm > clip_norm and norm > 0.0:
        scale = clip_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


def train_loop(
    params: dict,
    num_train: int,
    batch_fn,
    metric_fn,
    state: OptimizerState,
    seed: int,
    maximize: bool = True,
    architecture: dict | None = None,
) -> ModelCheckpoint:
    """Run seeded epochs of minibatch SGD and keep the best-validation params.

    ``batch_fn(params, indices)`` must return ``(loss, grads)`` for one
    minibatch of the training split; ``metric_fn(params)`` must return the
    validation metric a checkpoint is selected by.  With ``maximize=False``
    lower metric values win (MSE-style).  Early stopping counts epochs since
    the last improvement and stops once the count reaches ``patience``, so
    patience 0 runs exactly one epoch.
    """
    if num_train <= 0:
        raise DataError("training split is empty")
    rng = np.random.default_rng(seed)
    best_params = {k: v.copy() for k, v in params.items()}
    best_metric = None
    best_epoch = -1
    epochs_since_improvement = 0
    history = []
    for epoch in range(state.max_epochs):
        order = rng.permutation(num_train)
        loss_sum = 0.0
        for start in range(0, num_train, state.batch_size):
            idx = order[start : start + state.batch_size]
            loss, grads = batch_fn(params, idx)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss!r} at epoch {epoch}, "
                    f"batch starting at sample {start}"
                )
            if state.clip_norm is not None:
                clip_gradients(grads, state.clip_norm)
            sgd_momentum_step(params, grads, state)
            loss_sum += float(loss) * len(idx)
        metric = float(metric_fn(params))
        history.append(
            {
                "epoch": epoch,
                "train_loss": loss_sum / num_train,
                "val_metric": metric,
            }
        )
        improved = best_metric is None or (
            metric > best_metric if maximize else metric < best_metric
        )
        if improved:
            best_metric = metric
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}
            epochs_since_improvement = 0
        else:
            epochs_since_improvement += 1
        if epochs_since_improvement >= state.patience:
            break
    metadata = {
        "epoch": best_epoch,
        "seed": seed,
        "val_metric": best_metric,
        "metric_history": history,
    }
    return ModelCheckpoint(
        architecture=dict(architecture or {}), params=best_params, metadata=metadata
    )


def save_checkpoint(path, checkpoint: ModelCheckpoint) -> None:
    names = sorted(checkpoint.params)
    manifest = {}
    for name in names:
        a = np.ascontiguousarray(checkpoint.params[name])
        dt = a.dtype.newbyteorder("<")
        if dt not in _DTYPE_NAMES:
            raise ShapeMismatchError(f"unsupported checkpoint dtype {a.dtype}")
        manifest[name] = {"dtype": _DTYPE_NAMES[dt], "shape": list(a.shape)}
    header = {
        "architecture": checkpoint.architecture,
        "metadata": checkpoint.metadata,
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fp:
        fp.write(_CKPT_MAGIC)
        fp.write(struct.pack("<I", len(header_bytes)))
        fp.write(header_bytes)
        for name in names:
            name_bytes = name.encode()
            fp.write(struct.pack("<H", len(name_bytes)))
            fp.write(name_bytes)
            write_tensor(fp, np.asarray(checkpoint.params[name]))


def _read_exact(fp, n: int, what: str) -> bytes:
    data = fp.read(n)
    if len(data) != n:
        raise TruncatedPayloadError(f"checkpoint ends inside {what}")
    return data


def load_checkpoint(path, name_filter: str | None = None) -> ModelCheckpoint:
    """Read an NCKP file; ``name_filter`` keeps only fnmatch-matching tensors."""
    with open(path, "rb") as fp:
        magic = fp.read(4)
        if magic != _CKPT_MAGIC:
            raise BadMagicError(
                f"bad checkpoint magic {magic!r}, expected {_CKPT_MAGIC!r}"
            )
        (header_len,) = struct.unpack("<I", _read_exact(fp, 4, "header length"))
        try:
            header = json.loads(_read_exact(fp, header_len, "header"))
        except ValueError as exc:
            raise HeaderMismatchError(f"checkpoint header is not valid JSON: {exc}") from exc
        for key in ("architecture", "metadata", "tensors"):
            if key not in header:
                raise HeaderMismatchError(f"checkpoint header missing '{key}'")
        manifest = header["tensors"]
        params = {}
        seen = []
        for _ in range(len(manifest)):
            (name_len,) = struct.unpack("<H", _read_exact(fp, 2, "tensor name length"))
            name = _read_exact(fp, name_len, "tensor name").decode()
            if name not in manifest:
                raise HeaderMismatchError(
                    f"payload tensor '{name}' is not declared in the header"
                )
            a = read_tensor(fp)
            entry = manifest[name]
            if list(a.shape) != list(entry["shape"]):
                raise HeaderMismatchError(
                    f"tensor '{name}' payload shape {list(a.shape)} differs "
                    f"from header shape {entry['shape']}"
                )
            dt = _DTYPE_NAMES[a.dtype.newbyteorder("<")]
            if dt != entry["dtype"]:
                raise HeaderMismatchError(
                    f"tensor '{name}' payload dtype {dt} differs from "
                    f"header dtype {entry['dtype']}"
                )
            seen.append(name)
            if name_filter is None or fnmatch.fnmatchcase(name, name_filter):
                params[name] = a
        if sorted(seen) != sorted(manifest):
            missing = sorted(set(manifest) - set(seen))
            raise HeaderMismatchError(
                f"header declares tensors absent from the payload: {missing}"
            )
        trailing = fp.read(1)
        if trailing:
            raise DataError("checkpoint has trailing bytes after the last tensor")
    return ModelCheckpoint(
        architecture=header["architecture"], params=params, metadata=header["metadata"]
    )
