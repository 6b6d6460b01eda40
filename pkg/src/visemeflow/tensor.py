"""Dense float tensor operations and the NTSR binary tensor format.

Tensors are plain numpy arrays restricted to float32/float64 with row-major
(C-order) layout.  Everything downstream (layers, frames, checkpoints) moves
through the helpers here, which add the shape/dtype checking and the on-disk
format the rest of the pipeline relies on.

NTSR format: magic ``NTSR``, 1 byte dtype code (0=f32, 1=f64), 1 byte rank,
then rank little-endian u64 dims, then the raw little-endian scalars in
row-major order.

Arrays returned by these functions are treated as immutable by convention;
nothing in the package mutates a tensor after handing it out.
"""

import struct

import numpy as np

from .errors import BadMagicError, DataError, ShapeMismatchError, TruncatedPayloadError

NTSR_MAGIC = b"NTSR"

_DTYPE_TO_CODE = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def require_float(a: np.ndarray) -> np.ndarray:
    """Check that ``a`` is a float32/float64 ndarray; returns it unchanged."""
    a = np.asarray(a)
    if a.dtype not in (np.float32, np.float64):
        raise ShapeMismatchError(f"expected float32/float64 tensor, got dtype {a.dtype}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rank-2 matrix product with explicit shape/dtype checking."""
    a = require_float(a)
    b = require_float(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeMismatchError(f"matmul dtypes disagree: {a.dtype} vs {b.dtype}")
    return a @ b


def map_elements(a: np.ndarray, f) -> np.ndarray:
    """Apply a scalar function elementwise, preserving shape and dtype.

    ``f`` may be an array-aware callable (numpy ufunc) or a plain scalar
    function; the latter is vectorized.
    """
    a = require_float(a)
    try:
        out = np.asarray(f(a))
        if out.shape != a.shape:
            raise ValueError(f"map function changed shape {a.shape} -> {out.shape}")
    except (TypeError, ValueError):
        out = np.vectorize(f, otypes=[a.dtype])(a)
    return np.ascontiguousarray(out, dtype=a.dtype)


def reduce_sum(a: np.ndarray, axis: int | None = None):
    """Sum along ``axis`` (dropping it), or over all elements when axis is None."""
    a = require_float(a)
    if axis is None:
        return a.dtype.type(a.sum())
    if not 0 <= axis < a.ndim:
        raise ShapeMismatchError(f"axis {axis} out of range for rank-{a.ndim} tensor")
    return a.sum(axis=axis)


def reshape(a: np.ndarray, new_shape) -> np.ndarray:
    """Reinterpret the flat row-major buffer under a new shape."""
    a = require_float(a)
    new_shape = tuple(int(d) for d in new_shape)
    if any(d < 1 for d in new_shape):
        raise ShapeMismatchError(f"invalid target shape {new_shape}")
    if int(np.prod(new_shape)) != a.size:
        raise ShapeMismatchError(
            f"cannot reshape {a.shape} ({a.size} elements) to {new_shape}"
        )
    return np.ascontiguousarray(a).reshape(new_shape)


def write_tensor(fp, a: np.ndarray) -> None:
    """Serialize one tensor to an open binary file object."""
    a = np.ascontiguousarray(require_float(a))
    code = _DTYPE_TO_CODE[np.dtype(a.dtype).newbyteorder("<")]
    fp.write(NTSR_MAGIC)
    fp.write(struct.pack("<BB", code, a.ndim))
    fp.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    fp.write(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))


def _read_exact(fp, n: int, what: str) -> bytes:
    buf = fp.read(n)
    if len(buf) != n:
        raise TruncatedPayloadError(f"truncated payload while reading {what}")
    return buf


def read_tensor(fp) -> np.ndarray:
    """Read one tensor from an open binary file object."""
    magic = fp.read(len(NTSR_MAGIC))
    if magic != NTSR_MAGIC:
        raise BadMagicError(f"bad tensor magic {magic!r}")
    code, rank = struct.unpack("<BB", _read_exact(fp, 2, "tensor header"))
    if code not in _CODE_TO_DTYPE:
        raise BadMagicError(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(fp, 8 * rank, "tensor dims"))
    dtype = _CODE_TO_DTYPE[code]
    count = int(np.prod(dims)) if rank else 1
    raw = _read_exact(fp, count * dtype.itemsize, "tensor data")
    return np.frombuffer(raw, dtype=dtype).reshape(dims).copy()


def save_tensor(path, a: np.ndarray) -> None:
    with open(path, "wb") as fp:
        write_tensor(fp, a)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fp:
        out = read_tensor(fp)
        if fp.read(1):
            raise DataError(f"trailing bytes after tensor in {path}")
    return out
