"""Layer forward/backward passes for the convolutional stacks and dense heads.

All layers are written functionally: ``*_forward`` returns the output plus an
opaque cache, ``*_backward`` consumes that cache exactly once and returns the
exact gradients of the forward map.  Image batches are NCHW, row-major.

Convolution is implemented as cross-correlation (no kernel flip) over im2col
patches; the transposed convolution is its adjoint, built from the same
im2col/col2im pair so the two stay consistent.
"""

import numpy as np

from ..errors import ShapeMismatchError

# ---------------------------------------------------------------------------
# activations


def relu(x):
    return np.maximum(x, 0)


def relu_grad(x, grad_out):
    return np.where(x > 0, grad_out, 0)


def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_grad_from_out(out, grad_out):
    return grad_out * out * (1.0 - out)


def tanh(x):
    return np.tanh(x)


# ---------------------------------------------------------------------------
# im2col machinery


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - kernel
    if span < 0:
        raise ShapeMismatchError(
            f"kernel {kernel} larger than padded input {size + 2 * pad}"
        )
    if span % stride != 0:
        raise ShapeMismatchError(
            f"non-integral output size for input {size}, kernel {kernel}, "
            f"stride {stride}, pad {pad}"
        )
    return span // stride + 1


def im2col(x, kh, kw, stride, pad):
    """(N,C,H,W) -> (N*Ho*Wo, C*kh*kw) patch matrix."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for dy in range(kh):
        y_max = dy + stride * ho
        for dx in range(kw):
            x_max = dx + stride * wo
            cols[:, :, dy, dx] = x[:, :, dy:y_max:stride, dx:x_max:stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * kh * kw)


def col2im(cols, x_shape, kh, kw, stride, pad):
    """Adjoint of im2col: scatter-add patch columns back onto (N,C,H,W)."""
    n, c, h, w = x_shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    cols = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for dy in range(kh):
        y_max = dy + stride * ho
        for dx in range(kw):
            x_max = dx + stride * wo
            out[:, :, dy:y_max:stride, dx:x_max:stride] += cols[:, :, dy, dx]
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return out


# ---------------------------------------------------------------------------
# conv2d


def conv2d_forward(x, w, b, stride=1, pad=0):
    """Cross-correlate (N,C,H,W) with (O,C,kh,kw) kernels plus bias (O,)."""
    n, c, h, wid = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeMismatchError(f"channel mismatch: input {c} vs kernel {cw}")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wid, kw, stride, pad)
    cols = im2col(x, kh, kw, stride, pad)
    w_col = w.reshape(o, -1)
    out = cols @ w_col.T + b
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    cache = (x.shape, cols, w, stride, pad)
    return np.ascontiguousarray(out), cache


def conv2d_backward(grad_out, cache):
    x_shape, cols, w, stride, pad = cache
    o, c, kh, kw = w.shape
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, o)
    grad_w = (g.T @ cols).reshape(w.shape)
    grad_b = g.sum(axis=0)
    grad_cols = g @ w.reshape(o, -1)
    grad_x = col2im(grad_cols, x_shape, kh, kw, stride, pad)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# transposed conv2d (decoder upsampling); out = (in-1)*stride - 2*pad + kernel


def conv2d_transpose_forward(x, w, b, stride=1, pad=0):
    """Adjoint convolution: (N,C,H,W) with kernels (C,O,kh,kw) -> upsampled map."""
    n, c, h, wid = x.shape
    cw, o, kh, kw = w.shape
    if c != cw:
        raise ShapeMismatchError(f"channel mismatch: input {c} vs kernel {cw}")
    ho = (h - 1) * stride - 2 * pad + kh
    wo = (wid - 1) * stride - 2 * pad + kw
    if ho < 1 or wo < 1:
        raise ShapeMismatchError(
            f"transposed conv output collapses to {ho}x{wo} for input {h}x{wid}"
        )
    # x plays the role conv2d's grad_out plays in conv2d_backward
    g = x.transpose(0, 2, 3, 1).reshape(-1, c)
    cols = g @ w.reshape(c, -1)
    out = col2im(cols, (n, o, ho, wo), kh, kw, stride, pad)
    out += b.reshape(1, o, 1, 1)
    cache = (x, w, (n, o, ho, wo), stride, pad)
    return out, cache


def conv2d_transpose_backward(grad_out, cache):
    x, w, out_shape, stride, pad = cache
    n, c, h, wid = x.shape
    cw, o, kh, kw = w.shape
    grad_cols = im2col(grad_out, kh, kw, stride, pad)
    grad_x = (grad_cols @ w.reshape(c, -1).T).reshape(n, h, wid, c).transpose(0, 3, 1, 2)
    g = x.transpose(0, 2, 3, 1).reshape(-1, c)
    grad_w = (g.T @ grad_cols).reshape(w.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(grad_x), grad_w, grad_b


# ---------------------------------------------------------------------------
# max pooling


def maxpool_forward(x, window, stride):
    n, c, h, w = x.shape
    ho = conv_output_size(h, window, stride, 0)
    wo = conv_output_size(w, window, stride, 0)
    stack = np.empty((window * window, n, c, ho, wo), dtype=x.dtype)
    k = 0
    for dy in range(window):
        for dx in range(window):
            stack[k] = x[:, :, dy : dy + stride * ho : stride, dx : dx + stride * wo : stride]
            k += 1
    # np.argmax returns the first maximum, i.e. row-major within the window
    arg = stack.argmax(axis=0)
    out = np.take_along_axis(stack, arg[None], axis=0)[0]
    cache = (x.shape, arg, window, stride)
    return out, cache


def maxpool_backward(grad_out, cache):
    x_shape, arg, window, stride = cache
    n, c, h, w = x_shape
    ho, wo = arg.shape[2], arg.shape[3]
    grad_x = np.zeros(x_shape, dtype=grad_out.dtype)
    iy, ix = np.divmod(arg, window)
    ns, cs, ys, xs = np.indices((n, c, ho, wo), sparse=True)
    rows = ys * stride + iy
    cols = xs * stride + ix
    np.add.at(grad_x, (ns, cs, rows, cols), grad_out)
    return grad_x


# ---------------------------------------------------------------------------
# dense


def dense_forward(x, w, b):
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatchError(f"dense shapes disagree: input {x.shape}, weight {w.shape}")
    out = x @ w + b
    return out, (x, w)


def dense_backward(grad_out, cache):
    x, w = cache
    grad_x = grad_out @ w.T
    grad_w = x.T @ grad_out
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b
