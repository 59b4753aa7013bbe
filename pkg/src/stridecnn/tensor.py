"""Numeric primitives for multi-channel 1D signals.

Public functions take signals shaped ``(channels, length)`` or batches
``(batch, channels, length)``. Internally the layers run on a time-major
layout ``(batch, length, channels)``; the ``*_tm`` helpers expose that form
to the network so activations are never transposed between layers.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "ShapeError",
    "make_rng",
    "as_signal",
    "same_padding",
    "conv1d_same",
    "conv1d_same_backward",
    "maxpool1d",
    "maxpool1d_backward",
    "relu",
    "sample_truncated_normal",
    "conv_tm",
    "conv_tm_backward",
    "pool_tm",
    "pool_tm_backward",
]


class ShapeError(ValueError):
    """Raised when array dimensions do not fit together."""


def make_rng(seed):
    """Return a generator whose stream is fully determined by ``seed``."""
    if seed is None:
        raise ValueError("a seed is required; wall-clock seeding is not supported")
    return np.random.Generator(np.random.PCG64(seed))


def as_signal(values):
    """Validate and return ``values`` as a finite float64 ``(channels, length)`` array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"signal must be 2-D (channels, length), got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"signal needs at least one channel and one sample, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("signal contains non-finite values")
    return arr


def same_padding(kernel_length):
    """Left/right zero padding that keeps the output length equal to the input length.

    For even kernels the extra sample goes to the right.
    """
    total = kernel_length - 1
    left = total // 2
    return left, total - left


# -- time-major kernels ------------------------------------------------------

def _im2col_tm(x, kernel_length, pad):
    # (B, L, C) -> (B * L, Lk * C); row t holds xpad[t:t + Lk, :] flattened
    batch, length, channels = x.shape
    xp = np.zeros((batch, length + pad[0] + pad[1], channels))
    xp[:, pad[0]:pad[0] + length] = x
    s = xp.strides
    win = as_strided(xp, shape=(batch, length, kernel_length * channels), strides=(s[0], s[1], s[2]),
                     writeable=False)
    return win.reshape(batch * length, kernel_length * channels)


def conv_tm(x, kernels, biases):
    """Same-length cross-correlation on a ``(B, L, N_in)`` batch.

    Returns the ``(B, L, N_out)`` output and the unfolded input windows.
    """
    batch, length, n_in = x.shape
    lk, k_in, n_out = kernels.shape
    if k_in != n_in:
        raise ShapeError(f"kernels expect {k_in} input channels, signal has {n_in}")
    if biases.shape != (n_out,):
        raise ShapeError(f"biases must have shape ({n_out},), got {biases.shape}")
    cols = _im2col_tm(x, lk, same_padding(lk))
    out = cols @ kernels.reshape(lk * n_in, n_out)
    out += biases
    return out.reshape(batch, length, n_out), cols


def conv_tm_backward(cols, kernels, grad_out, input_grad=True):
    """Input, kernel and bias gradients for :func:`conv_tm`.

    ``cols`` are the windows returned by the forward call. Kernel and bias
    gradients are summed over the batch.
    """
    batch, length, n_out = grad_out.shape
    lk, n_in, _ = kernels.shape
    g = grad_out.reshape(batch * length, n_out)
    grad_w = (cols.T @ g).reshape(lk, n_in, n_out)
    grad_b = g.sum(axis=0)
    if not input_grad:
        return None, grad_w, grad_b
    # correlate grad_out with the time-flipped kernel, padding mirrored
    left, right = same_padding(lk)
    gcols = _im2col_tm(grad_out, lk, (right, left))
    wflip = kernels[::-1].transpose(0, 2, 1).reshape(lk * n_out, n_in)
    grad_x = (gcols @ wflip).reshape(batch, length, n_in)
    return grad_x, grad_w, grad_b


def pool_tm(x, r):
    """Non-overlapping max pool along time of a ``(B, L, C)`` batch.

    Returns pooled values and the within-window offset of each maximum;
    the first of tied maxima wins.
    """
    batch, length, channels = x.shape
    if r < 1:
        raise ValueError(f"pool width must be >= 1, got {r}")
    if length % r:
        raise ShapeError(f"signal length {length} is not divisible by pool width {r}")
    win = x.reshape(batch, length // r, r, channels)
    best = win[:, :, 0].copy()
    arg = np.zeros(best.shape, dtype=np.intp)
    for q in range(1, r):
        cand = win[:, :, q]
        upd = cand > best
        best[upd] = cand[upd]
        arg[upd] = q
    return best, arg


def pool_tm_backward(grad_out, arg, r):
    """Scatter pooled gradients to the offsets recorded by :func:`pool_tm`."""
    batch, n_win, channels = grad_out.shape
    grad = np.zeros((batch, n_win, r, channels))
    for q in range(r):
        grad[:, :, q] = np.where(arg == q, grad_out, 0.0)
    return grad.reshape(batch, n_win * r, channels)


# -- channel-major public API ------------------------------------------------

def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"expected (channels, length) or (batch, channels, length), got {x.shape}")


def _kernel_array(kernels):
    kernels = np.asarray(kernels, dtype=np.float64)
    if kernels.ndim != 3:
        raise ShapeError(f"kernels must be (L_k, N_in, N_out), got {kernels.shape}")
    return kernels


def conv1d_same(x, kernels, biases):
    """Same-length multi-channel cross-correlation.

    ``out[k, t] = sum_j sum_u kernels[u, j, k] * xpad[j, t + u] + biases[k]``
    where ``xpad`` is ``x`` zero padded by :func:`same_padding`.

    Parameters
    ----------
    x : ndarray, shape (N_in, L) or (B, N_in, L)
    kernels : ndarray, shape (L_k, N_in, N_out)
    biases : ndarray, shape (N_out,)

    Returns
    -------
    ndarray, shape (N_out, L) or (B, N_out, L)
    """
    xb, squeeze = _batched(x)
    kernels = _kernel_array(kernels)
    out, _ = conv_tm(np.ascontiguousarray(xb.transpose(0, 2, 1)), kernels,
                     np.asarray(biases, dtype=np.float64))
    out = np.ascontiguousarray(out.transpose(0, 2, 1))
    return out[0] if squeeze else out


def conv1d_same_backward(x, kernels, grad_out):
    """Gradients of :func:`conv1d_same` w.r.t. its input, kernels and biases."""
    xb, squeeze = _batched(x)
    gb, _ = _batched(grad_out)
    kernels = _kernel_array(kernels)
    lk, n_in, n_out = kernels.shape
    batch, _, length = xb.shape
    if gb.shape != (batch, n_out, length):
        raise ShapeError(f"grad_out shape {gb.shape} does not match output {(batch, n_out, length)}")
    xt = np.ascontiguousarray(xb.transpose(0, 2, 1))
    cols = _im2col_tm(xt, lk, same_padding(lk))
    gx, gw, gbias = conv_tm_backward(cols, kernels, np.ascontiguousarray(gb.transpose(0, 2, 1)))
    gx = np.ascontiguousarray(gx.transpose(0, 2, 1))
    return (gx[0] if squeeze else gx), gw, gbias


def maxpool1d(x, r):
    """Max over non-overlapping windows of width ``r``.

    Returns the pooled values and, for each output sample, the absolute
    position in ``x`` of the selected maximum. Ties resolve to the first
    position in the window.
    """
    xb, squeeze = _batched(x)
    best, arg = pool_tm(xb.transpose(0, 2, 1), r)
    values = np.ascontiguousarray(best.transpose(0, 2, 1))
    indices = arg.transpose(0, 2, 1) + r * np.arange(values.shape[2])
    if squeeze:
        return values[0], indices[0]
    return values, indices


def maxpool1d_backward(grad_out, indices, length):
    """Route pooled gradients back to the stored argmax positions."""
    gb, squeeze = _batched(grad_out)
    ib = np.asarray(indices)
    if squeeze:
        ib = ib[None]
    if ib.shape != gb.shape:
        raise ShapeError(f"indices shape {ib.shape} does not match gradient {gb.shape}")
    grad_x = np.zeros(gb.shape[:2] + (length,))
    np.put_along_axis(grad_x, ib, gb, axis=2)
    return grad_x[0] if squeeze else grad_x


def relu(z):
    return np.maximum(z, 0.0)


def sample_truncated_normal(rng, shape, stddev):
    """Draw from N(0, stddev^2) restricted to [-2 stddev, 2 stddev].

    Out-of-range draws are discarded and redrawn, so the result follows the
    truncated density exactly.
    """
    if stddev <= 0:
        raise ValueError(f"stddev must be positive, got {stddev}")
    out = rng.normal(0.0, stddev, size=shape)
    bad = np.abs(out) > 2.0 * stddev
    while np.any(bad):
        out[bad] = rng.normal(0.0, stddev, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * stddev
    return out
