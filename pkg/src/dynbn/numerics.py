"""Dense numerics kernel: FFT, conv/pool/dense layers, BatchNorm, losses, SGD.

All layer functions come in three flavours:

    y = conv2d(x, w)                    # plain forward
    y, cache = conv2d_forward(x, w)     # forward that keeps what backward needs
    dx, dw, db = conv2d_backward(dy, cache)

Parameters and activations are float32 by default, but every function keeps
the dtype it is given so that gradient checks can run in float64.  Reductions
that produce statistics (BatchNorm mean/variance) accumulate in float64.

The 2-D DFT is unnormalized (no 1/N factor) with the DC term at index (0, 0).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when array arguments have incompatible shapes."""


def _check_finite(x: np.ndarray, what: str = "input") -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite values")


# ---------------------------------------------------------------------------
# Fourier transforms
# ---------------------------------------------------------------------------

def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _fft_last_axis(x: np.ndarray) -> np.ndarray:
    """Unnormalized DFT along the last axis of a complex128 array."""
    n = x.shape[-1]
    if n == 1:
        return x.copy()
    if not _is_pow2(n):
        k = np.arange(n)
        mat = np.exp(-2j * np.pi * np.outer(k, k) / n)
        return x @ mat.T
    # iterative radix-2 decimation in time on bit-reversed input
    y = x[..., _bit_reverse_indices(n)]
    lead = y.shape[:-1]
    m = 2
    while m <= n:
        half = m // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / m)
        blocks = y.reshape(*lead, n // m, m)
        even = blocks[..., :half]
        odd = blocks[..., half:] * tw
        y = np.concatenate([even + odd, even - odd], axis=-1).reshape(*lead, n)
        m *= 2
    return y


def fft2(x: np.ndarray) -> np.ndarray:
    """2-D DFT over the last two axes.

    Works on a single H x W channel or any stack of them (..., H, W).  Power of
    two sizes use radix-2, other sizes fall back to a direct DFT.  Returns a
    complex128 array of the same shape.
    """
    x = np.asarray(x)
    if x.ndim < 2:
        raise ShapeError(f"fft2 needs at least 2 dims, got shape {x.shape}")
    if x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ShapeError(f"fft2 needs non-empty grid, got shape {x.shape}")
    _check_finite(x)
    z = x.astype(np.complex128)
    z = _fft_last_axis(z)
    z = _fft_last_axis(np.swapaxes(z, -1, -2))
    return np.swapaxes(z, -1, -2)


def amplitude(grid: np.ndarray) -> np.ndarray:
    """Elementwise modulus of a complex grid."""
    return np.abs(grid)


def fftshift(grid: np.ndarray) -> np.ndarray:
    """Move bin (0, 0) to (H // 2, W // 2) on the last two axes."""
    h, w = grid.shape[-2:]
    return np.roll(grid, shift=(h // 2, w // 2), axis=(-2, -1))


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple[int, ...], dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def he_normal(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...],
              dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, Ho, Wo, kh, kw) view
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _conv_check(x, w, b, stride, pad):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"channel mismatch: input has {c}, kernel expects {cw}")
    if b is not None and b.shape != (f,):
        raise ShapeError(f"bias shape {b.shape} does not match {f} filters")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    ho, wo = _out_size(h, kh, stride, pad), _out_size(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{wd}")
    return ho, wo


def _flat_padded(x, pad, kh, kw):
    """x (N, C, H, W) -> zero-padded channels-last rows (N*Hp*Wp + tail, C).

    Shifting a row offset by i*Wp + j reads kernel tap (i, j) for every output
    position at once; positions beyond (Ho, Wo) read garbage and are cropped.
    """
    n, c, h, w = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    tail = (kh - 1) * wp + (kw - 1)
    buf = np.zeros((n * hp * wp + tail, c), dtype=x.dtype)
    buf[:n * hp * wp].reshape(n, hp, wp, c)[:, pad:pad + h, pad:pad + w, :] = x.transpose(0, 2, 3, 1)
    return buf, hp, wp


def conv2d_forward(x, w, b=None, stride: int = 1, pad: int = 0):
    """Cross-correlation of x (N, C, H, W) with w (F, C, kh, kw), zero padded."""
    ho, wo = _conv_check(x, w, b, stride, pad)
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    if stride == 1 and c < 8:
        # thin input: channel-major im2col, one GEMM with K = kh*kw*C
        hp, wp = h + 2 * pad, wd + 2 * pad
        rows = n * hp * wp
        buf = np.zeros((c, rows + (kh - 1) * wp + kw - 1), dtype=x.dtype)
        buf[:, :rows].reshape(c, n, hp, wp)[:, :, pad:pad + h, pad:pad + wd] = x.transpose(1, 0, 2, 3)
        cols = np.empty((kh * kw * c, rows), dtype=x.dtype)
        for k in range(kh * kw):
            off = (k // kw) * wp + k % kw
            cols[k * c:(k + 1) * c] = buf[:, off:off + rows]
        wmat = w.transpose(2, 3, 1, 0).reshape(kh * kw * c, f)
        out = (cols.T @ wmat).reshape(n, hp, wp, f)[:, :ho, :wo]
        cache = ("thin", x.shape, cols, wmat, w.shape, pad, b is not None)
    elif stride == 1:
        buf, hp, wp = _flat_padded(x, pad, kh, kw)
        rows = n * hp * wp
        taps = [(i * wp + j, np.ascontiguousarray(w[:, :, i, j].T))
                for i in range(kh) for j in range(kw)]
        out = buf[:rows] @ taps[0][1]
        for off, wk in taps[1:]:
            out += buf[off:off + rows] @ wk
        out = out.reshape(n, hp, wp, f)[:, :ho, :wo]
        cache = ("flat", x.shape, buf, taps, w.shape, pad, b is not None)
    else:
        xh = x.transpose(0, 2, 3, 1)
        if pad:
            xh = np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        cols = np.concatenate([xh[:, i:i + hs:stride, j:j + ws:stride, :]
                               for i in range(kh) for j in range(kw)], axis=-1)
        cols = cols.reshape(n * ho * wo, kh * kw * c)
        wmat = w.transpose(2, 3, 1, 0).reshape(kh * kw * c, f)
        out = (cols @ wmat).reshape(n, ho, wo, f)
        cache = ("cols", x.shape, cols, wmat, w.shape, stride, pad, b is not None)
    if b is not None:
        out = out + b
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cache


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> np.ndarray:
    return conv2d_forward(x, w, b, stride, pad)[0]


def conv2d_backward(dout, cache):
    """Returns (dx, dw, db); db is None when the forward had no bias."""
    if cache[0] == "flat":
        return _conv2d_backward_flat(dout, cache)
    if cache[0] == "thin":
        return _conv2d_backward_thin(dout, cache)
    _, xshape, cols, wmat, wshape, stride, pad, has_bias = cache
    n, c, h, wd = xshape
    f, _, kh, kw = wshape
    ho, wo = dout.shape[2:]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (cols.T @ d2).reshape(kh, kw, c, f).transpose(3, 2, 0, 1)
    db = d2.sum(axis=0) if has_bias else None
    dcols = (d2 @ wmat.T).reshape(n, ho, wo, kh * kw, c)
    dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=dout.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + hs:stride, j:j + ws:stride, :] += dcols[:, :, :, i * kw + j, :]
    dx = dxp[:, pad:pad + h, pad:pad + wd, :]
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2)), np.ascontiguousarray(dw), db


def _padded_grad(dout, hp, wp):
    n, f, ho, wo = dout.shape
    g = np.zeros((n, hp, wp, f), dtype=dout.dtype)
    g[:, :ho, :wo] = dout.transpose(0, 2, 3, 1)
    return g.reshape(n * hp * wp, f)


def _conv2d_backward_thin(dout, cache):
    _, xshape, cols, wmat, wshape, pad, has_bias = cache
    n, c, h, wd = xshape
    f, _, kh, kw = wshape
    hp, wp = h + 2 * pad, wd + 2 * pad
    rows = n * hp * wp
    g = _padded_grad(dout, hp, wp)
    dw = (cols @ g).reshape(kh, kw, c, f).transpose(3, 2, 0, 1)
    dcols = wmat @ g.T
    dbuf = np.zeros((c, rows + (kh - 1) * wp + kw - 1), dtype=dout.dtype)
    for k in range(kh * kw):
        off = (k // kw) * wp + k % kw
        dbuf[:, off:off + rows] += dcols[k * c:(k + 1) * c]
    dx = dbuf[:, :rows].reshape(c, n, hp, wp)[:, :, pad:pad + h, pad:pad + wd]
    db = g.sum(axis=0) if has_bias else None
    return np.ascontiguousarray(dx.transpose(1, 0, 2, 3)), np.ascontiguousarray(dw), db


def _conv2d_backward_flat(dout, cache):
    _, xshape, buf, taps, wshape, pad, has_bias = cache
    n, c, h, wd = xshape
    f, _, kh, kw = wshape
    ho, wo = dout.shape[2:]
    hp, wp = h + 2 * pad, wd + 2 * pad
    rows = n * hp * wp
    g = _padded_grad(dout, hp, wp)
    dw = np.empty((f, c, kh, kw), dtype=dout.dtype)
    dbuf = np.zeros_like(buf)
    for k, (off, wk) in enumerate(taps):
        dw[:, :, k // kw, k % kw] = (buf[off:off + rows].T @ g).T
        dbuf[off:off + rows] += g @ wk.T
    dx = dbuf[:rows].reshape(n, hp, wp, c)[:, pad:pad + h, pad:pad + wd]
    db = g.sum(axis=0) if has_bias else None
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2)), dw, db


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------

def _pool_windows(x, k, stride):
    if x.ndim != 4:
        raise ShapeError(f"pooling expects (N, C, H, W), got {x.shape}")
    h, w = x.shape[2:]
    ho, wo = _out_size(h, k, stride, 0), _out_size(w, k, stride, 0)
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool window {k} larger than input {h}x{w}")
    return _windows(x, k, k, stride)[:, :, :ho, :wo]


def maxpool2d_forward(x, k: int = 2, stride: int = 2):
    """Max pooling; the gradient of a tied window goes to its first maximum."""
    win = _pool_windows(x, k, stride)
    ho, wo = win.shape[2:4]
    if k == stride:
        # non-overlapping windows: compare the k*k strided views directly
        taps = [x[:, :, i:i + k * ho:k, j:j + k * wo:k] for i in range(k) for j in range(k)]
        out = taps[0].copy()
        for t in taps[1:]:
            np.maximum(out, t, out=out)
        arg = np.full(out.shape, k * k - 1, dtype=np.int8)
        for t_idx in range(k * k - 2, -1, -1):
            arg[taps[t_idx] == out] = t_idx
        return out, (x.shape, arg, k, stride)
    flat = win.reshape(*win.shape[:4], k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), (x.shape, arg, k, stride)


def maxpool2d(x, k: int = 2, stride: int = 2) -> np.ndarray:
    if k != stride:
        return maxpool2d_forward(x, k, stride)[0]
    ho, wo = _pool_windows(x, k, stride).shape[2:4]
    out = x[:, :, 0:k * ho:k, 0:k * wo:k].copy()
    for i in range(k):
        for j in range(k):
            if i or j:
                np.maximum(out, x[:, :, i:i + k * ho:k, j:j + k * wo:k], out=out)
    return out


def maxpool2d_backward(dout, cache):
    xshape, arg, k, stride = cache
    ho, wo = dout.shape[2:]
    dx = np.zeros(xshape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            hit = arg == i * k + j
            dx[:, :, i:i + stride * (ho - 1) + 1:stride,
               j:j + stride * (wo - 1) + 1:stride] += dout * hit
    return dx


def avgpool2d_forward(x, k: int = 2, stride: int = 2):
    win = _pool_windows(x, k, stride)
    out = win.mean(axis=(-2, -1)).astype(x.dtype)
    return out, (x.shape, k, stride)


def avgpool2d(x, k: int = 2, stride: int = 2) -> np.ndarray:
    return avgpool2d_forward(x, k, stride)[0]


def avgpool2d_backward(dout, cache):
    xshape, k, stride = cache
    ho, wo = dout.shape[2:]
    dx = np.zeros(xshape, dtype=dout.dtype)
    share = dout / (k * k)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * (ho - 1) + 1:stride,
               j:j + stride * (wo - 1) + 1:stride] += share
    return dx


def global_avgpool_forward(x):
    return x.mean(axis=(2, 3)).astype(x.dtype), x.shape


def global_avgpool_backward(dout, xshape):
    n, c, h, w = xshape
    return np.broadcast_to((dout / (h * w))[:, :, None, None], xshape).astype(dout.dtype)


# ---------------------------------------------------------------------------
# Dense / activation
# ---------------------------------------------------------------------------

def dense_forward(x, w, b):
    """x (N, D) @ w (D, O) + b (O,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense shape mismatch: x {x.shape}, w {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"bias shape {b.shape} does not match output width {w.shape[1]}")
    return x @ w + b, (x, w)


def dense(x, w, b) -> np.ndarray:
    return dense_forward(x, w, b)[0]


def dense_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu(x) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dout, mask):
    return dout * mask


# ---------------------------------------------------------------------------
# BatchNorm
# ---------------------------------------------------------------------------

@dataclass
class BNLayerState:
    """Per-channel running statistics and affine parameters of one BN layer."""

    mean: np.ndarray
    var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        n = self.mean.shape
        if not (self.var.shape == self.gamma.shape == self.beta.shape == n) or len(n) != 1:
            raise ShapeError("BN mean/var/gamma/beta must be 1-D with equal length")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        # stored as float32 on disk, so keep it float32-representable
        self.eps = float(np.float32(self.eps))
        if np.any(self.var < 0):
            raise ValueError("BN variance must be non-negative")

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, eps: float = 1e-5) -> "BNLayerState":
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype),
                   np.ones(channels, dtype), np.zeros(channels, dtype), eps)

    def with_stats(self, mean: np.ndarray, var: np.ndarray) -> "BNLayerState":
        return replace(self, mean=mean, var=var)


def batch_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population variance of (N, C, H, W), float64."""
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=(0, 2, 3))
    var = ((x64 - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
    return mean, var


def batchnorm_forward(x, state: BNLayerState, mode: str = "eval"):
    """Normalize x (N, C, H, W) per channel.

    In ``train`` mode the current batch statistics are used and returned in the
    cache (``cache["mean"]``, ``cache["var"]``); ``state`` is not modified.
    In ``eval`` mode ``state.mean`` / ``state.var`` are used.
    """
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ShapeError(f"batchnorm input {x.shape} does not match {state.channels} channels")
    dt = x.dtype
    g = state.gamma.astype(dt)[None, :, None, None]
    b = state.beta.astype(dt)[None, :, None, None]
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("train-mode batchnorm needs at least 2 samples")
        mean, var = batch_stats(x)
    elif mode == "eval":
        mean, var = state.mean, state.var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = (1.0 / np.sqrt(np.asarray(var, np.float64) + state.eps)).astype(dt)
    centered = x - np.asarray(mean).astype(dt)[None, :, None, None]
    cache = {"mode": mode, "inv_std": inv_std, "gamma": state.gamma.astype(dt),
             "mean": mean, "var": var}
    if mode == "eval":
        cache["xhat"] = centered * inv_std[None, :, None, None]
        centered *= (state.gamma.astype(dt) * inv_std)[None, :, None, None]
        return centered + b, cache
    xhat = centered * inv_std[None, :, None, None]
    cache["xhat"] = xhat
    return g * xhat + b, cache


def batchnorm(x, state: BNLayerState, mode: str = "eval") -> np.ndarray:
    if mode != "eval":
        return batchnorm_forward(x, state, mode)[0]
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ShapeError(f"batchnorm input {x.shape} does not match {state.channels} channels")
    dt = x.dtype
    inv_std = (1.0 / np.sqrt(np.asarray(state.var, np.float64) + state.eps)).astype(dt)
    out = x - state.mean.astype(dt)[None, :, None, None]
    out *= (state.gamma.astype(dt) * inv_std)[None, :, None, None]
    out += state.beta.astype(dt)[None, :, None, None]
    return out


def batchnorm_backward(dout, cache):
    """Returns (dx, dgamma, dbeta)."""
    xhat, inv_std, gamma = cache["xhat"], cache["inv_std"], cache["gamma"]
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if cache["mode"] == "eval":
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    dx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Loss and optimiser
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits.

    ``logits`` is (K,) with an int label, or (N, K) with N labels.  For a single
    sample the gradient is exactly softmax(logits) - onehot(label); for a batch
    it is divided by N.
    """
    single = logits.ndim == 1
    z = logits[None, :] if single else logits
    y = np.atleast_1d(np.asarray(labels))
    k = z.shape[1]
    if y.shape != (z.shape[0],):
        raise ShapeError(f"expected {z.shape[0]} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer) or np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"labels must be integers in [0, {k})")
    p = softmax(z)
    n = z.shape[0]
    loss = float(-np.log(np.maximum(p[np.arange(n), y], 1e-300)).mean())
    grad = p
    grad[np.arange(n), y] -= 1.0
    grad /= n
    grad = grad.astype(logits.dtype)
    return loss, (grad[0] if single else grad)


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """In-place SGD with a classical momentum buffer: v = m*v + g; p -= lr*v."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, p in params.items():
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * p
        if momentum:
            v = velocity.get(name)
            if v is None:
                v = np.zeros_like(p)
            v *= momentum
            v += g
            velocity[name] = v
            g = v
        p -= (lr * g).astype(p.dtype)
