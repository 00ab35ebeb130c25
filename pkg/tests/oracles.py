"""Slow, obviously-correct reference implementations used only by the tests."""
import cmath

import numpy as np


def dft2_direct(x):
    """Quadruple-loop unnormalized 2-D DFT."""
    h, w = x.shape
    out = np.zeros((h, w), dtype=complex)
    for u in range(h):
        for v in range(w):
            acc = 0j
            for m in range(h):
                for n in range(w):
                    acc += x[m, n] * cmath.exp(-2j * cmath.pi * (u * m / h + v * n / w))
            out[u, v] = acc
    return out


def conv2d_loops(x, w, b=None, stride=1, pad=0):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, :, i, j] = np.einsum("nchw,fchw->nf", patch, w)
    if b is not None:
        out += b[None, :, None, None]
    return out


def numeric_grad(f, x, h=1e-3):
    """Central finite differences of scalar f at x (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)) + np.max(np.abs(b)), 1e-12))


def moments_direct(x):
    """Per-channel mean and population variance of (N, C, H, W) by explicit reshaping."""
    c = x.shape[1]
    flat = np.moveaxis(np.asarray(x, np.float64), 1, 0).reshape(c, -1)
    mean = flat.sum(axis=1) / flat.shape[1]
    var = ((flat - mean[:, None]) ** 2).sum(axis=1) / flat.shape[1]
    return mean, var
