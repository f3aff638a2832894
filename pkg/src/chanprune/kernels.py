"""Hot inner loops of the forward pass.

Two interchangeable implementations live here. The numba path builds
im2col blocks in compiled code and runs one GEMM per block, and pools with
a separable compiled loop; the pure-numpy path does one GEMM per kernel tap
and pools with whole-array maxima. numba is used when importable unless the environment
variable ``CHANPRUNE_DISABLE_NUMBA`` is set to a truthy value; tests and the
benchmark switch at runtime with :func:`use_backend`.

Both paths fix their accumulation order, so repeated runs are
bit-identical; the two paths agree to float32 rounding.
"""
from __future__ import annotations

import contextlib
import os

import numpy as np

try:
    import numba
    from numba import njit, prange

    if "NUMBA_THREADING_LAYER" not in os.environ:
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

__all__ = ["conv2d", "maxpool2d", "upsample2d", "backend", "use_backend", "available_backends"]


def _env_disabled():
    return os.environ.get("CHANPRUNE_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")


_backend = "numba" if numba is not None and not _env_disabled() else "numpy"


def backend() -> str:
    return _backend


def available_backends():
    return ("numba", "numpy") if numba is not None else ("numpy",)


@contextlib.contextmanager
def use_backend(name: str):
    global _backend
    if name not in available_backends():
        raise ValueError(f"backend {name!r} not available; have {available_backends()}")
    prev, _backend = _backend, name
    try:
        yield
    finally:
        _backend = prev


# ---------------------------------------------------------------- numpy path


def _conv2d_np(x, w, stride, pad, oh, ow):
    # one GEMM per kernel tap, accumulated in a fixed order
    f, c, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
    out = np.zeros((f, oh * ow), dtype=np.float32)
    for ky in range(k):
        for kx in range(k):
            patch = xp[:, ky:ky + stride * oh:stride, kx:kx + stride * ow:stride]
            out += taps[ky, kx] @ patch.reshape(c, oh * ow)
    return out.reshape(f, oh, ow)


def _padded(x, offset, need_h, need_w):
    c, h, w = x.shape
    xp = np.full((c, max(need_h, h + offset), max(need_w, w + offset)), -np.inf, dtype=np.float32)
    xp[:, offset:offset + h, offset:offset + w] = x
    return xp


def _maxpool2d_np(x, size, stride, offset, oh, ow):
    # separable: max over the window's columns, then over its rows
    xp = _padded(x, offset, (oh - 1) * stride + size, (ow - 1) * stride + size)
    cols = xp[:, :, 0:stride * ow:stride].copy()
    for kx in range(1, size):
        np.maximum(cols, xp[:, :, kx:kx + stride * ow:stride], out=cols)
    out = cols[:, 0:stride * oh:stride].copy()
    for ky in range(1, size):
        np.maximum(out, cols[:, ky:ky + stride * oh:stride], out=out)
    return out


# ---------------------------------------------------------------- numba path

# im2col buffers are built for blocks of output rows holding at most this many floats
_COLS_BUDGET = 1 << 24

if numba is not None:

    @njit(parallel=True, cache=True)
    def _im2col_nb(x, k, stride, pad, oy0, oy1, ow):
        c, h, w = x.shape
        rows = oy1 - oy0
        cols = np.zeros((c * k * k, rows * ow), dtype=np.float32)
        for r in prange(c * k * k):
            ci = r // (k * k)
            ky = (r // k) % k
            kx = r % k
            # output columns whose input column lies inside the image
            lo = max(0, (pad - kx + stride - 1) // stride)
            hi = min(ow, (w - 1 + pad - kx) // stride + 1)
            for oy in range(oy0, oy1):
                iy = oy * stride + ky - pad
                if iy < 0 or iy >= h:
                    continue
                base = (oy - oy0) * ow
                for ox in range(lo, hi):
                    cols[r, base + ox] = x[ci, iy, ox * stride + kx - pad]
        return cols

    @njit(cache=True)
    def _pool_padded_nb(xp, size, stride, oh, ow):
        # separable max on a -inf padded copy, so the loops carry no bounds checks
        c, hp, _ = xp.shape
        out = np.empty((c, oh, ow), dtype=np.float32)
        rowmax = np.empty((hp, ow), dtype=np.float32)
        for ch in range(c):
            for iy in range(hp):
                for ox in range(ow):
                    x0 = ox * stride
                    best = xp[ch, iy, x0]
                    for d in range(1, size):
                        best = max(best, xp[ch, iy, x0 + d])
                    rowmax[iy, ox] = best
            for oy in range(oh):
                y0 = oy * stride
                for ox in range(ow):
                    out[ch, oy, ox] = rowmax[y0, ox]
                for d in range(1, size):
                    for ox in range(ow):
                        out[ch, oy, ox] = max(out[ch, oy, ox], rowmax[y0 + d, ox])
        return out


def _maxpool2d_nb(x, size, stride, offset, oh, ow):
    xp = _padded(x, offset, (oh - 1) * stride + size, (ow - 1) * stride + size)
    return _pool_padded_nb(xp, size, stride, oh, ow)


def _conv2d_nb(x, w, stride, pad, oh, ow):
    f, c, k, _ = w.shape
    wm = w.reshape(f, c * k * k)
    out = np.empty((f, oh * ow), dtype=np.float32)
    block = max(1, _COLS_BUDGET // max(1, c * k * k * ow))
    for oy0 in range(0, oh, block):
        oy1 = min(oh, oy0 + block)
        cols = _im2col_nb(x, k, stride, pad, oy0, oy1, ow)
        out[:, oy0 * ow:oy1 * ow] = wm @ cols
    return out.reshape(f, oh, ow)


# ---------------------------------------------------------------- public API


def conv2d(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Cross-correlate ``x`` (c, h, w) with ``w`` (f, c, k, k), zero padding ``pad``."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    w = np.ascontiguousarray(w, dtype=np.float32)
    k = w.shape[2]
    oh = (x.shape[1] + 2 * pad - k) // stride + 1
    ow = (x.shape[2] + 2 * pad - k) // stride + 1
    if _backend == "numba":
        return _conv2d_nb(x, w, stride, pad, oh, ow)
    return _conv2d_np(x, w, stride, pad, oh, ow)


def maxpool2d(x: np.ndarray, size: int, stride: int, padding: int | None = None) -> np.ndarray:
    """Darknet max pooling; ``padding`` is the total pad (default ``size - 1``),
    split with ``padding // 2`` on the top/left. Padded cells never win."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    if padding is None:
        padding = size - 1
    offset = padding // 2
    oh = (x.shape[1] + padding - size) // stride + 1
    ow = (x.shape[2] + padding - size) // stride + 1
    if _backend == "numba":
        return _maxpool2d_nb(x, size, stride, offset, oh, ow)
    return _maxpool2d_np(x, size, stride, offset, oh, ow)


def upsample2d(x: np.ndarray, stride: int) -> np.ndarray:
    """Nearest-neighbour upsampling by an integer factor."""
    return np.repeat(np.repeat(x, stride, axis=1), stride, axis=2)
