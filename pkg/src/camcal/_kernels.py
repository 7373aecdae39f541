"""Hot inner kernels: bilinear resampling and pixel-affinity construction.

Each kernel has a pure-numpy implementation (``*_np``) and a numba-jitted
one (``*_nb``). The module-level dispatch names (``resize_plane`` etc.)
point at the numba versions when numba imports cleanly, unless the
environment variable ``CAMCAL_DISABLE_NUMBA=1`` forces the numpy path.
Both variants stay importable so ``benchmarks/bench_kernels.py`` can time
them against each other.

All kernels work in float64 and use a fixed per-output-pixel evaluation
order so the two backends agree bit-for-bit on resampling.
"""

from __future__ import annotations

import functools
import os

import numpy as np

_ENV_FLAG = "CAMCAL_DISABLE_NUMBA"


def _numba_disabled() -> bool:
    return os.environ.get(_ENV_FLAG, "").strip().lower() in {"1", "true", "yes"}


@functools.lru_cache(maxsize=64)
def resize_taps(n_src: int, n_dst: int):
    """Half-pixel-center sampling taps for one axis, borders clamped.

    Returns (i0, i1, frac): the two source indices bracketing each output
    coordinate and the interpolation fraction toward i1. Cached; callers
    must not mutate the returned arrays.
    """
    centers = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
    np.clip(centers, 0.0, n_src - 1.0, out=centers)
    i0 = np.floor(centers).astype(np.int64)
    frac = centers - i0
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, frac


# ---------------------------------------------------------------------------
# numpy implementations


def resize_plane_np(src, y0, y1, fy, x0, x1, fx):
    """Bilinear resample of a (H, W) plane onto the given taps."""
    wx0 = 1.0 - fx
    top = src[np.ix_(y0, x0)] * wx0 + src[np.ix_(y0, x1)] * fx
    bot = src[np.ix_(y1, x0)] * wx0 + src[np.ix_(y1, x1)] * fx
    return top * (1.0 - fy)[:, None] + bot * fy[:, None]


def resize_volume_np(src, y0, y1, fy, x0, x1, fx):
    """Channel-independent bilinear resample of a (H, W, D) volume."""
    wx0 = (1.0 - fx)[None, :, None]
    wx1 = fx[None, :, None]
    top = src[np.ix_(y0, x0)] * wx0 + src[np.ix_(y0, x1)] * wx1
    bot = src[np.ix_(y1, x0)] * wx0 + src[np.ix_(y1, x1)] * wx1
    return top * (1.0 - fy)[:, None, None] + bot * fy[:, None, None]


def resize_adjoint_plane_np(grad, y0, y1, fy, x0, x1, fx, h_src, w_src):
    """Adjoint of resize_plane: scatter output-pixel gradients back."""
    out = np.zeros((h_src, w_src), dtype=np.float64)
    wy0 = (1.0 - fy)[:, None]
    wy1 = fy[:, None]
    wx0 = (1.0 - fx)[None, :]
    wx1 = fx[None, :]
    np.add.at(out, (y0[:, None], x0[None, :]), grad * wy0 * wx0)
    np.add.at(out, (y0[:, None], x1[None, :]), grad * wy0 * wx1)
    np.add.at(out, (y1[:, None], x0[None, :]), grad * wy1 * wx0)
    np.add.at(out, (y1[:, None], x1[None, :]), grad * wy1 * wx1)
    return out


def affinity_matrix_np(feats):
    """Row-stochastic ReLU-cosine affinity between pixel feature vectors.

    feats: (N, D). Zero-norm rows fall back to an identity row so the
    matrix stays row-stochastic.
    """
    norms = np.sqrt((feats * feats).sum(axis=1))
    alive = norms > 0.0
    unit = np.where(alive, norms, 1.0)[:, None]
    normed = feats / unit
    sim = normed @ normed.T
    np.maximum(sim, 0.0, out=sim)
    sim[~alive, :] = 0.0
    sim[:, ~alive] = 0.0
    dead = np.flatnonzero(~alive)
    sim[dead, dead] = 1.0
    sim /= sim.sum(axis=1, keepdims=True)
    return sim


# ---------------------------------------------------------------------------
# numba implementations

try:  # pragma: no cover - exercised indirectly through the dispatchers
    if _numba_disabled():
        raise ImportError("numba disabled via " + _ENV_FLAG)
    from numba import njit

    @njit(cache=True)
    def resize_plane_nb(src, y0, y1, fy, x0, x1, fx):
        h_dst = y0.shape[0]
        w_dst = x0.shape[0]
        out = np.empty((h_dst, w_dst), dtype=np.float64)
        for i in range(h_dst):
            wy = fy[i]
            for j in range(w_dst):
                wx = fx[j]
                top = src[y0[i], x0[j]] * (1.0 - wx) + src[y0[i], x1[j]] * wx
                bot = src[y1[i], x0[j]] * (1.0 - wx) + src[y1[i], x1[j]] * wx
                out[i, j] = top * (1.0 - wy) + bot * wy
        return out

    @njit(cache=True)
    def resize_volume_nb(src, y0, y1, fy, x0, x1, fx):
        h_dst = y0.shape[0]
        w_dst = x0.shape[0]
        depth = src.shape[2]
        out = np.empty((h_dst, w_dst, depth), dtype=np.float64)
        for i in range(h_dst):
            wy = fy[i]
            for j in range(w_dst):
                wx = fx[j]
                for d in range(depth):
                    top = (
                        src[y0[i], x0[j], d] * (1.0 - wx)
                        + src[y0[i], x1[j], d] * wx
                    )
                    bot = (
                        src[y1[i], x0[j], d] * (1.0 - wx)
                        + src[y1[i], x1[j], d] * wx
                    )
                    out[i, j, d] = top * (1.0 - wy) + bot * wy
        return out

    @njit(cache=True)
    def resize_adjoint_plane_nb(grad, y0, y1, fy, x0, x1, fx, h_src, w_src):
        out = np.zeros((h_src, w_src), dtype=np.float64)
        h_dst = y0.shape[0]
        w_dst = x0.shape[0]
        for i in range(h_dst):
            wy1 = fy[i]
            wy0 = 1.0 - wy1
            for j in range(w_dst):
                wx1 = fx[j]
                wx0 = 1.0 - wx1
                g = grad[i, j]
                out[y0[i], x0[j]] += g * wy0 * wx0
                out[y0[i], x1[j]] += g * wy0 * wx1
                out[y1[i], x0[j]] += g * wy1 * wx0
                out[y1[i], x1[j]] += g * wy1 * wx1
        return out

    @njit(cache=True)
    def affinity_matrix_nb(feats):
        n, d = feats.shape
        norms = np.empty(n, dtype=np.float64)
        for i in range(n):
            s = 0.0
            for k in range(d):
                s += feats[i, k] * feats[i, k]
            norms[i] = np.sqrt(s)
        out = np.zeros((n, n), dtype=np.float64)
        for i in range(n):
            if norms[i] == 0.0:
                out[i, i] = 1.0
                continue
            row_sum = 0.0
            for j in range(n):
                if norms[j] == 0.0:
                    continue
                dot = 0.0
                for k in range(d):
                    dot += feats[i, k] * feats[j, k]
                c = dot / (norms[i] * norms[j])
                if c > 0.0:
                    out[i, j] = c
                    row_sum += c
            for j in range(n):
                out[i, j] /= row_sum
        return out

    BACKEND = "numba"
except ImportError:
    resize_plane_nb = None
    resize_volume_nb = None
    resize_adjoint_plane_nb = None
    affinity_matrix_nb = None
    BACKEND = "numpy"


if BACKEND == "numba":
    _resize_plane = resize_plane_nb
    _resize_volume = resize_volume_nb
    _resize_adjoint_plane = resize_adjoint_plane_nb
    _affinity_matrix = affinity_matrix_nb
else:
    _resize_plane = resize_plane_np
    _resize_volume = resize_volume_np
    _resize_adjoint_plane = resize_adjoint_plane_np
    _affinity_matrix = affinity_matrix_np


# ---------------------------------------------------------------------------
# dispatchers


def resize_plane(src, new_h, new_w):
    src = np.ascontiguousarray(src, dtype=np.float64)
    y0, y1, fy = resize_taps(src.shape[0], new_h)
    x0, x1, fx = resize_taps(src.shape[1], new_w)
    return _resize_plane(src, y0, y1, fy, x0, x1, fx)


def resize_volume(src, new_h, new_w):
    src = np.ascontiguousarray(src, dtype=np.float64)
    y0, y1, fy = resize_taps(src.shape[0], new_h)
    x0, x1, fx = resize_taps(src.shape[1], new_w)
    return _resize_volume(src, y0, y1, fy, x0, x1, fx)


def resize_adjoint_plane(grad, src_h, src_w):
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    y0, y1, fy = resize_taps(src_h, grad.shape[0])
    x0, x1, fx = resize_taps(src_w, grad.shape[1])
    return _resize_adjoint_plane(grad, y0, y1, fy, x0, x1, fx, src_h, src_w)


def affinity_matrix(feats):
    feats = np.ascontiguousarray(feats, dtype=np.float64)
    return _affinity_matrix(feats)
