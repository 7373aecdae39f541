"""Dense map primitives: pooling, resampling, normalization, distances.

Maps are plain float64 numpy arrays: a feature map is (H, W, D), a scalar
map is (H, W), a binary mask is (H, W) with values in {0, 1}. All
arithmetic is 64-bit and summation runs in row-major order, so results
are reproducible run to run.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import EmptyMaskError, ShapeMismatchError, ZeroVectorError


def check_finite(arr: np.ndarray, name: str = "map") -> np.ndarray:
    """Reject NaN/Inf; maps never admit or produce non-finite values."""
    arr = np.asarray(arr, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def gap(feature_map: np.ndarray) -> np.ndarray:
    """Global average pooling: per-channel mean over all pixels."""
    fmap = check_finite(feature_map, "feature map")
    if fmap.ndim != 3:
        raise ShapeMismatchError(f"expected (H, W, D), got {fmap.shape}")
    return fmap.mean(axis=(0, 1))


def masked_average_pool(feature_map: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean feature vector over the active pixels of a binary mask."""
    fmap = check_finite(feature_map, "feature map")
    mask = np.asarray(mask)
    if mask.shape != fmap.shape[:2]:
        raise ShapeMismatchError(
            f"mask {mask.shape} does not match map {fmap.shape[:2]}"
        )
    active = mask != 0
    if not active.any():
        raise EmptyMaskError("mask has no active pixels")
    return fmap[active].mean(axis=0)


def bilinear_resize(arr: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel centers and clamped borders.

    Source coordinate of output pixel j is (j + 0.5) * (src / dst) - 0.5,
    clipped to the valid range; channels are resampled independently.
    Resizing to the input shape returns the input values exactly.
    """
    arr = check_finite(arr)
    if new_h < 1 or new_w < 1:
        raise ValueError("target size must be at least 1x1")
    if arr.ndim == 2:
        return _kernels.resize_plane(arr, new_h, new_w)
    if arr.ndim == 3:
        return _kernels.resize_volume(arr, new_h, new_w)
    raise ShapeMismatchError(f"expected 2-d or 3-d array, got {arr.shape}")


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity of two vectors, in [-1, 1]."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroVectorError("cosine of a zero-norm vector is undefined")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def max_normalize(plane: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Divide a nonnegative map by its spatial max plus eps.

    An all-zero map stays all-zero (also when eps == 0).
    """
    plane = check_finite(plane, "scalar map")
    peak = plane.max() if plane.size else 0.0
    if peak <= 0.0:
        return np.zeros_like(plane)
    return plane / (peak + eps)


def l1_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute difference over pixels (resolution-independent)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).mean())


# ---------------------------------------------------------------------------
# serialization: flat binary maps and PGM masks

_DIM = struct.Struct("<I")


def save_map(path, arr: np.ndarray) -> None:
    """Write a map as little-endian uint32 dims + row-major float64 data."""
    arr = check_finite(arr)
    if arr.ndim not in (2, 3):
        raise ShapeMismatchError(f"expected 2-d or 3-d array, got {arr.shape}")
    with open(path, "wb") as fh:
        for dim in arr.shape:
            fh.write(_DIM.pack(dim))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_feature_map(path) -> np.ndarray:
    return _load_map(path, 3)


def load_scalar_map(path) -> np.ndarray:
    return _load_map(path, 2)


def _load_map(path, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 * ndim
    dims = [ _DIM.unpack_from(raw, 4 * i)[0] for i in range(ndim) ]
    count = int(np.prod(dims))
    if len(raw) != header + 8 * count:
        raise ValueError(f"{path}: size does not match a {ndim}-d map header")
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=header)
    return data.reshape(dims).astype(np.float64)


def save_pgm(path, values: np.ndarray) -> None:
    """Write uint8 values as a binary PGM (P5, maxval 255)."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ShapeMismatchError("PGM wants a 2-d array")
    if values.min() < 0 or values.max() > 255:
        raise ValueError("PGM values must be in [0, 255]")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(values.astype(np.uint8).tobytes())


def load_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != ord("\n"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ValueError(f"{path}: expected maxval 255, got {maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=pos)
    return data.reshape(h, w).copy()
