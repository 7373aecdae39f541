"""Trainable state (per-class weights + projection), loss, and gradients.

The classifier is linear: logit of class c is dot(gap(features), W_c).
Gradients are hand-derived; plain gradient descent keeps every weight an
exact sum of per-sample gradient contributions, which the analysis module
decomposes onto the feature basis.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimMismatchError
from .maps import gap, sigmoid

_LOG_CLAMP = 1e-12
_CKPT_MAGIC = b"CCKP"


@dataclass
class ClassifierState:
    weights: np.ndarray      # (C, D)
    projection: np.ndarray   # (D, P), applied to features before prototypes
    proto_threshold: float = 0.3

    @classmethod
    def zeros(cls, class_count: int, depth: int, proj_dim: int | None = None,
              proto_threshold: float = 0.3) -> "ClassifierState":
        """Zero weights (so accumulated gradients are the whole story) and
        an identity-like projection."""
        proj_dim = depth if proj_dim is None else proj_dim
        return cls(
            weights=np.zeros((class_count, depth)),
            projection=np.eye(depth, proj_dim),
            proto_threshold=proto_threshold,
        )

    @property
    def class_count(self) -> int:
        return self.weights.shape[0]

    @property
    def depth(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "ClassifierState":
        return ClassifierState(
            self.weights.copy(), self.projection.copy(), self.proto_threshold
        )


@dataclass
class GradientBundle:
    d_weights: np.ndarray
    d_projection: np.ndarray
    loss_value: float

    @classmethod
    def zeros_like(cls, state: ClassifierState) -> "GradientBundle":
        return cls(
            np.zeros_like(state.weights), np.zeros_like(state.projection), 0.0
        )

    def add_(self, other: "GradientBundle", scale: float = 1.0) -> "GradientBundle":
        self.d_weights += scale * other.d_weights
        self.d_projection += scale * other.d_projection
        self.loss_value += scale * other.loss_value
        return self


def logits(state: ClassifierState, features: np.ndarray) -> np.ndarray:
    """Per-class logits: dot(gap(features), W_c)."""
    if features.shape[-1] != state.depth:
        raise DimMismatchError(
            f"feature depth {features.shape[-1]} != weight depth {state.depth}"
        )
    return state.weights @ gap(features)


def cls_loss(z: np.ndarray, y: np.ndarray) -> float:
    """Multi-label binary log loss, averaged over classes.

    Probabilities are clamped at 1e-12 before the log so saturated
    predictions cannot produce infinities.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z.shape != y.shape:
        raise DimMismatchError("logits and labels differ in length")
    p = sigmoid(z)
    pos = np.log(np.maximum(p, _LOG_CLAMP))
    neg = np.log(np.maximum(1.0 - p, _LOG_CLAMP))
    return float(-(y * pos + (1.0 - y) * neg).mean())


def cls_grad(state: ClassifierState, features: np.ndarray, y: np.ndarray) -> GradientBundle:
    """Loss and analytic gradient: dL/dz_c = (sigmoid(z_c) - y_c) / C,
    chained through the pooling into dL/dW_c = dL/dz_c * gap(features)."""
    z = logits(state, features)
    y = np.asarray(y, dtype=np.float64)
    dz = (sigmoid(z) - y) / state.class_count
    pooled = gap(features)
    return GradientBundle(
        d_weights=np.outer(dz, pooled),
        d_projection=np.zeros_like(state.projection),
        loss_value=cls_loss(z, y),
    )


def sgd_step(state: ClassifierState, grads: GradientBundle, lr: float) -> ClassifierState:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    return ClassifierState(
        weights=state.weights - lr * grads.d_weights,
        projection=state.projection - lr * grads.d_projection,
        proto_threshold=state.proto_threshold,
    )


# ---------------------------------------------------------------------------
# checkpoints: JSON header + raw float64 payload


def save_checkpoint(path, state: ClassifierState, step: int = 0) -> None:
    header = json.dumps(
        {
            "version": 1,
            "class_count": state.class_count,
            "depth": state.depth,
            "proj_dim": state.projection.shape[1],
            "proto_threshold": state.proto_threshold,
            "step": step,
        }
    ).encode("ascii")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(state.weights, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(state.projection, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ClassifierState, int]:
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a camcal checkpoint")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8:8 + hlen].decode("ascii"))
    if header["version"] != 1:
        raise ValueError("unsupported checkpoint version")
    c, d, p = header["class_count"], header["depth"], header["proj_dim"]
    offset = 8 + hlen
    weights = np.frombuffer(raw, dtype="<f8", count=c * d, offset=offset)
    offset += c * d * 8
    projection = np.frombuffer(raw, dtype="<f8", count=d * p, offset=offset)
    state = ClassifierState(
        weights=weights.reshape(c, d).copy(),
        projection=projection.reshape(d, p).copy(),
        proto_threshold=header["proto_threshold"],
    )
    return state, header["step"]
