"""Activation-map generation and its backprop.

Two map families share one stack layout of C+1 channels (foreground
classes 1..C, background last):

* classifier-weight maps: per class, max-normalized ReLU of pixelwise
  feature/weight dot products, optionally smoothed by a pixel-affinity
  refinement; the background channel is 1 minus the foreground max, so
  background + max(foreground) == 1 at every pixel.
* prototype maps: ReLU cosine between projected pixel features and a
  per-class prototype pooled from the weight map's thresholded region.

The forward passes record traces so the consistency losses can push
gradients back into the weights (through normalization, refinement, and
the background channel) and into the projection (through the cosine).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .classifier import ClassifierState
from .errors import DimMismatchError, ShapeMismatchError, ZeroVectorError
from .maps import max_normalize, save_pgm
from .synthworld import SyntheticScene

CAM_NORM_EPS = 1e-5

KIND_WEIGHT = "classifier_weight"
KIND_PROTO = "prototype"
KIND_FINAL = "final"


@dataclass
class ActivationStack:
    """(C+1, H, W) activation channels: classes 1..C, background last."""

    data: np.ndarray
    kind: str

    @property
    def class_count(self) -> int:
        return self.data.shape[0] - 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1:]

    def foreground(self, cls: int) -> np.ndarray:
        if not 1 <= cls <= self.class_count:
            raise IndexError(f"class {cls} outside 1..{self.class_count}")
        return self.data[cls - 1]

    @property
    def background(self) -> np.ndarray:
        return self.data[-1]

    def copy(self) -> "ActivationStack":
        return ActivationStack(self.data.copy(), self.kind)


def _assemble(fg: np.ndarray, bg: np.ndarray, h: int, w: int, kind: str) -> ActivationStack:
    c = fg.shape[1]
    data = np.empty((c + 1, h, w))
    data[:c] = fg.T.reshape(c, h, w)
    data[c] = bg.reshape(h, w)
    return ActivationStack(data=data, kind=kind)


# ---------------------------------------------------------------------------
# pixel-affinity refinement


def pcm_refine(raw_cam: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Smooth a CAM by row-stochastic ReLU-cosine pixel affinity.

    Zero-feature pixels keep their own value (identity affinity row); the
    result is re-normalized to peak 1 (all-zero input stays all-zero).
    """
    raw_cam = np.asarray(raw_cam, dtype=np.float64)
    if raw_cam.shape != features.shape[:2]:
        raise ShapeMismatchError("CAM and feature grid disagree")
    aff = _kernels.affinity_matrix(features.reshape(-1, features.shape[2]))
    out = aff @ raw_cam.ravel()
    return max_normalize(out, 0.0).reshape(raw_cam.shape)


# ---------------------------------------------------------------------------
# classifier-weight CAM


@dataclass
class WeightCamTrace:
    """Forward intermediates of the weight CAM for one scene (N = H*W)."""

    h: int
    w: int
    feats2d: np.ndarray          # (N, D)
    raw: np.ndarray              # (N, C) pixel/weight dot products
    act: np.ndarray              # (N, C) after ReLU
    m1: np.ndarray               # (C,) spatial max of act
    p_star: np.ndarray           # (C,) argmax pixel of act
    use_pcm: bool
    affinity: np.ndarray | None  # (N, N) row-stochastic, constant wrt W
    v: np.ndarray | None         # (N, C) affinity-smoothed channels
    m2: np.ndarray | None        # (C,) spatial max of v
    alive2: np.ndarray | None    # (C,) channels with positive max
    q_star: np.ndarray | None    # (C,) argmax pixel of v
    fg: np.ndarray               # (N, C) final foreground channels
    bg: np.ndarray               # (N,) 1 - max over foreground
    amax: np.ndarray             # (N,) first argmax class index per pixel

    def stack(self) -> ActivationStack:
        return _assemble(self.fg, self.bg, self.h, self.w, KIND_WEIGHT)


def weight_cam_trace(
    state: ClassifierState,
    features: np.ndarray,
    use_pcm: bool = False,
    affinity: np.ndarray | None = None,
) -> WeightCamTrace:
    h, w, d = features.shape
    if d != state.depth:
        raise DimMismatchError(f"feature depth {d} != weight depth {state.depth}")
    feats2d = np.ascontiguousarray(features.reshape(-1, d))
    raw = feats2d @ state.weights.T
    act = np.maximum(raw, 0.0)
    m1 = act.max(axis=0)
    p_star = act.argmax(axis=0)
    fg = act / (m1 + CAM_NORM_EPS)  # dead channels stay exactly zero
    v = m2 = alive2 = q_star = None
    if use_pcm:
        if affinity is None:
            affinity = _kernels.affinity_matrix(feats2d)
        v = affinity @ fg
        m2 = v.max(axis=0)
        q_star = v.argmax(axis=0)
        alive2 = m2 > 0.0
        fg = np.where(alive2, v / np.where(alive2, m2, 1.0), 0.0)
    else:
        affinity = None
    bg = 1.0 - fg.max(axis=1)
    amax = fg.argmax(axis=1)
    return WeightCamTrace(
        h=h, w=w, feats2d=feats2d, raw=raw, act=act, m1=m1, p_star=p_star,
        use_pcm=use_pcm, affinity=affinity, v=v, m2=m2, alive2=alive2,
        q_star=q_star, fg=fg, bg=bg, amax=amax,
    )


def weight_cam_backward(
    trace: WeightCamTrace,
    g_fg: np.ndarray,
    g_bg: np.ndarray | None = None,
) -> np.ndarray:
    """Backprop upstream channel gradients to d/dW.

    g_fg is (N, C); g_bg, when given, is (N,) and flows through
    bg = 1 - fg[p, amax(p)] into the per-pixel argmax foreground channel.
    Normalization maxima and the ReLU use their subgradients at the
    recorded argmax/positivity pattern.
    """
    n, c = trace.raw.shape
    g = np.array(g_fg, dtype=np.float64, copy=True)
    if g_bg is not None:
        g[np.arange(n), trace.amax] -= g_bg
    cols = np.arange(c)
    if trace.use_pcm:
        denom2 = np.where(trace.alive2, trace.m2, 1.0)
        s2 = (g * trace.v).sum(axis=0)
        gv = np.where(trace.alive2, g / denom2, 0.0)
        gv[trace.q_star, cols] -= np.where(trace.alive2, s2 / denom2**2, 0.0)
        gu = trace.affinity.T @ gv
    else:
        gu = g
    denom1 = trace.m1 + CAM_NORM_EPS
    s1 = (gu * trace.act).sum(axis=0)
    ga = gu / denom1
    ga[trace.p_star, cols] -= s1 / denom1**2
    graw = np.where(trace.raw > 0.0, ga, 0.0)
    return graw.T @ trace.feats2d


def classifier_weight_cam(
    state: ClassifierState,
    features: np.ndarray,
    use_pcm: bool = False,
) -> ActivationStack:
    return weight_cam_trace(state, features, use_pcm=use_pcm).stack()


# ---------------------------------------------------------------------------
# prototypes


def extract_prototypes(
    state: ClassifierState,
    scene: SyntheticScene,
    stack: ActivationStack,
) -> dict[int, np.ndarray]:
    """Masked-average-pool projected features over thresholded channels.

    Keys are the scene's present classes plus 0 for background. A present
    class whose thresholded mask is empty falls back to its single argmax
    pixel, so every labeled class always gets a prototype. Gradients never
    flow through this step: masks and prototypes act as constants.
    """
    if stack.kind != KIND_WEIGHT:
        raise ValueError("prototypes are pooled from the classifier-weight stack")
    proj = scene.features.reshape(-1, state.depth) @ state.projection
    thr = state.proto_threshold
    protos: dict[int, np.ndarray] = {}
    for cls in scene.present_classes:
        protos[cls] = _pool(proj, stack.foreground(cls).ravel(), thr)
    protos[0] = _pool(proj, stack.background.ravel(), thr)
    return protos


def _pool(proj: np.ndarray, channel: np.ndarray, thr: float) -> np.ndarray:
    sel = channel >= thr
    if not sel.any():
        return proj[channel.argmax()].copy()
    return proj[sel].mean(axis=0)


@dataclass
class ProtoCamTrace:
    """Forward intermediates of the prototype CAM for one scene."""

    h: int
    w: int
    class_count: int
    feats2d: np.ndarray       # (N, D)
    ids: list[int]            # channel order: sorted present classes, then 0
    proj_norms: np.ndarray    # (N,)
    proj_unit: np.ndarray     # (N, P) zero rows for zero-norm pixels
    proto_unit: np.ndarray    # (K, P)
    cos: np.ndarray           # (N, K)
    channels: np.ndarray      # (N, K) ReLU of cos

    def stack(self) -> ActivationStack:
        data = np.zeros((self.class_count + 1, self.h, self.w))
        for k, cid in enumerate(self.ids):
            pos = self.class_count if cid == 0 else cid - 1
            data[pos] = self.channels[:, k].reshape(self.h, self.w)
        return ActivationStack(data=data, kind=KIND_PROTO)


def prototype_cam_trace(
    state: ClassifierState,
    features: np.ndarray,
    protos: dict[int, np.ndarray],
) -> ProtoCamTrace:
    if not protos:
        raise ValueError("no prototypes given")
    h, w, d = features.shape
    feats2d = np.ascontiguousarray(features.reshape(-1, d))
    proj = feats2d @ state.projection
    norms = np.linalg.norm(proj, axis=1)
    alive = norms > 0.0
    unit = proj / np.where(alive, norms, 1.0)[:, None]
    unit[~alive] = 0.0
    ids = sorted(k for k in protos if k != 0)
    if 0 in protos:
        ids.append(0)
    pmat = np.stack([np.asarray(protos[i], dtype=np.float64) for i in ids])
    pnorms = np.linalg.norm(pmat, axis=1)
    if (pnorms == 0.0).any():
        bad = [i for i, nrm in zip(ids, pnorms) if nrm == 0.0]
        raise ZeroVectorError(f"zero-norm prototype for channel(s) {bad}")
    proto_unit = pmat / pnorms[:, None]
    cos = unit @ proto_unit.T
    return ProtoCamTrace(
        h=h, w=w, class_count=state.class_count, feats2d=feats2d, ids=ids,
        proj_norms=norms, proj_unit=unit, proto_unit=proto_unit,
        cos=cos, channels=np.maximum(cos, 0.0),
    )


def proto_cam_backward(trace: ProtoCamTrace, g_channels: np.ndarray) -> np.ndarray:
    """Backprop upstream (N, K) channel gradients to d/dProjection.

    Prototypes are constants; the gradient flows only through the
    projected pixel features inside the cosine.
    """
    gcos = np.where(trace.cos > 0.0, g_channels, 0.0)
    gproj = gcos @ trace.proto_unit
    gproj -= (gcos * trace.cos).sum(axis=1, keepdims=True) * trace.proj_unit
    alive = trace.proj_norms > 0.0
    gproj = np.where(alive[:, None], gproj / np.where(alive, trace.proj_norms, 1.0)[:, None], 0.0)
    return trace.feats2d.T @ gproj


def prototype_cam(
    state: ClassifierState,
    features: np.ndarray,
    protos: dict[int, np.ndarray],
) -> ActivationStack:
    return prototype_cam_trace(state, features, protos).stack()


# ---------------------------------------------------------------------------
# combination and decoding


def final_cam(weight_stack: ActivationStack, proto_stack: ActivationStack) -> ActivationStack:
    if weight_stack.data.shape != proto_stack.data.shape:
        raise ShapeMismatchError("stacks differ in shape")
    return ActivationStack(weight_stack.data + proto_stack.data, KIND_FINAL)


def decode_mask(stack: ActivationStack) -> np.ndarray:
    """Per-pixel argmax over all channels; ties go to the lower class id
    (background decodes as 0)."""
    ordered = np.concatenate([stack.data[-1:], stack.data[:-1]], axis=0)
    return ordered.argmax(axis=0).astype(np.int64)


def keep_present(stack: ActivationStack, present) -> ActivationStack:
    """Zero foreground channels of classes not in ``present``.

    Decoding pseudo-labels assumes scene-level labels are known, so absent
    classes never compete in the argmax.
    """
    out = stack.copy()
    keep = set(present)
    for cls in range(1, stack.class_count + 1):
        if cls not in keep:
            out.data[cls - 1] = 0.0
    return out


def export_stack(stack: ActivationStack, out_dir, prefix: str,
                 threshold: float | None = None) -> None:
    """Write each channel as a PGM (values x255, clamped) + JSON sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = [f"class_{c:02d}" for c in range(1, stack.class_count + 1)] + ["background"]
    for name, plane in zip(names, stack.data):
        img = np.clip(plane * 255.0, 0.0, 255.0).astype(np.uint8)
        save_pgm(out / f"{prefix}_{name}.pgm", img)
    sidecar = {"kind": stack.kind, "channels": names}
    if threshold is not None:
        sidecar["threshold"] = threshold
    (out / f"{prefix}_meta.json").write_text(json.dumps(sidecar, indent=1))
