"""Metrics and analysis: mIoU, weight decomposition, activation statistics.

Predictions are pseudo-masks decoded from activation stacks; the mIoU
follows the usual confusion-matrix form over background plus foreground
classes, excluding classes with an empty union from the mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cams import (
    KIND_FINAL,
    KIND_PROTO,
    KIND_WEIGHT,
    classifier_weight_cam,
    decode_mask,
    extract_prototypes,
    final_cam,
    keep_present,
    prototype_cam,
    weight_cam_trace,
)
from .classifier import ClassifierState
from .consistency import TrainConfig
from .errors import MismatchedClassesError, ShapeMismatchError
from .synthworld import Dataset


@dataclass
class IoUReport:
    """Per-class IoU over all pixels of all scenes; class 0 is background."""

    per_class_iou: dict[int, float]
    miou: float
    confusion: np.ndarray  # (C+1, C+1): rows ground truth, cols prediction


def confusion_matrix(preds, gts, class_count: int) -> np.ndarray:
    """Pooled (C+1)^2 counts; entry [g, p] counts pixels with truth g
    predicted as p."""
    total = np.zeros((class_count + 1) ** 2, dtype=np.int64)
    for pred, gt in zip(preds, gts):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeMismatchError("prediction and ground truth differ in shape")
        flat = (class_count + 1) * gt.ravel() + pred.ravel()
        total += np.bincount(flat, minlength=total.size)
    return total.reshape(class_count + 1, class_count + 1)


def miou_report(preds, gts, class_count: int) -> IoUReport:
    conf = confusion_matrix(preds, gts, class_count)
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - np.diag(conf)
    per_class = {}
    vals = []
    for cls in range(class_count + 1):
        if union[cls] > 0:
            iou = float(inter[cls] / union[cls])
            per_class[cls] = iou
            vals.append(iou)
    return IoUReport(
        per_class_iou=per_class,
        miou=float(np.mean(vals)) if vals else 0.0,
        confusion=conf,
    )


# ---------------------------------------------------------------------------
# pseudo-mask decoding over a dataset


def scene_stack(state: ClassifierState, scene, kind: str, use_pcm: bool = False):
    """Build the requested activation stack for one scene."""
    wstack = classifier_weight_cam(state, scene.features, use_pcm=use_pcm)
    if kind == KIND_WEIGHT:
        return wstack
    protos = extract_prototypes(state, scene, wstack)
    pstack = prototype_cam(state, scene.features, protos)
    if kind == KIND_PROTO:
        return pstack
    if kind == KIND_FINAL:
        return final_cam(wstack, pstack)
    raise ValueError(f"unknown stack kind {kind!r}")


def pseudo_masks(state: ClassifierState, dataset: Dataset, kind: str = KIND_FINAL,
                 use_pcm: bool = False) -> list[np.ndarray]:
    """Decode per-scene pseudo-label masks, restricted to each scene's
    labeled classes (scene-level labels are known to the labeler)."""
    out = []
    for scene in dataset.scenes:
        stack = scene_stack(state, scene, kind, use_pcm=use_pcm)
        out.append(decode_mask(keep_present(stack, scene.present_classes)))
    return out


def evaluate(state: ClassifierState, dataset: Dataset, kind: str = KIND_FINAL,
             use_pcm: bool = False) -> IoUReport:
    preds = pseudo_masks(state, dataset, kind, use_pcm=use_pcm)
    gts = [scene.gt_mask for scene in dataset.scenes]
    return miou_report(preds, gts, dataset.spec.class_count)


# ---------------------------------------------------------------------------
# weight decomposition


@dataclass
class WeightDecomposition:
    """Coefficients of each class weight on the orthonormal basis."""

    class_coefficients: np.ndarray  # (C, C): row c-1, col j-1 = dot(W_c, f_j)
    shared_coefficients: np.ndarray  # (C,): dot(W_c, shared direction)
    residual_norms: np.ndarray       # (C,) norm outside the basis span

    def own_coefficient(self, cls: int) -> float:
        return float(self.class_coefficients[cls - 1, cls - 1])

    def shared_coefficient(self, cls: int) -> float:
        return float(self.shared_coefficients[cls - 1])


def decompose_weights(state: ClassifierState, basis) -> WeightDecomposition:
    class_coeffs = state.weights @ basis.class_features.T
    shared = state.weights @ basis.shared_feature
    recon = class_coeffs @ basis.class_features + np.outer(shared, basis.shared_feature)
    residual = state.weights - recon
    return WeightDecomposition(
        class_coefficients=class_coeffs,
        shared_coefficients=shared,
        residual_norms=np.linalg.norm(residual, axis=1),
    )


# ---------------------------------------------------------------------------
# activation statistics


@dataclass
class ActivationReport:
    """Dot-product and activated-area statistics stratified by class.

    mean_dots[a-1, w-1] is the mean dot(pixel feature, W_w) over all
    pixels whose ground truth is class a. Area fractions are per-scene
    pixel fractions averaged over the scenes where the class is present;
    activation uses the prototype threshold on the normalized stacks.
    """

    mean_dots: np.ndarray      # (C, C)
    weight_area: np.ndarray    # (C,)
    proto_area: np.ndarray     # (C,)
    gt_area: np.ndarray        # (C,)
    threshold: float


def activation_report(state: ClassifierState, dataset: Dataset,
                      use_pcm: bool = False) -> ActivationReport:
    c = state.class_count
    thr = state.proto_threshold
    dot_sums = np.zeros((c, c))
    dot_counts = np.zeros(c)
    area_sums = {"weight": np.zeros(c), "proto": np.zeros(c), "gt": np.zeros(c)}
    scene_counts = np.zeros(c)
    for scene in dataset.scenes:
        h, w, _ = scene.features.shape
        npix = h * w
        feats2d = scene.features.reshape(npix, -1)
        dots = feats2d @ state.weights.T  # (N, C)
        gt = scene.gt_mask.ravel()
        for cls in range(1, c + 1):
            sel = gt == cls
            if sel.any():
                dot_sums[cls - 1] += dots[sel].sum(axis=0)
                dot_counts[cls - 1] += int(sel.sum())
        wtrace = weight_cam_trace(state, scene.features, use_pcm=use_pcm)
        wstack = wtrace.stack()
        protos = extract_prototypes(state, scene, wstack)
        pstack = prototype_cam(state, scene.features, protos)
        for cls in scene.present_classes:
            i = cls - 1
            scene_counts[i] += 1
            area_sums["weight"][i] += (wstack.foreground(cls) >= thr).mean()
            area_sums["proto"][i] += (pstack.foreground(cls) >= thr).mean()
            area_sums["gt"][i] += (scene.gt_mask == cls).mean()
    mean_dots = dot_sums / np.maximum(dot_counts, 1)[:, None]
    denom = np.maximum(scene_counts, 1)
    return ActivationReport(
        mean_dots=mean_dots,
        weight_area=area_sums["weight"] / denom,
        proto_area=area_sums["proto"] / denom,
        gt_area=area_sums["gt"] / denom,
        threshold=thr,
    )


# ---------------------------------------------------------------------------
# class-set gains


@dataclass
class ClassSetGains:
    """Mean per-class IoU gain between two runs, split by count terciles."""

    sets: dict[str, tuple[int, ...]]   # Many / Medium / Few -> class ids
    gains: dict[str, float]


def class_set_gains(run_a: IoUReport, run_b: IoUReport, counts) -> ClassSetGains:
    """Partition foreground classes into Many/Medium/Few by count terciles
    and average (run_b - run_a) per set. Assignment depends on counts
    only, never on class order."""
    counts = np.asarray(counts)
    class_ids = np.arange(1, counts.size + 1)
    for report in (run_a, run_b):
        missing = [c for c in class_ids if c not in report.per_class_iou]
        if missing:
            raise MismatchedClassesError(f"report lacks classes {missing}")
    order = class_ids[np.argsort(-counts, kind="stable")]
    chunks = np.array_split(order, 3)
    sets = {
        "Many": tuple(int(c) for c in chunks[0]),
        "Medium": tuple(int(c) for c in chunks[1]),
        "Few": tuple(int(c) for c in chunks[2]),
    }
    gains = {}
    for name, ids in sets.items():
        deltas = [
            run_b.per_class_iou[c] - run_a.per_class_iou[c] for c in ids
        ]
        gains[name] = float(np.mean(deltas)) if deltas else 0.0
    return ClassSetGains(sets=sets, gains=gains)
