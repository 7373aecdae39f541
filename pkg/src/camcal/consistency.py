"""Distribution-weighted consistency training.

The method: per-class distribution coefficients turn pairwise sample-count
gaps into consistency-loss weights; an image bank re-samples recent scenes
so rare classes are optimized more often; two consistency losses pull the
classifier-weight CAM toward the prototype CAM and toward its own
down-scaled version. The combined objective adds both to the
classification loss.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import _kernels
from .cams import (
    extract_prototypes,
    prototype_cam_trace,
    proto_cam_backward,
    weight_cam_backward,
    weight_cam_trace,
)
from .classifier import ClassifierState, GradientBundle, cls_grad, sgd_step
from .errors import ShapeMismatchError, TooSmallError
from .synthworld import Dataset, SyntheticScene, avg_classes_per_image, class_counts

LOG_COLUMNS = ("epoch", "L_cls", "L_DW_P", "L_DW_W", "total")


# ---------------------------------------------------------------------------
# distribution coefficients


@dataclass(frozen=True)
class DistributionCoefficients:
    """Per-class consistency weights derived from sample-count gaps.

    demand_c = sum_i |n_c - n_i| / (n_c + extra); the scaling factor makes
    the weights sum to the class count. Uniform counts are the degenerate
    case: every demand is zero, so all weights are defined as zero.
    """

    counts: np.ndarray
    extra: float            # estimated re-sampled additions per class
    demands: np.ndarray
    scaling: float
    values: np.ndarray

    @property
    def class_count(self) -> int:
        return self.counts.shape[0]


def estimate_extra_samples(
    bank_draws: int, avg_classes: float, iters_per_epoch: int, class_count: int
) -> float:
    """Expected extra appearances per class added by bank re-sampling in
    one epoch: draws * avg classes per image * iterations / classes."""
    if min(bank_draws, iters_per_epoch, class_count) < 0 or avg_classes < 0:
        raise ValueError("inputs must be nonnegative")
    return bank_draws * avg_classes * iters_per_epoch / class_count


def distribution_coefficients(counts, extra: float = 0.0) -> DistributionCoefficients:
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0 or (counts < 1).any():
        raise ValueError("counts must be nonempty and >= 1")
    gaps = np.abs(counts[:, None] - counts[None, :]).sum(axis=1)
    demands = gaps / (counts + extra)
    total = demands.sum()
    if total == 0.0:
        scaling = 0.0
        values = np.zeros_like(demands)
    else:
        scaling = counts.size / total
        values = scaling * demands
    return DistributionCoefficients(
        counts=counts.astype(np.int64),
        extra=float(extra),
        demands=demands,
        scaling=float(scaling),
        values=values,
    )


# ---------------------------------------------------------------------------
# image bank


class ImageBank:
    """One slot per foreground class holding the last seen scene with it."""

    def __init__(self, class_count: int, rng: np.random.Generator):
        self.class_count = class_count
        self.slots: dict[int, SyntheticScene] = {}
        self.rng = rng

    def update(self, scenes) -> None:
        """Batch order matters: the last scene containing c wins slot c."""
        for scene in scenes:
            for cls in scene.present_classes:
                self.slots[cls] = scene

    def sample(self, k: int) -> list[SyntheticScene]:
        """k uniform draws (with replacement) over the filled slots."""
        filled = sorted(self.slots)
        if not filled or k <= 0:
            return []
        picks = self.rng.integers(0, len(filled), size=k)
        return [self.slots[filled[i]] for i in picks]


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 0.1
    seed: int = 0
    bank_draws: int = 4          # scenes re-sampled from the bank per batch
    scale_factor: float = 0.5
    use_bank: bool = True
    use_proto_consistency: bool = True
    use_scale_consistency: bool = True
    dc_in_proto: bool = True     # weight the prototype-consistency terms
    dc_in_scale: bool = True     # weight the down-scale consistency terms
    use_pcm: bool = False
    proto_threshold: float = 0.3
    proj_dim: int | None = None

    def __post_init__(self):
        if not (0.0 < self.scale_factor < 1.0):
            raise ValueError("scale_factor must be in (0, 1)")
        if self.bank_draws < 0:
            raise ValueError("bank_draws must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


def _loss_weights(dc: DistributionCoefficients | None, present, weighted: bool) -> dict[int, float]:
    """Per-present-class loss weight: the DC value, or 1 when unweighted."""
    if weighted:
        if dc is None:
            raise ValueError("DC weighting requested without coefficients")
        return {c: float(dc.values[c - 1]) for c in present}
    return {c: 1.0 for c in present}


# ---------------------------------------------------------------------------
# consistency losses


def proto_consistency_loss(
    wtrace, ptrace, weights: dict[int, float]
) -> tuple[float, np.ndarray, np.ndarray]:
    """Weighted L1 between weight-CAM and prototype-CAM channels.

    Foreground terms run over the prototype trace's present classes with
    the given per-class weights; the background term is unweighted.
    Returns (loss, d_weights, d_projection). Prototype masks and vectors
    are constants; the weight gradient includes the background-channel
    path, the projection gradient flows through the cosine.
    """
    if (wtrace.h, wtrace.w) != (ptrace.h, ptrace.w):
        raise ShapeMismatchError("traces come from different grids")
    n = wtrace.fg.shape[0]
    c = wtrace.fg.shape[1]
    g_fg_w = np.zeros((n, c))
    g_chan_p = np.zeros_like(ptrace.channels)
    loss = 0.0
    for k, cid in enumerate(ptrace.ids):
        pchan = ptrace.channels[:, k]
        if cid == 0:
            wchan = wtrace.bg
            lam = 1.0
        else:
            wchan = wtrace.fg[:, cid - 1]
            lam = weights[cid]
        diff = wchan - pchan
        loss += lam * np.abs(diff).mean()
        grad = lam * np.sign(diff) / n
        if cid == 0:
            g_bg_w = grad
        else:
            g_fg_w[:, cid - 1] = grad
        g_chan_p[:, k] = -grad
    d_weights = weight_cam_backward(wtrace, g_fg_w, g_bg_w)
    d_projection = proto_cam_backward(ptrace, g_chan_p)
    return float(loss), d_weights, d_projection


def scale_consistency_loss(
    state: ClassifierState,
    features: np.ndarray,
    present,
    weights: dict[int, float],
    scale_factor: float = 0.5,
    use_pcm: bool = False,
) -> tuple[float, np.ndarray]:
    """Weighted L1 between the down-scaled weight CAM and the weight CAM
    of the down-scaled scene, over present foreground classes only.

    Gradients flow through both branches. Returns (loss, d_weights).
    """
    h, w, _ = features.shape
    if h < 2 or w < 2:
        raise TooSmallError("need at least a 2x2 scene to down-scale")
    small_h = max(1, int(round(h * scale_factor)))
    small_w = max(1, int(round(w * scale_factor)))
    wtrace = weight_cam_trace(state, features, use_pcm=use_pcm)
    small_feats = _kernels.resize_volume(features, small_h, small_w)
    strace = weight_cam_trace(state, small_feats, use_pcm=use_pcm)
    n_small = small_h * small_w
    cols = sorted(present)
    loss = 0.0
    g_small = np.zeros_like(strace.fg)
    g_big = np.zeros_like(wtrace.fg)
    for cid in cols:
        lam = weights[cid]
        down = _kernels.resize_plane(
            wtrace.fg[:, cid - 1].reshape(h, w), small_h, small_w
        )
        diff = down.ravel() - strace.fg[:, cid - 1]
        loss += lam * np.abs(diff).mean()
        grad = lam * np.sign(diff) / n_small
        g_big[:, cid - 1] = _kernels.resize_adjoint_plane(
            grad.reshape(small_h, small_w), h, w
        ).ravel()
        g_small[:, cid - 1] = -grad
    d_weights = weight_cam_backward(wtrace, g_big, None)
    d_weights += weight_cam_backward(strace, g_small, None)
    return float(loss), d_weights


# ---------------------------------------------------------------------------
# combined objective


def training_loss(
    state: ClassifierState,
    scene: SyntheticScene,
    y: np.ndarray,
    dc: DistributionCoefficients | None,
    cfg: TrainConfig,
) -> tuple[GradientBundle, dict[str, float]]:
    """Classification loss plus the enabled consistency losses for one
    scene. Returns the summed gradient bundle and the loss components."""
    bundle = cls_grad(state, scene.features, y)
    parts = {"L_cls": bundle.loss_value, "L_DW_P": 0.0, "L_DW_W": 0.0}
    present = scene.present_classes
    if cfg.use_proto_consistency:
        wtrace = weight_cam_trace(state, scene.features, use_pcm=cfg.use_pcm)
        protos = extract_prototypes(state, scene, wtrace.stack())
        ptrace = prototype_cam_trace(state, scene.features, protos)
        lam = _loss_weights(dc, present, cfg.dc_in_proto)
        loss_p, d_w, d_proj = proto_consistency_loss(wtrace, ptrace, lam)
        bundle.d_weights += d_w
        bundle.d_projection += d_proj
        bundle.loss_value += loss_p
        parts["L_DW_P"] = loss_p
    if cfg.use_scale_consistency:
        lam = _loss_weights(dc, present, cfg.dc_in_scale)
        loss_w, d_w = scale_consistency_loss(
            state, scene.features, present, lam,
            scale_factor=cfg.scale_factor, use_pcm=cfg.use_pcm,
        )
        bundle.d_weights += d_w
        bundle.loss_value += loss_w
        parts["L_DW_W"] = loss_w
    parts["total"] = bundle.loss_value
    return bundle, parts


def batch_gradients(
    state: ClassifierState,
    scenes,
    labels,
    dc: DistributionCoefficients | None,
    cfg: TrainConfig,
) -> tuple[GradientBundle, dict[str, float]]:
    """Mean of per-scene gradient bundles and loss components."""
    total = GradientBundle.zeros_like(state)
    sums = {"L_cls": 0.0, "L_DW_P": 0.0, "L_DW_W": 0.0, "total": 0.0}
    for scene, y in zip(scenes, labels):
        bundle, parts = training_loss(state, scene, y, dc, cfg)
        total.add_(bundle)
        for key in sums:
            sums[key] += parts[key]
    k = len(scenes)
    total.d_weights /= k
    total.d_projection /= k
    total.loss_value /= k
    return total, {key: val / k for key, val in sums.items()}


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, epoch: int, means: dict[str, float]) -> None:
        self.rows.append({"epoch": epoch, **{k: means[k] for k in LOG_COLUMNS[1:]}})

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
            for row in self.rows:
                writer.writerow(
                    [row["epoch"]] + [repr(row[c]) for c in LOG_COLUMNS[1:]]
                )


def train(dataset: Dataset, cfg: TrainConfig) -> tuple[ClassifierState, TrainLog]:
    """Seeded mini-batch gradient descent over the dataset.

    Per batch: the bank is updated with the batch, then ``bank_draws``
    uniform re-samples are appended before gradients are accumulated.
    Distribution coefficients are computed once up front from the dataset
    counts and the estimated re-sampling boost. Deterministic for a fixed
    (dataset, config): two runs produce bitwise-identical states and logs.
    """
    if not dataset.scenes:
        raise ValueError("empty dataset")
    spec = dataset.spec
    state = ClassifierState.zeros(
        spec.class_count,
        dataset.basis.depth,
        proj_dim=cfg.proj_dim,
        proto_threshold=cfg.proto_threshold,
    )
    n = len(dataset.scenes)
    iters = int(np.ceil(n / cfg.batch_size))
    draws = cfg.bank_draws if cfg.use_bank else 0
    extra = estimate_extra_samples(
        draws, avg_classes_per_image(dataset), iters, spec.class_count
    )
    dc = distribution_coefficients(class_counts(dataset), extra)
    rng = np.random.default_rng([cfg.seed, 0])
    bank = ImageBank(spec.class_count, np.random.default_rng([cfg.seed, 1]))
    log = TrainLog()
    labels = dataset.label_matrix
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = dict.fromkeys(LOG_COLUMNS[1:], 0.0)
        count = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            scenes = [dataset.scenes[i] for i in idx]
            ys = [labels[i] for i in idx]
            if cfg.use_bank:
                bank.update(scenes)
                for scene in bank.sample(cfg.bank_draws):
                    scenes.append(scene)
                    row = np.zeros(spec.class_count, dtype=np.int64)
                    row[[c - 1 for c in scene.present_classes]] = 1
                    ys.append(row)
            bundle, parts = batch_gradients(state, scenes, ys, dc, cfg)
            state = sgd_step(state, bundle, cfg.lr)
            for key in sums:
                sums[key] += parts[key] * len(scenes)
            count += len(scenes)
        log.append(epoch, {key: val / count for key, val in sums.items()})
    return state, log
