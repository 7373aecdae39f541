"""Long-tailed synthetic scene generation with a known feature decomposition.

Every foreground pixel of class c carries ``a * class_feature_c +
s * shared_feature + noise`` for recorded per-pixel proportions (a, s);
background pixels carry noise only. The basis is orthonormal, so
projecting onto it recovers the proportions exactly in the noise-free
case, which is what the analysis tooling relies on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import DepthTooSmallError, InfeasibleSpecError
from .maps import load_feature_map, load_pgm, save_map, save_pgm

_PLACEMENT_TRIES = 60
_SCENE_TRIES = 100


@dataclass(frozen=True)
class FeatureBasis:
    """Orthonormal feature directions: one per class plus one shared."""

    depth: int
    class_features: np.ndarray  # (C, D), row c-1 belongs to class c
    shared_feature: np.ndarray  # (D,)

    @property
    def class_count(self) -> int:
        return self.class_features.shape[0]

    def gram_matrix(self) -> np.ndarray:
        vecs = np.vstack([self.class_features, self.shared_feature])
        return vecs @ vecs.T


def make_basis(class_count: int, depth: int, seed: int) -> FeatureBasis:
    """Random orthonormal basis (QR of a seeded Gaussian matrix)."""
    if depth < class_count + 1:
        raise DepthTooSmallError(
            f"depth {depth} cannot hold {class_count} class directions "
            "plus a shared one"
        )
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.normal(size=(depth, depth)))
    q = q * np.where(np.diag(r) >= 0.0, 1.0, -1.0)  # fix QR sign ambiguity
    return FeatureBasis(
        depth=depth,
        class_features=np.ascontiguousarray(q[:, :class_count].T),
        shared_feature=np.ascontiguousarray(q[:, class_count]),
    )


@dataclass
class LongTailSpec:
    """World parameters: class frequencies, mixing proportions, geometry."""

    class_count: int
    counts: tuple[int, ...]
    mean_discriminative: tuple[float, ...] = 0.6  # per-class mean of a
    mean_shared: tuple[float, ...] = 0.3          # per-class mean of s
    jitter: float = 0.05        # stddev of per-pixel proportion noise
    image_h: int = 24
    image_w: int = 24
    fg_area_range: tuple[float, float] = (0.06, 0.15)
    cooccurrence: float = 0.5   # fraction of non-head scenes that add a head object
    noise_std: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.counts = tuple(int(c) for c in np.atleast_1d(self.counts))
        self.mean_discriminative = _per_class(self.mean_discriminative, self.class_count)
        self.mean_shared = _per_class(self.mean_shared, self.class_count)
        self.fg_area_range = (float(self.fg_area_range[0]), float(self.fg_area_range[1]))
        if self.class_count < 1:
            raise ValueError("need at least one class")
        if len(self.counts) != self.class_count:
            raise ValueError("counts length must equal class_count")
        if any(c < 1 for c in self.counts):
            raise ValueError("every class needs at least one sample")
        for a, s in zip(self.mean_discriminative, self.mean_shared):
            if not (0.0 < a <= 1.0) or not (0.0 <= s < 1.0) or a + s > 1.0:
                raise ValueError(f"invalid mixing proportions ({a}, {s})")
        lo, hi = self.fg_area_range
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError("fg_area_range must sit inside (0, 1)")
        if not (0.0 <= self.cooccurrence <= 1.0):
            raise ValueError("cooccurrence must be in [0, 1]")
        if self.jitter < 0.0 or self.noise_std < 0.0:
            raise ValueError("jitter and noise_std must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LongTailSpec":
        data = dict(data)
        for key in ("counts", "mean_discriminative", "mean_shared", "fg_area_range"):
            if key in data and isinstance(data[key], list):
                data[key] = tuple(data[key])
        return cls(**data)


def _per_class(value, class_count: int) -> tuple[float, ...]:
    arr = np.atleast_1d(np.asarray(value, dtype=np.float64))
    if arr.size == 1:
        arr = np.full(class_count, float(arr[0]))
    if arr.size != class_count:
        raise ValueError("per-class parameter has the wrong length")
    return tuple(float(v) for v in arr)


@dataclass
class SyntheticScene:
    """One image-like sample with exact ground truth."""

    features: np.ndarray        # (H, W, D)
    gt_mask: np.ndarray         # (H, W) int64, 0 = background
    present_classes: tuple[int, ...]
    mix: np.ndarray | None = None  # (H, W, 2): discriminative/shared proportions

    @property
    def shape(self) -> tuple[int, int]:
        return self.gt_mask.shape


@dataclass
class Dataset:
    scenes: list[SyntheticScene]
    label_matrix: np.ndarray    # (n_scenes, C) in {0, 1}
    basis: FeatureBasis
    spec: LongTailSpec

    def __len__(self) -> int:
        return len(self.scenes)


def class_counts(dataset: Dataset) -> np.ndarray:
    """Number of scenes each class appears in."""
    if not dataset.scenes:
        raise ValueError("empty dataset")
    return dataset.label_matrix.sum(axis=0).astype(np.int64)


def avg_classes_per_image(dataset: Dataset) -> float:
    if not dataset.scenes:
        raise ValueError("empty dataset")
    return float(dataset.label_matrix.sum(axis=1).mean())


# ---------------------------------------------------------------------------
# generation


def generate(spec: LongTailSpec, basis: FeatureBasis | None = None) -> Dataset:
    """Generate a dataset whose realized per-class counts equal spec.counts.

    A seeded roster decides which classes co-occur: a ``spec.cooccurrence``
    fraction of every non-head class's scenes also contains a head-class
    object (head = most frequent class), with the head's own count as the
    budget. Co-occurring scenes consume one count from both classes, so
    counts stay exact.
    """
    if basis is None:
        basis = make_basis(spec.class_count, max(spec.class_count + 1, 16), spec.seed)
    if basis.class_count != spec.class_count:
        raise ValueError("basis does not match spec.class_count")
    rng = np.random.default_rng([spec.seed, 0x5EED])
    roster = _build_roster(spec, rng)
    scenes = [_make_scene(spec, basis, present, rng) for present in roster]
    labels = np.zeros((len(scenes), spec.class_count), dtype=np.int64)
    for i, scene in enumerate(scenes):
        labels[i, [c - 1 for c in scene.present_classes]] = 1
    return Dataset(scenes=scenes, label_matrix=labels, basis=basis, spec=spec)


def _build_roster(spec: LongTailSpec, rng) -> list[tuple[int, ...]]:
    counts = np.asarray(spec.counts, dtype=np.int64)
    head = int(np.argmax(counts)) + 1
    want = {
        c: int(np.floor(spec.cooccurrence * counts[c - 1]))
        for c in range(1, spec.class_count + 1)
        if c != head
    }
    budget = int(counts[head - 1])
    total = sum(want.values())
    if total > budget:
        scale = budget / total
        want = {c: int(np.floor(k * scale)) for c, k in want.items()}
        total = sum(want.values())
    roster: list[tuple[int, ...]] = []
    for c, k in want.items():
        roster.extend([(c, head) if c > head else (head, c)] * k)
        roster.extend([(c,)] * (int(counts[c - 1]) - k))
    roster.extend([(head,)] * (budget - total))
    roster = [tuple(sorted(p)) for p in roster]
    order = rng.permutation(len(roster))
    return [roster[i] for i in order]


def _object_dims(spec: LongTailSpec, rng) -> tuple[int, int]:
    lo, hi = spec.fg_area_range
    target = rng.uniform(lo, hi) * spec.image_h * spec.image_w
    aspect = rng.uniform(0.6, 1.6)
    oh = int(np.clip(round(np.sqrt(target * aspect)), 1, spec.image_h))
    ow = int(np.clip(round(target / oh), 1, spec.image_w))
    return oh, ow


def _make_scene(spec, basis, present, rng) -> SyntheticScene:
    h, w = spec.image_h, spec.image_w
    lo, _ = spec.fg_area_range
    if round(lo * h * w) > h * w:
        raise InfeasibleSpecError("objects larger than the image")
    for _ in range(_SCENE_TRIES):
        gt = np.zeros((h, w), dtype=np.int64)
        objects = list(present)
        extra_room = 3 - len(objects)
        if extra_room > 0:
            for _ in range(int(rng.integers(0, extra_room + 1))):
                objects.append(int(rng.choice(present)))
        ok = True
        for cls in objects:
            oh, ow = _object_dims(spec, rng)
            if oh > h or ow > w:
                ok = False
                break
            placed = False
            for _ in range(_PLACEMENT_TRIES):
                top = int(rng.integers(0, h - oh + 1))
                left = int(rng.integers(0, w - ow + 1))
                patch = gt[top:top + oh, left:left + ow]
                if (patch == 0).all():
                    patch[:] = cls
                    placed = True
                    break
            if not placed:  # allow overlap as a last resort
                top = int(rng.integers(0, h - oh + 1))
                left = int(rng.integers(0, w - ow + 1))
                gt[top:top + oh, left:left + ow] = cls
        if ok and all((gt == c).any() for c in present):
            return _render_scene(spec, basis, gt, present, rng)
    raise InfeasibleSpecError("could not place objects for classes " + repr(present))


def _render_scene(spec, basis, gt, present, rng) -> SyntheticScene:
    h, w = gt.shape
    feats = rng.normal(0.0, 1.0, size=(h, w, basis.depth))
    feats *= spec.noise_std
    mix = np.zeros((h, w, 2), dtype=np.float64)
    for cls in present:
        sel = gt == cls
        n = int(sel.sum())
        a_mean = spec.mean_discriminative[cls - 1]
        s_mean = spec.mean_shared[cls - 1]
        a = np.clip(a_mean + spec.jitter * rng.normal(size=n), 1e-6, 1.0)
        s = np.clip(s_mean + spec.jitter * rng.normal(size=n), 0.0, 1.0 - 1e-6)
        feats[sel] += np.outer(a, basis.class_features[cls - 1])
        feats[sel] += np.outer(s, basis.shared_feature)
        mix[sel, 0] = a
        mix[sel, 1] = s
    return SyntheticScene(
        features=feats,
        gt_mask=gt,
        present_classes=tuple(sorted(present)),
        mix=mix,
    )


# ---------------------------------------------------------------------------
# disk format: JSON manifest + per-scene binary features + PGM masks


def save_dataset(dataset: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scale = 255 // max(dataset.spec.class_count, 1)
    entries = []
    for i, scene in enumerate(dataset.scenes):
        fmap_name = f"scene_{i:05d}.fmap"
        mask_name = f"scene_{i:05d}.pgm"
        save_map(out / fmap_name, scene.features)
        save_pgm(out / mask_name, scene.gt_mask * scale)
        entries.append(
            {
                "features": fmap_name,
                "mask": mask_name,
                "present_classes": list(scene.present_classes),
            }
        )
    manifest = {
        "format_version": 1,
        "world": dataset.spec.to_dict(),
        "seed": dataset.spec.seed,
        "class_count": dataset.spec.class_count,
        "mask_scale": scale,
        "label_matrix": dataset.label_matrix.tolist(),
        "basis": {
            "depth": dataset.basis.depth,
            "class_features": dataset.basis.class_features.tolist(),
            "shared_feature": dataset.basis.shared_feature.tolist(),
        },
        "scenes": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_dataset(in_dir) -> Dataset:
    root = Path(in_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format_version") != 1:
        raise ValueError("unsupported dataset format version")
    spec = LongTailSpec.from_dict(manifest["world"])
    basis = FeatureBasis(
        depth=manifest["basis"]["depth"],
        class_features=np.asarray(manifest["basis"]["class_features"], dtype=np.float64),
        shared_feature=np.asarray(manifest["basis"]["shared_feature"], dtype=np.float64),
    )
    scale = manifest["mask_scale"]
    scenes = []
    for entry in manifest["scenes"]:
        feats = load_feature_map(root / entry["features"])
        gt = (load_pgm(root / entry["mask"]) // scale).astype(np.int64)
        scenes.append(
            SyntheticScene(
                features=feats,
                gt_mask=gt,
                present_classes=tuple(entry["present_classes"]),
            )
        )
    labels = np.asarray(manifest["label_matrix"], dtype=np.int64)
    return Dataset(scenes=scenes, label_matrix=labels, basis=basis, spec=spec)


# ---------------------------------------------------------------------------
# stock worlds


def geometric_counts(head: int, tail: int, class_count: int) -> tuple[int, ...]:
    """Per-class counts decaying geometrically from head to tail."""
    if class_count == 1:
        return (head,)
    ratio = (tail / head) ** (1.0 / (class_count - 1))
    return tuple(int(round(head * ratio**i)) for i in range(class_count))


def default_world(seed: int = 0, **overrides) -> LongTailSpec:
    """The stock long-tailed world used by the experiment harness."""
    params = dict(
        class_count=6,
        counts=geometric_counts(200, 10, 6),
        mean_discriminative=0.6,
        mean_shared=0.3,
        image_h=24,
        image_w=24,
        seed=seed,
    )
    params.update(overrides)
    return LongTailSpec(**params)


def balanced_world(seed: int = 0, count: int = 100, **overrides) -> LongTailSpec:
    """Same geometry as the default world but uniform class counts."""
    params = dict(counts=(count,) * 6)
    params.update(overrides)
    return default_world(seed=seed, **params)
