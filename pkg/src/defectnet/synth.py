"""Deterministic generator of class-imbalanced segmentation scenes.

A scene is a noisy background, one large elongated "structure" band
(class 1), and small elliptical defect blobs (classes 2..K-1) centered on
the structure. Region sizes are derived from the per-class frequency
ratios, so empirical pixel shares track the spec'd imbalance profile.
Rare classes can be given a per-scene presence probability below 1; a
forcing cycle guarantees every class still appears regularly, so any
reasonably sized corpus contains all classes.

Every scene draws from its own stream seeded by (seed, scene index):
generation is a pure function of the spec.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import ClassStats, class_weights

# bg, structure, then defect classes
DEFAULT_PALETTE = (
    (60, 75, 60),
    (188, 188, 194),
    (152, 104, 88),
    (118, 128, 166),
    (170, 152, 96),
    (96, 70, 110),
    (80, 120, 120),
    (160, 90, 130),
    (130, 150, 90),
)


@dataclass
class SceneSpec:
    image_size: int = 96
    num_classes: int = 4
    ratios: tuple = (1000, 300, 10, 1)
    blob_area_ranges: tuple = ()  # per defect class; derived if empty
    presence: tuple = ()  # per defect class; default 1.0
    noise_sigma: float = 0.08
    seed: int = 0
    palette: tuple = field(default=DEFAULT_PALETTE)

    def __post_init__(self):
        K = self.num_classes
        if K < 2:
            raise ValueError("need at least background and structure classes")
        self.ratios = tuple(float(r) for r in self.ratios)
        if len(self.ratios) != K:
            raise ValueError(f"need {K} ratios, got {len(self.ratios)}")
        if any(r <= 0 for r in self.ratios):
            raise ValueError("frequency ratios must be strictly positive")
        n_defects = K - 2
        if not self.presence:
            self.presence = (1.0,) * n_defects
        self.presence = tuple(float(p) for p in self.presence)
        if len(self.presence) != n_defects or any(not 0.0 < p <= 1.0 for p in self.presence):
            raise ValueError(f"need {n_defects} presence probabilities in (0,1]")
        if not self.blob_area_ranges:
            self.blob_area_ranges = tuple(
                self._derived_blob_range(c) for c in range(2, K)
            )
        self.blob_area_ranges = tuple((float(lo), float(hi)) for lo, hi in self.blob_area_ranges)
        if len(self.blob_area_ranges) != n_defects:
            raise ValueError(f"need {n_defects} blob area ranges")
        if any(lo < 3 or hi < lo for lo, hi in self.blob_area_ranges):
            raise ValueError("blob area ranges must satisfy 3 <= lo <= hi")
        if len(self.palette) < K:
            raise ValueError(f"palette has {len(self.palette)} colors, need {K}")
        if self.image_size < 16:
            raise ValueError("image size too small")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")

    def presence_cycle(self, cls):
        """Defect classes appear every `cycle` scenes (deterministic), so the
        effective presence rate is 1/cycle and any corpus spanning a cycle
        contains every class."""
        return max(1, int(round(1.0 / self.presence[cls - 2])))

    def effective_presence(self, cls):
        return 1.0 / self.presence_cycle(cls)

    def scene_area(self, cls):
        """Target blob area in a scene where the class is present."""
        return self.target_area(cls) / self.effective_presence(cls)

    def _derived_blob_range(self, cls):
        area = self.scene_area(cls)
        n = max(1, int(round(area / 45.0)))
        per = max(6.0, area / n)
        return (0.7 * per, 1.3 * per)

    @property
    def shares(self):
        total = sum(self.ratios)
        return tuple(r / total for r in self.ratios)

    def target_area(self, cls):
        return self.shares[cls] * self.image_size * self.image_size


def generate(spec: SceneSpec, index: int = 0):
    """One (image uint8 [3,H,W], labels int64 [H,W]) scene."""
    rng = np.random.default_rng([spec.seed, index])
    n = spec.image_size
    labels = np.zeros((n, n), dtype=np.int64)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)

    _paint_structure(spec, rng, labels, yy, xx)
    for cls in range(2, spec.num_classes):
        if _class_present(spec, index, cls):
            _paint_blobs(spec, rng, labels, yy, xx, cls)

    colors = np.asarray(spec.palette[: spec.num_classes], dtype=np.float64)
    image = colors[labels].transpose(2, 0, 1)
    image = image + rng.normal(0.0, spec.noise_sigma * 255.0, image.shape)
    return np.clip(image, 0, 255).astype(np.uint8), labels


def _class_present(spec, index, cls):
    # per-class phases keep different defect classes in different scenes,
    # so batches routinely miss classes (the regime the hybrid loss targets)
    cycle = spec.presence_cycle(cls)
    return (index + cls - 2) % cycle == 0


def _paint_structure(spec, rng, labels, yy, xx):
    n = spec.image_size
    target = spec.target_area(1)
    theta = rng.uniform(0.0, np.pi)
    cy = n / 2 + rng.uniform(-0.15, 0.15) * n
    cx = n / 2 + rng.uniform(-0.15, 0.15) * n
    dist = np.abs((yy - cy) * -np.sin(theta) + (xx - cx) * np.cos(theta))
    width = max(3.0, target / n)
    for _ in range(3):  # fixed refinement, deterministic
        mask = dist < width / 2
        area = mask.sum()
        if area == 0:
            width *= 2.0
            continue
        width = max(3.0, width * target / area)
    labels[dist < width / 2] = 1


def _paint_blobs(spec, rng, labels, yy, xx, cls):
    lo, hi = spec.blob_area_ranges[cls - 2]
    target = spec.scene_area(cls)
    count = max(1, int(round(target / ((lo + hi) / 2.0))))
    structure = np.flatnonzero(labels == 1)
    anchors = structure if structure.size else np.arange(labels.size)
    n = spec.image_size
    for _ in range(count):
        placed = False
        for _attempt in range(100):
            area = rng.uniform(lo, hi)
            aspect = rng.uniform(1.0, 2.5)
            a = np.sqrt(area * aspect / np.pi)
            b = np.sqrt(area / (np.pi * aspect))
            phi = rng.uniform(0.0, np.pi)
            center = anchors[rng.integers(anchors.size)]
            cy, cx = divmod(int(center), n)
            dy, dx = yy - cy, xx - cx
            u = dy * np.cos(phi) + dx * np.sin(phi)
            v = -dy * np.sin(phi) + dx * np.cos(phi)
            mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
            if not mask.any():
                continue
            if np.any(labels[mask] >= 2):  # defect regions never overlap
                continue
            labels[mask] = cls
            placed = True
            break
        if not placed:
            raise RuntimeError(
                f"failed to place a class-{cls} blob after 100 attempts; spec too dense"
            )


def dataset_stats(label_maps, num_classes) -> ClassStats:
    """Exact per-class pixel counts over a corpus of label maps."""
    counts = np.zeros(num_classes, dtype=np.int64)
    empty = True
    for labels in label_maps:
        labels = np.asarray(labels)
        if labels.min() < 0 or labels.max() >= num_classes:
            raise ValueError("label values outside [0, num_classes)")
        counts += np.bincount(labels.reshape(-1), minlength=num_classes)
        empty = False
    if empty:
        raise ValueError("empty corpus")
    return class_weights(counts)
