"""Training-patch extraction, inference tiling, and probability merging.

Placements walk a fixed-stride grid and snap the final row/column to the
image edge, so tiles always cover every pixel without padding. Training
patches containing fewer than `min_distinct_classes` label values are
dropped (the defect-presence filter). Merged probabilities are the
arithmetic mean over covering tiles; accumulation happens in origin-sorted
order, so the result is bitwise independent of the order tiles arrive in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Patch:
    image: np.ndarray  # [3,P,P]
    labels: np.ndarray | None  # [P,P] int, None for inference tiles
    origin: tuple  # (row, col) in the source image


def grid_starts(extent, patch, stride):
    """Grid-aligned start offsets plus an edge-snapped final one."""
    if patch > extent:
        raise ValueError(f"patch size {patch} exceeds extent {extent}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    starts = list(range(0, extent - patch + 1, stride))
    if starts[-1] != extent - patch:
        starts.append(extent - patch)
    return starts


def extract_training_patches(image, labels, patch_size=400, stride=20, min_distinct_classes=3):
    """All grid placements whose label crop has >= min_distinct_classes values."""
    image = np.asarray(image)
    labels = np.asarray(labels)
    if image.ndim != 3 or image.shape[1:] != labels.shape:
        raise ValueError(
            f"image [3,H,W] and labels [H,W] must agree, got {image.shape} and {labels.shape}"
        )
    H, W = labels.shape
    out = []
    for r in grid_starts(H, patch_size, stride):
        for c in grid_starts(W, patch_size, stride):
            lab = labels[r : r + patch_size, c : c + patch_size]
            if np.unique(lab).size < min_distinct_classes:
                continue
            out.append(Patch(image[:, r : r + patch_size, c : c + patch_size], lab, (r, c)))
    return out


def tile_for_inference(image, patch_size=400, overlap=200):
    """Tiles at stride patch_size - overlap, final tile snapped to the edge."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"image must be [3,H,W], got shape {image.shape}")
    if overlap >= patch_size:
        raise ValueError(f"overlap {overlap} must be smaller than patch size {patch_size}")
    if overlap < 0:
        raise ValueError("overlap must be non-negative")
    stride = patch_size - overlap
    _, H, W = image.shape
    tiles = []
    for r in grid_starts(H, patch_size, stride):
        for c in grid_starts(W, patch_size, stride):
            tiles.append(Patch(image[:, r : r + patch_size, c : c + patch_size], None, (r, c)))
    return tiles


class ProbAccumulator:
    """Equally-weighted average of per-tile probability maps.

    Tiles are buffered and summed in origin-sorted order at finalize time,
    making the merged map independent of submission order down to the bit.
    """

    def __init__(self, num_classes, height, width):
        if num_classes < 2:
            raise ValueError("need at least two classes")
        self.num_classes = num_classes
        self.height = height
        self.width = width
        self._tiles = []
        self._counts = np.zeros((height, width), dtype=np.int64)

    def add(self, tile_probs, origin):
        tile_probs = np.asarray(tile_probs, dtype=np.float64)
        if tile_probs.ndim != 3 or tile_probs.shape[0] != self.num_classes:
            raise ValueError(f"tile must be [K,p,p] with K={self.num_classes}, got {tile_probs.shape}")
        r, c = origin
        _, ph, pw = tile_probs.shape
        if r < 0 or c < 0 or r + ph > self.height or c + pw > self.width:
            raise ValueError(f"tile at {origin} with shape {tile_probs.shape[1:]} exceeds canvas")
        colsums = tile_probs.sum(axis=0)
        if np.any(np.abs(colsums - 1.0) > 1e-6):
            raise ValueError("tile probabilities must sum to 1 at every pixel")
        self._tiles.append(((int(r), int(c)), tile_probs))
        self._counts[r : r + ph, c : c + pw] += 1

    def finalize(self):
        """Mean probabilities and argmax labels (lowest class index on ties)."""
        if np.any(self._counts == 0):
            uncovered = int((self._counts == 0).sum())
            raise ValueError(f"{uncovered} pixels left uncovered by tiles")
        sums = np.zeros((self.num_classes, self.height, self.width))
        for (r, c), probs in sorted(self._tiles, key=lambda item: item[0]):
            _, ph, pw = probs.shape
            sums[:, r : r + ph, c : c + pw] += probs
        probs = sums / self._counts
        labels = probs.argmax(axis=0)
        return probs, labels


def merge_probabilities(acc, tile_probs, origin):
    acc.add(tile_probs, origin)
    return acc


def finalize(acc):
    return acc.finalize()
