"""Confusion-matrix evaluation: per-class recall, precision, IoU, and the
defect-average recall.

"Accuracy" of a class means recall: the fraction of its true pixels
predicted as that class. Classes with zero true pixels report None and are
excluded from averages. Metrics are meant to run on merged full-image
predictions, not on individual tiles.
"""

from __future__ import annotations

import json

import numpy as np


class ConfusionMatrix:
    """K x K counts; entry (i, j) = pixels of true class i predicted as j."""

    def __init__(self, num_classes):
        if num_classes < 2:
            raise ValueError("need at least two classes")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, predicted, truth):
        predicted = np.asarray(predicted)
        truth = np.asarray(truth)
        if predicted.shape != truth.shape:
            raise ValueError(f"shape mismatch: {predicted.shape} vs {truth.shape}")
        K = self.num_classes
        for arr, name in ((predicted, "predicted"), (truth, "truth")):
            if arr.min() < 0 or arr.max() >= K:
                raise ValueError(f"{name} labels outside [0,{K})")
        flat = truth.reshape(-1) * K + predicted.reshape(-1)
        self.counts += np.bincount(flat, minlength=K * K).reshape(K, K)
        return self

    def merge(self, other):
        if other.num_classes != self.num_classes:
            raise ValueError("class count mismatch")
        self.counts += other.counts
        return self

    @property
    def total(self):
        return int(self.counts.sum())

    def per_class_recall(self):
        """Recall per class; None where the class has no true pixels."""
        out = []
        for c in range(self.num_classes):
            row = self.counts[c].sum()
            out.append(float(self.counts[c, c] / row) if row > 0 else None)
        return out

    def per_class_precision(self):
        out = []
        for c in range(self.num_classes):
            col = self.counts[:, c].sum()
            out.append(float(self.counts[c, c] / col) if col > 0 else None)
        return out

    def per_class_iou(self):
        out = []
        for c in range(self.num_classes):
            union = self.counts[c].sum() + self.counts[:, c].sum() - self.counts[c, c]
            out.append(float(self.counts[c, c] / union) if union > 0 else None)
        return out

    def average_defect_accuracy(self, defect_class_ids):
        """Unweighted mean recall over the listed classes, skipping undefined ones."""
        recalls = self.per_class_recall()
        for c in defect_class_ids:
            if not 0 <= c < self.num_classes:
                raise ValueError(f"class id {c} out of range")
        defined = [recalls[c] for c in defect_class_ids if recalls[c] is not None]
        if not defined:
            raise ValueError("no listed defect class has true pixels")
        return float(np.mean(defined))

    def report(self, defect_class_ids):
        return {
            "num_classes": self.num_classes,
            "total_pixels": self.total,
            "per_class_recall": self.per_class_recall(),
            "per_class_precision": self.per_class_precision(),
            "per_class_iou": self.per_class_iou(),
            "defect_class_ids": list(defect_class_ids),
            "defect_average_recall": self.average_defect_accuracy(defect_class_ids),
        }

    def report_json(self, defect_class_ids):
        return json.dumps(self.report(defect_class_ids), sort_keys=True, indent=2)


def accumulate(cm, predicted, truth):
    return cm.accumulate(predicted, truth)


def per_class_accuracy(cm):
    return cm.per_class_recall()


def average_defect_accuracy(cm, defect_class_ids):
    return cm.average_defect_accuracy(defect_class_ids)
