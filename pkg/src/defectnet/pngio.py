"""PNG reading/writing for scenes and label maps.

Images are 8-bit RGB stored channel-first in memory; label maps are 8-bit
single-channel PNGs whose pixel value is the class index.
"""

from __future__ import annotations

import numpy as np
from PIL import Image


def save_image(path, image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3 or image.dtype != np.uint8:
        raise ValueError(f"expected uint8 [3,H,W] image, got {image.dtype} {image.shape}")
    Image.fromarray(image.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def load_image(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.transpose(2, 0, 1)


def save_labels(path, labels):
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"expected [H,W] label map, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("label values must fit in 8 bits")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path, format="PNG")


def load_labels(path):
    with Image.open(path) as im:
        if im.mode != "L":
            im = im.convert("L")
        arr = np.asarray(im, dtype=np.int64)
    return arr
