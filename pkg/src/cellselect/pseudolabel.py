"""Pseudo-label generation for unlabeled target images.

Default pipeline: histogram equalization, dark-is-foreground threshold at a
per-dataset gamma, then a single 2x2 dilation. The K-means variant clusters
pixel values into two groups and marks the darker cluster as foreground.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import pngio
from .errors import ConstantImageError
from .imaging import as_gray, dilate2x2, equalize, threshold


@dataclass
class PseudoLabeledSet:
    """Images paired with generated binary masks."""

    items: list = field(default_factory=list)  # (image_id, image, mask)
    gamma_used: float = float("nan")
    method: str = "pipeline"

    def masks(self):
        return [m for _, _, m in self.items]


def generate_pipeline(images, gamma):
    """equalize -> threshold(gamma) -> dilate2x2 for every (id, image) pair."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must be in [0, 1]")
    items = []
    for image_id, img in images:
        mask = dilate2x2(threshold(equalize(img), gamma))
        items.append((image_id, img, mask))
    return PseudoLabeledSet(items, gamma_used=gamma, method="pipeline")


def kmeans2_mask(image, max_iters=100):
    """Two-cluster Lloyd iteration on pixel values; darker cluster is 1.

    Centers start at the min and max pixel value; equidistant pixels join the
    darker center. Stops at an assignment fixpoint.
    """
    x = as_gray(image)
    lo = x.min()
    hi = x.max()
    if lo == hi:
        raise ConstantImageError("k-means needs at least two distinct pixel values")
    c_dark, c_bright = float(lo), float(hi)
    assign = None
    for _ in range(max_iters):
        # tie (equidistant) goes to the darker center
        new_assign = np.abs(x - c_dark) <= np.abs(x - c_bright)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        if assign.any():
            c_dark = float(x[assign].mean())
        if (~assign).any():
            c_bright = float(x[~assign].mean())
    return assign.astype(np.uint8)


def generate_kmeans(images):
    items = [(image_id, img, kmeans2_mask(img)) for image_id, img in images]
    return PseudoLabeledSet(items, method="kmeans")


def write_pseudo_set(pseudo_set, out_dir):
    """Masks as PNGs next to a manifest listing image_id / gamma / method."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = []
    for image_id, _, mask in pseudo_set.items:
        pngio.write_mask(os.path.join(out_dir, f"{image_id}.png"), mask)
        manifest.append({
            "image_id": image_id,
            "gamma": None if pseudo_set.method == "kmeans" else pseudo_set.gamma_used,
            "method": pseudo_set.method,
        })
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
