"""Dataset ingestion from the on-disk layout.

Layout: ``root/<dataset>/images/*.png`` with optional matching
``root/<dataset>/labels/*.png`` (same filename). Images load as [0,1]
grayscale (luma for color inputs); labels load as {0,1} masks.
"""

import os
from dataclasses import dataclass, field

from . import pngio
from .errors import MissingArtifactError, MissingLabelError


@dataclass
class Dataset:
    name: str
    images: dict = field(default_factory=dict)   # image_id -> float array
    labels: dict = field(default_factory=dict)   # image_id -> {0,1} mask

    def image_ids(self):
        return sorted(self.images)

    def label_for(self, image_id):
        if image_id not in self.labels:
            raise MissingLabelError(
                f"dataset {self.name!r} has no label for image {image_id!r}"
            )
        return self.labels[image_id]


def load_dataset(root, name):
    img_dir = os.path.join(root, name, "images")
    if not os.path.isdir(img_dir):
        raise MissingArtifactError(f"no images directory for dataset {name!r} "
                                   f"under {root}")
    lbl_dir = os.path.join(root, name, "labels")
    ds = Dataset(name)
    for fname in sorted(os.listdir(img_dir)):
        if not fname.lower().endswith(".png"):
            continue
        image_id = os.path.splitext(fname)[0]
        ds.images[image_id] = pngio.read_gray(os.path.join(img_dir, fname))
        lbl_path = os.path.join(lbl_dir, fname)
        if os.path.isfile(lbl_path):
            ds.labels[image_id] = pngio.read_mask(lbl_path)
    if not ds.images:
        raise MissingArtifactError(f"dataset {name!r} has no PNG images")
    return ds


def list_dataset_names(root):
    if not os.path.isdir(root):
        raise MissingArtifactError(f"data root {root!r} does not exist")
    names = []
    for entry in sorted(os.listdir(root)):
        if os.path.isdir(os.path.join(root, entry, "images")):
            names.append(entry)
    return names
