"""Synthetic dataset generator, dataset loading, and config parsing."""

import hashlib
import json
import os

import numpy as np
import pytest

from cellselect import pngio, synth
from cellselect.config import load_config, parse_config
from cellselect.datasets import list_dataset_names, load_dataset
from cellselect.errors import MalformedConfigError, MissingArtifactError
from cellselect.imaging import dilate2x2, equalize, threshold


def tree_digest(root):
    """Stable digest of every file under root (relative path + bytes)."""
    h = hashlib.blake2b(digest_size=16)
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for fname in sorted(filenames):
            full = os.path.join(dirpath, fname)
            h.update(os.path.relpath(full, root).encode())
            h.update(open(full, "rb").read())
    return h.hexdigest()


@pytest.fixture(scope="module")
def synth_tree(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth") / "data"
    manifests = synth.generate(str(out), domains=4, images_per_domain=6,
                               seed=7, size=64)
    return str(out), manifests


def test_generation_deterministic(tmp_path, synth_tree):
    root, _ = synth_tree
    again = tmp_path / "again"
    synth.generate(str(again), domains=4, images_per_domain=6, seed=7, size=64)
    assert tree_digest(root) == tree_digest(str(again))


def test_different_seed_changes_tree(tmp_path, synth_tree):
    root, _ = synth_tree
    other = tmp_path / "other"
    synth.generate(str(other), domains=4, images_per_domain=6, seed=8, size=64)
    assert tree_digest(root) != tree_digest(str(other))


def test_masks_binary_and_shape_matched(synth_tree):
    root, manifests = synth_tree
    for m in manifests:
        for image_id in m["images"]:
            img = pngio.read_gray(os.path.join(root, m["name"], "images",
                                               image_id + ".png"))
            mask = pngio.read_mask(os.path.join(root, m["name"], "labels",
                                                image_id + ".png"))
            assert img.shape == mask.shape == (64, 64)
            assert set(np.unique(mask)) <= {0, 1}
            assert 0.0 <= img.min() and img.max() <= 1.0


def test_dark_domain_pipeline_iou(synth_tree):
    root, manifests = synth_tree
    dark = next(m for m in manifests if m["name"] == "darkdisks")
    ious = []
    for image_id in dark["images"]:
        img = pngio.read_gray(os.path.join(root, "darkdisks", "images",
                                           image_id + ".png"))
        gt = pngio.read_mask(os.path.join(root, "darkdisks", "labels",
                                          image_id + ".png"))
        pl = dilate2x2(threshold(equalize(img), dark["suggested_gamma"]))
        ious.append(np.count_nonzero(pl & gt) / np.count_nonzero(pl | gt))
    assert np.mean(ious) >= 0.6


def test_every_patch_quadrant_has_foreground(synth_tree):
    root, manifests = synth_tree
    for m in manifests:
        for image_id in m["images"]:
            mask = pngio.read_mask(os.path.join(root, m["name"], "labels",
                                                image_id + ".png"))
            for qr in (0, 32):
                for qc in (0, 32):
                    assert mask[qr:qr + 32, qc:qc + 32].any()


def test_domain_statistics_differ(synth_tree):
    root, manifests = synth_tree
    fg_means = {}
    fg_fracs = {}
    for m in manifests:
        vals, fracs = [], []
        for image_id in m["images"]:
            img = pngio.read_gray(os.path.join(root, m["name"], "images",
                                               image_id + ".png"))
            mask = pngio.read_mask(os.path.join(root, m["name"], "labels",
                                                image_id + ".png"))
            vals.append(img[mask == 1].mean())
            fracs.append(mask.mean())
        fg_means[m["name"]] = np.mean(vals)
        fg_fracs[m["name"]] = np.mean(fracs)
    # ring cells carry a bright rim, so their mean foreground intensity sits
    # well above the plain dark domains
    assert fg_means["ringcore"] > fg_means["darkdisks"] + 0.1
    assert fg_fracs["darksmall"] != fg_fracs["darkdisks"]


def test_generator_rejects_bad_args(tmp_path):
    with pytest.raises(ValueError):
        synth.generate(str(tmp_path / "x"), domains=1)
    with pytest.raises(ValueError):
        synth.generate(str(tmp_path / "x"), domains=99)


# ---------------------------------------------------------------------------
# dataset loading


def test_load_dataset_roundtrip(synth_tree):
    root, manifests = synth_tree
    ds = load_dataset(root, "darkdisks")
    assert ds.image_ids() == sorted(manifests[0]["images"])
    first = ds.image_ids()[0]
    assert ds.images[first].shape == (64, 64)
    assert ds.label_for(first).dtype == np.uint8


def test_list_dataset_names(synth_tree):
    root, manifests = synth_tree
    assert list_dataset_names(root) == sorted(m["name"] for m in manifests)


def test_load_dataset_missing(synth_tree):
    root, _ = synth_tree
    with pytest.raises(MissingArtifactError):
        load_dataset(root, "absent")


# ---------------------------------------------------------------------------
# config


def test_emitted_config_loads(synth_tree):
    root, _ = synth_tree
    cfg = load_config(os.path.join(root, "config.json"))
    assert cfg.target == "ringcore"
    assert set(cfg.datasets) == {"darkdisks", "darksmall", "darkellipse", "ringcore"}
    assert cfg.patch_size == 32
    assert cfg.train_cfg("pretrain").epochs == 25
    assert cfg.train_cfg("finetune").epochs == 30


def test_config_overrides(synth_tree):
    root, _ = synth_tree
    cfg = load_config(os.path.join(root, "config.json"),
                      overrides={"target": "darkdisks", "seed": 5})
    assert cfg.target == "darkdisks"
    assert cfg.seed == 5


def test_config_rejects_unknown_target(synth_tree):
    root, _ = synth_tree
    raw = json.load(open(os.path.join(root, "config.json")))
    raw["target"] = "nonexistent"
    with pytest.raises(MalformedConfigError):
        parse_config(raw, base_dir=root)


def test_config_rejects_bad_values(synth_tree):
    root, _ = synth_tree
    base = json.load(open(os.path.join(root, "config.json")))
    for key, value in [("pool_fraction", 1.5), ("dropout_p", 2.0),
                       ("scorers", ["bogus"]), ("patch_size", 30),
                       ("miou_mode", "nope")]:
        raw = dict(base)
        raw[key] = value
        with pytest.raises(MalformedConfigError):
            parse_config(raw, base_dir=root)


def test_config_rejects_missing_data_root(tmp_path):
    raw = {"data_root": str(tmp_path / "void"), "out_dir": str(tmp_path),
           "target": "a", "datasets": {"a": {}}}
    with pytest.raises(MalformedConfigError):
        parse_config(raw)


def test_config_paper_defaults(synth_tree):
    root, _ = synth_tree
    raw = json.load(open(os.path.join(root, "config.json")))
    for phase in ("pretrain", "pseudo", "finetune"):
        raw.pop(phase, None)
    cfg = parse_config(raw, base_dir=root)
    assert cfg.train_cfg("pseudo").epochs == 100
    assert cfg.train_cfg("pseudo").lr == 1e-4
    assert cfg.train_cfg("pseudo").weight_decay == 5e-4
    assert cfg.train_cfg("finetune").epochs == 20
    assert cfg.dropout_p == 0.5
    assert cfg.mc_passes == 10
