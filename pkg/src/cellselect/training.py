"""Training phases: multi-source pretraining, pseudo-label adaptation, and
support-set fine-tuning.

Each phase is a pure function of (inputs, config, seed): it copies the
incoming parameters, runs seeded shuffling and fixed-order gradient
reduction, and returns new parameters plus a per-epoch loss log. Dropout is
never active during training; it only serves the MC-dropout scorer.
"""

from dataclasses import dataclass, field

import numpy as np

from . import nnet
from .errors import DegenerateDatasetError, EmptySourceError, ShapeMismatchError
from .imaging import extract_patches
from .scoring import derive_seed


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-4
    weight_decay: float = 5e-4
    batch_size: int = 4
    seed: int = 0
    mode: str = "joint"           # pretraining only: joint | reptile
    reptile_inner_steps: int = 5
    reptile_eps: float = 0.1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in ("joint", "reptile"):
            raise ValueError(f"unknown training mode {self.mode!r}")


@dataclass
class LabeledSet:
    """A named collection of (image, mask) patch pairs."""

    name: str
    items: list = field(default_factory=list)

    def masks(self):
        return [m for _, m in self.items]


def safe_class_weight(masks, orientation="bg_over_fg"):
    """class_weight with the documented w=1 fallback on degenerate sets."""
    try:
        return nnet.class_weight(masks, orientation)
    except DegenerateDatasetError:
        return 1.0


def _check_items(items):
    for img, mask in items:
        if img.shape != mask.shape:
            raise ShapeMismatchError(
                f"image {img.shape} does not match mask {mask.shape}"
            )


def _batch_step(params, batch, w, state):
    """Mean-over-batch loss; per-sample grads reduced in index order."""
    grads = None
    total = 0.0
    inv = 1.0 / len(batch)
    for img, mask in batch:
        loss, g = nnet.loss_and_grads(params, img, mask, w)
        total += loss
        if grads is None:
            grads = [gi * inv for gi in g]
        else:
            for acc, gi in zip(grads, g):
                acc += gi * inv
    nnet.adam_step(params, grads, state)
    return total * inv


def _run_epochs(params, items, w, cfg, rng, epochs=None):
    """Seeded-shuffle epoch loop over one item list; returns the loss log."""
    log = []
    epochs = cfg.epochs if epochs is None else epochs
    state = nnet.AdamState.for_params(params, cfg.lr, cfg.weight_decay)
    for _ in range(epochs):
        order = rng.permutation(len(items))
        losses = []
        for start in range(0, len(items), cfg.batch_size):
            batch = [items[i] for i in order[start:start + cfg.batch_size]]
            losses.append(_batch_step(params, batch, w, state))
        log.append(float(np.mean(losses)))
    return log


def epoch_loss(params, items, w):
    """Current mean weighted-BCE loss over an item list (no updates)."""
    vals = []
    for img, mask in items:
        pred = nnet.forward(params, img)
        loss, _ = nnet.weighted_bce(pred, mask, w)
        vals.append(loss)
    return float(np.mean(vals))


def pretrain_sources(sources, config, arch, dropout_p=0.5,
                     weight_orientation="bg_over_fg"):
    """Train a generic model on labeled source sets from a seeded cold start.

    joint mode interleaves every source's batches each epoch, each with its
    own class weight, minimizing the average source loss. reptile mode runs
    inner Adam steps on one sampled source per meta-iteration and moves the
    weights a fraction ``reptile_eps`` toward the inner result.
    """
    sources = [s for s in sources if s.items]
    if not sources:
        raise EmptySourceError("pretraining needs at least one non-empty source")
    for src in sources:
        _check_items(src.items)
    params = nnet.init_params(arch, dropout_p, seed=config.seed)
    per_source_w = {s.name: safe_class_weight(s.masks(), weight_orientation)
                    for s in sources}
    rng = np.random.Generator(np.random.PCG64(derive_seed(config.seed, "pretrain")))
    log = []

    if config.mode == "joint":
        state = nnet.AdamState.for_params(params, config.lr, config.weight_decay)
        for _ in range(config.epochs):
            losses = []
            for src in sources:
                w = per_source_w[src.name]
                order = rng.permutation(len(src.items))
                for start in range(0, len(src.items), config.batch_size):
                    batch = [src.items[i] for i in order[start:start + config.batch_size]]
                    losses.append(_batch_step(params, batch, w, state))
            log.append(float(np.mean(losses)))
        return params, log

    # reptile: each epoch is one meta-iteration
    for _ in range(config.epochs):
        src = sources[int(rng.integers(len(sources)))]
        w = per_source_w[src.name]
        inner = params.copy()
        state = nnet.AdamState.for_params(inner, config.lr, config.weight_decay)
        order = rng.permutation(len(src.items))
        losses = []
        step = 0
        while step < config.reptile_inner_steps:
            for start in range(0, len(src.items), config.batch_size):
                if step >= config.reptile_inner_steps:
                    break
                batch = [src.items[i] for i in order[start:start + config.batch_size]]
                losses.append(_batch_step(inner, batch, w, state))
                step += 1
        for pw, iw in zip(params.weights, inner.weights):
            pw += config.reptile_eps * (iw - pw)
        log.append(float(np.mean(losses)))
    return params, log


def pseudo_patch_items(pseudo_set, patch_size, patches_per_image):
    """Materialize (image, mask) crops from a pseudo-labeled set's grid."""
    items = []
    for image_id, img, mask in pseudo_set.items:
        if img.shape != mask.shape:
            raise ShapeMismatchError(
                f"{image_id}: image {img.shape} vs pseudo-mask {mask.shape}"
            )
        for ref in extract_patches(image_id, img, patch_size, patches_per_image):
            items.append((ref.crop(img), ref.crop(mask)))
    return items


def fit_pseudo(theta, pseudo_set, config, patch_size=256, patches_per_image=1,
               weight_orientation="bg_over_fg"):
    """Adapt pretrained weights to the target by fitting its pseudo-labels."""
    if not pseudo_set.items:
        raise EmptySourceError("pseudo-labeled set is empty")
    items = pseudo_patch_items(pseudo_set, patch_size, patches_per_image)
    w = safe_class_weight([m for _, m in items], weight_orientation)
    params = theta.copy()
    rng = np.random.Generator(np.random.PCG64(derive_seed(config.seed, "pseudo")))
    log = _run_epochs(params, items, w, config, rng)
    return params, log


def finetune_support(theta_prime, support, config,
                     weight_orientation="bg_over_fg"):
    """Fine-tune on the expert-annotated support set."""
    support = list(support)
    if not support:
        raise EmptySourceError("support set is empty")
    _check_items(support)
    w = safe_class_weight([m for _, m in support], weight_orientation)
    params = theta_prime.copy()
    rng = np.random.Generator(np.random.PCG64(derive_seed(config.seed, "finetune")))
    log = _run_epochs(params, support, w, config, rng)
    return params, log
