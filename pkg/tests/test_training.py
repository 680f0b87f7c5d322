"""Training phases: pretraining, pseudo-label adaptation, fine-tuning."""

import numpy as np
import pytest

from cellselect import nnet, pseudolabel, training
from cellselect.errors import EmptySourceError
from cellselect.training import LabeledSet, TrainConfig

ARCH = (4, 8, 12, 8, 4)


def blob_patch(seed, size=16):
    rng = np.random.Generator(np.random.PCG64(seed))
    img = 0.85 + 0.05 * rng.random((size, size))
    mask = np.zeros((size, size), dtype=np.uint8)
    r, c = rng.integers(2, size - 10, size=2)
    mask[r:r + 8, c:c + 8] = 1
    img[mask == 1] = 0.1 + 0.05 * rng.random((mask == 1).sum())
    return np.clip(img, 0, 1), mask


def small_source(name, n=4, base_seed=0):
    return LabeledSet(name, [blob_patch(base_seed + i) for i in range(n)])


def cfg(**kw):
    base = dict(epochs=100, lr=0.01, weight_decay=0.0, batch_size=4, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def params_equal(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))


# ---------------------------------------------------------------------------
# pretraining


def test_pretrain_halves_loss():
    src = small_source("s0")
    config = cfg(epochs=100)
    params, log = training.pretrain_sources([src], config, nnet.default_arch(ARCH))
    assert len(log) == 100
    assert log[-1] <= 0.5 * log[0]


def test_pretrain_zero_epochs_returns_init():
    src = small_source("s0")
    config = cfg(epochs=0)
    params, log = training.pretrain_sources([src], config, nnet.default_arch(ARCH))
    init = nnet.init_params(nnet.default_arch(ARCH), dropout_p=0.5, seed=config.seed)
    assert log == []
    assert params_equal(params, init)


def test_pretrain_empty_sources_rejected():
    with pytest.raises(EmptySourceError):
        training.pretrain_sources([], cfg(), nnet.default_arch(ARCH))
    with pytest.raises(EmptySourceError):
        training.pretrain_sources([LabeledSet("empty", [])], cfg(),
                                  nnet.default_arch(ARCH))


def test_pretrain_multi_source_runs():
    sources = [small_source("s0", base_seed=0), small_source("s1", base_seed=50)]
    params, log = training.pretrain_sources(sources, cfg(epochs=5),
                                            nnet.default_arch(ARCH))
    assert len(log) == 5
    assert all(np.isfinite(v) for v in log)


def test_reptile_eps_zero_never_moves():
    src = small_source("s0")
    config = cfg(epochs=5, mode="reptile", reptile_eps=0.0)
    params, _ = training.pretrain_sources([src], config, nnet.default_arch(ARCH))
    init = nnet.init_params(nnet.default_arch(ARCH), dropout_p=0.5, seed=config.seed)
    assert params_equal(params, init)


def test_reptile_moves_with_positive_eps():
    src = small_source("s0")
    config = cfg(epochs=5, mode="reptile", reptile_eps=0.1, reptile_inner_steps=3)
    params, log = training.pretrain_sources([src], config, nnet.default_arch(ARCH))
    init = nnet.init_params(nnet.default_arch(ARCH), dropout_p=0.5, seed=config.seed)
    assert not params_equal(params, init)
    assert len(log) == 5


def test_pretrain_bitwise_reproducible():
    sources = [small_source("s0"), small_source("s1", base_seed=9)]
    a, _ = training.pretrain_sources(sources, cfg(epochs=3), nnet.default_arch(ARCH))
    b, _ = training.pretrain_sources(sources, cfg(epochs=3), nnet.default_arch(ARCH))
    assert params_equal(a, b)


# ---------------------------------------------------------------------------
# pseudo-label adaptation


def pseudo_set_from(images_masks):
    return pseudolabel.PseudoLabeledSet(
        [(f"p{i}", img, m) for i, (img, m) in enumerate(images_masks)],
        gamma_used=0.5,
    )


def test_fit_pseudo_all_zero_targets_drift_down():
    rng = np.random.Generator(np.random.PCG64(1))
    images = [(rng.random((16, 16)), np.zeros((16, 16), dtype=np.uint8))
              for _ in range(3)]
    pseudo = pseudo_set_from(images)
    theta = nnet.init_params(nnet.default_arch(ARCH), seed=4)
    theta_p, log = training.fit_pseudo(theta, pseudo, cfg(epochs=60),
                                       patch_size=16, patches_per_image=1)
    mean_out = np.mean([nnet.forward(theta_p, img).mean() for img, _ in images])
    assert mean_out < 0.5
    assert len(log) == 60


def test_fit_pseudo_zero_epochs_identity():
    img, mask = blob_patch(7)
    pseudo = pseudo_set_from([(img, mask)])
    theta = nnet.init_params(nnet.default_arch(ARCH), seed=5)
    theta_p, log = training.fit_pseudo(theta, pseudo, cfg(epochs=0),
                                       patch_size=16, patches_per_image=1)
    assert log == []
    assert params_equal(theta_p, theta)
    assert theta_p is not theta


def test_fit_pseudo_reduces_loss():
    items = [blob_patch(20 + i) for i in range(4)]
    pseudo = pseudo_set_from(items)
    theta = nnet.init_params(nnet.default_arch(ARCH), seed=6)
    theta_p, log = training.fit_pseudo(theta, pseudo, cfg(epochs=30),
                                       patch_size=16, patches_per_image=1)
    assert log[-1] < log[0]


def test_fit_pseudo_extracts_patch_grid():
    rng = np.random.Generator(np.random.PCG64(2))
    img = rng.random((32, 32))
    mask = (img < 0.3).astype(np.uint8)
    pseudo = pseudo_set_from([(img, mask)])
    items = training.pseudo_patch_items(pseudo, patch_size=16, patches_per_image=4)
    assert len(items) == 4
    for pi, pm in items:
        assert pi.shape == (16, 16) and pm.shape == (16, 16)


# ---------------------------------------------------------------------------
# support fine-tuning


def test_finetune_stable_on_already_fit_support():
    items = [blob_patch(40 + i) for i in range(4)]
    pseudo = pseudo_set_from(items)
    theta = nnet.init_params(nnet.default_arch(ARCH), seed=8)
    theta_p, _ = training.fit_pseudo(theta, pseudo, cfg(epochs=60),
                                     patch_size=16, patches_per_image=1)
    support = items[:2]
    w = training.safe_class_weight([m for _, m in support])
    start = training.epoch_loss(theta_p, support, w)
    # gentle fine-tune rate: resuming on already-fit data must not diverge
    theta_star, log = training.finetune_support(
        theta_p, support, cfg(epochs=20, lr=1e-4, weight_decay=5e-4))
    end = training.epoch_loss(theta_star, support, w)
    assert end <= 1.05 * start


def test_finetune_zero_epochs_identity():
    theta_p = nnet.init_params(nnet.default_arch(ARCH), seed=9)
    theta_star, log = training.finetune_support(theta_p, [blob_patch(50)],
                                                cfg(epochs=0))
    assert params_equal(theta_star, theta_p)
    assert log == []


def test_finetune_empty_support_rejected():
    theta_p = nnet.init_params(nnet.default_arch(ARCH), seed=10)
    with pytest.raises(EmptySourceError):
        training.finetune_support(theta_p, [], cfg())


def test_phases_chain_and_reproduce_bitwise():
    sources = [small_source("s0"), small_source("s1", base_seed=70)]
    items = [blob_patch(80 + i) for i in range(2)]
    pseudo = pseudo_set_from(items)

    def run():
        theta, _ = training.pretrain_sources(sources, cfg(epochs=2),
                                             nnet.default_arch(ARCH))
        theta_p, _ = training.fit_pseudo(theta, pseudo, cfg(epochs=2),
                                         patch_size=16, patches_per_image=1)
        theta_star, _ = training.finetune_support(theta_p, items[:1], cfg(epochs=2))
        return theta_star

    assert params_equal(run(), run())


def test_loss_logs_finite():
    src = small_source("s0")
    _, log = training.pretrain_sources([src], cfg(epochs=10), nnet.default_arch(ARCH))
    assert all(np.isfinite(v) for v in log)
