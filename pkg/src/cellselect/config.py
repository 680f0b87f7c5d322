"""Experiment configuration: a single JSON file drives every stage.

Numeric defaults follow the published recipe: learning rate 1e-4, weight
decay 5e-4, 100 pseudo-adaptation epochs, 20 fine-tune epochs, dropout 0.5,
10 MC passes, distortion magnitude 1.3, 256-pixel patches.
"""

import json
import os
from dataclasses import dataclass, field

from .errors import MalformedConfigError
from .training import TrainConfig

DEFAULT_TRAIN = {
    "pretrain": {"epochs": 100, "lr": 1e-4, "weight_decay": 5e-4,
                 "batch_size": 4, "mode": "joint",
                 "reptile_inner_steps": 5, "reptile_eps": 0.1},
    "pseudo": {"epochs": 100, "lr": 1e-4, "weight_decay": 5e-4,
               "batch_size": 4},
    "finetune": {"epochs": 20, "lr": 1e-4, "weight_decay": 5e-4,
                 "batch_size": 4},
}


@dataclass
class DatasetConfig:
    gamma: float = 0.5
    psi: float = 1.3
    patches_per_image: int = 100


@dataclass
class PipelineConfig:
    data_root: str
    out_dir: str
    target: str
    datasets: dict                      # name -> DatasetConfig
    patch_size: int = 256
    arch_channels: tuple = (32, 64, 128, 64, 32)
    dropout_p: float = 0.5
    mc_passes: int = 10
    weight_orientation: str = "bg_over_fg"
    consistency_weight: float = None    # override; default from pseudo-labels
    aug_set: str = "pixel"
    scorers: tuple = ("consistency", "entropy", "mc_dropout", "random")
    shots: tuple = (1, 3, 5, 7, 10)
    seed: int = 0
    pool_fraction: float = 0.5
    n_repeats: int = 10
    miou_mode: str = "fg"
    miou_threshold: float = 0.5
    overlay_samples: int = 2
    threads: int = 1
    train: dict = field(default_factory=dict)  # phase -> TrainConfig

    def dataset_cfg(self, name):
        if name not in self.datasets:
            raise MalformedConfigError(f"dataset {name!r} missing from config")
        return self.datasets[name]

    def train_cfg(self, phase):
        return self.train[phase]


def _expect(cond, message):
    if not cond:
        raise MalformedConfigError(message)


def _train_config(phase, overrides, seed):
    merged = dict(DEFAULT_TRAIN[phase])
    merged.update(overrides or {})
    merged.setdefault("seed", seed)
    allowed = {"epochs", "lr", "weight_decay", "batch_size", "seed", "mode",
               "reptile_inner_steps", "reptile_eps"}
    unknown = set(merged) - allowed
    _expect(not unknown, f"{phase}: unknown training keys {sorted(unknown)}")
    try:
        return TrainConfig(**merged)
    except (TypeError, ValueError) as exc:
        raise MalformedConfigError(f"{phase}: {exc}") from exc


def parse_config(raw, base_dir="."):
    """Validate a config dict into a PipelineConfig."""
    _expect(isinstance(raw, dict), "config must be a JSON object")
    for key in ("data_root", "out_dir", "target", "datasets"):
        _expect(key in raw, f"config missing required key {key!r}")

    data_root = raw["data_root"]
    if not os.path.isabs(data_root):
        data_root = os.path.join(base_dir, data_root)
    _expect(os.path.isdir(data_root), f"data_root {data_root!r} does not exist")

    out_dir = raw["out_dir"]
    if not os.path.isabs(out_dir):
        out_dir = os.path.join(base_dir, out_dir)

    datasets = {}
    _expect(isinstance(raw["datasets"], dict) and raw["datasets"],
            "datasets must be a non-empty object")
    for name, entry in raw["datasets"].items():
        _expect(os.path.isdir(os.path.join(data_root, name, "images")),
                f"dataset {name!r} not found under {data_root}")
        entry = entry or {}
        gamma = float(entry.get("gamma", 0.5))
        psi = float(entry.get("psi", 1.3))
        ppi = int(entry.get("patches_per_image", 100))
        _expect(0.0 <= gamma <= 1.0, f"{name}: gamma must be in [0, 1]")
        _expect(psi > 0.0, f"{name}: psi must be positive")
        _expect(ppi >= 1, f"{name}: patches_per_image must be >= 1")
        datasets[name] = DatasetConfig(gamma, psi, ppi)

    target = raw["target"]
    _expect(target in datasets, f"target {target!r} not among configured datasets")

    seed = int(raw.get("seed", 0))
    train = {phase: _train_config(phase, raw.get(phase), seed)
             for phase in ("pretrain", "pseudo", "finetune")}

    arch_channels = tuple(int(c) for c in raw.get("arch_channels",
                                                  (32, 64, 128, 64, 32)))
    _expect(len(arch_channels) == 5 and all(c >= 1 for c in arch_channels),
            "arch_channels must be five positive widths")

    patch_size = int(raw.get("patch_size", 256))
    _expect(patch_size >= 4 and patch_size % 4 == 0,
            "patch_size must be a positive multiple of 4")

    dropout_p = float(raw.get("dropout_p", 0.5))
    _expect(0.0 <= dropout_p <= 1.0, "dropout_p must be in [0, 1]")

    scorers = tuple(raw.get("scorers",
                            ("consistency", "entropy", "mc_dropout", "random")))
    from .scoring import SCORERS
    for s in scorers:
        _expect(s in SCORERS, f"unknown scorer {s!r}")
    _expect(len(scorers) >= 1, "need at least one scorer")

    shots = tuple(int(s) for s in raw.get("shots", (1, 3, 5, 7, 10)))
    _expect(all(s >= 1 for s in shots) and shots, "shots must be positive")

    pool_fraction = float(raw.get("pool_fraction", 0.5))
    _expect(0.0 < pool_fraction < 1.0, "pool_fraction must be in (0, 1)")

    n_repeats = int(raw.get("n_repeats", 10))
    _expect(n_repeats >= 1, "n_repeats must be >= 1")

    miou_mode = raw.get("miou_mode", "fg")
    _expect(miou_mode in ("fg", "fg_bg_mean"), "miou_mode must be fg|fg_bg_mean")

    aug_set = raw.get("aug_set", "pixel")
    _expect(aug_set in ("pixel", "affine"), "aug_set must be pixel|affine")

    weight_orientation = raw.get("weight_orientation", "bg_over_fg")
    _expect(weight_orientation in ("bg_over_fg", "fg_over_bg"),
            "weight_orientation must be bg_over_fg|fg_over_bg")

    cw = raw.get("consistency_weight")
    if cw is not None:
        cw = float(cw)
        _expect(cw > 0, "consistency_weight must be positive")

    return PipelineConfig(
        data_root=data_root,
        out_dir=out_dir,
        target=target,
        datasets=datasets,
        patch_size=patch_size,
        arch_channels=arch_channels,
        dropout_p=dropout_p,
        mc_passes=int(raw.get("mc_passes", 10)),
        weight_orientation=weight_orientation,
        consistency_weight=cw,
        aug_set=aug_set,
        scorers=scorers,
        shots=shots,
        seed=seed,
        pool_fraction=pool_fraction,
        n_repeats=n_repeats,
        miou_mode=miou_mode,
        miou_threshold=float(raw.get("miou_threshold", 0.5)),
        overlay_samples=int(raw.get("overlay_samples", 2)),
        threads=int(raw.get("threads", 1)),
        train=train,
    )


def load_config(path, overrides=None):
    """Read and validate a config JSON; optional CLI overrides win."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise MalformedConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedConfigError(f"config is not valid JSON: {exc}") from exc
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})
    return parse_config(raw, base_dir=os.path.dirname(os.path.abspath(path)))
