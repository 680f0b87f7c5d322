"""Patch informativeness scorers.

The augmentation-consistency score is the cross-entropy between the model's
prediction on a patch and its predictions on augmented copies; high score
means inconsistent (informative). Baselines: Shannon entropy of a single
forward pass, MC-dropout entropy of the averaged stochastic passes, and a
seeded uniform random score.
"""

import csv
import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import imaging, nnet
from .errors import CellSelectError
from .imaging import PatchRef

SCORERS = ("consistency", "entropy", "mc_dropout", "random")

PIXEL_AUGS = ("autocontrast", "brightness", "sharpness")
AFFINE_AUGS = ("rotate30", "translate_x", "translate_y")


@dataclass(frozen=True)
class ScoreRecord:
    patch: PatchRef
    scorer: str
    value: float
    psi_used: Optional[float] = None


def _augmented(patch, name, psi):
    if name == "autocontrast":
        return imaging.autocontrast(patch)
    if name == "brightness":
        return imaging.brightness(patch, psi)
    if name == "sharpness":
        return imaging.sharpness(patch, psi)
    if name == "rotate30":
        return imaging.rotate30(patch)
    if name == "translate_x":
        return imaging.translate_x(patch)
    if name == "translate_y":
        return imaging.translate_y(patch)
    raise ValueError(f"unknown augmentation {name!r}")


def consistency_score(params, patch, psi, w=1.0, aug_set="pixel"):
    """Summed per-augmentation BCE between base and augmented predictions.

    score = sum_A -(1/N) * sum[ w*p*log(p_A) + (1-p)*log(1-p_A) ]
    where p is the prediction on the patch and p_A on its augmented copy.
    """
    if psi <= 0:
        raise ValueError("psi must be positive")
    augs = PIXEL_AUGS if aug_set == "pixel" else AFFINE_AUGS
    if aug_set not in ("pixel", "affine"):
        raise ValueError(f"unknown augmentation set {aug_set!r}")
    base = nnet.forward(params, patch)
    n = base.size
    score = 0.0
    for name in augs:
        pa = nnet.forward(params, _augmented(patch, name, psi))
        term = -(w * base * np.log(pa) + (1.0 - base) * np.log(1.0 - pa)).sum() / n
        score += term
    return float(score)


def entropy_score(params, patch):
    """Mean per-pixel binary entropy of a single forward pass."""
    p = nnet.forward(params, patch)
    return float(-(p * np.log(p) + (1.0 - p) * np.log(1.0 - p)).mean())


def _entropy_of_map(p):
    return float(-(p * np.log(p) + (1.0 - p) * np.log(1.0 - p)).mean())


def mc_dropout_score(params, patch, passes=10, seed=0):
    """Entropy of the running mean over dropout-active forward passes.

    The mean uses the running update m += (x - m) / k, which is exact when
    all passes agree (dropout_p = 0 then matches entropy_score bitwise).
    Pass seeds derive from (seed, pass index) so results are order-free.
    """
    if passes < 1:
        raise ValueError("passes must be >= 1")
    mean = None
    for t in range(passes):
        out = nnet.forward(params, patch, dropout_active=True,
                           rng_seed=derive_seed(seed, "pass", t))
        if mean is None:
            mean = out.copy()
        else:
            mean += (out - mean) / (t + 1)
    return _entropy_of_map(mean)


def derive_seed(*parts):
    """Stable 63-bit seed from arbitrary key parts (platform-independent)."""
    key = "|".join(str(p) for p in parts).encode()
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def random_score(ref, seed):
    """Uniform [0, 1) draw keyed by (seed, image_id, row, col)."""
    key = f"{seed}|{ref.image_id}|{ref.row}|{ref.col}".encode()
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return int.from_bytes(digest, "little") / 2.0 ** 64


def score_patch(params, ref, pixels, scorer, *, psi=1.3, w=1.0,
                aug_set="pixel", mc_passes=10, seed=0):
    """One ScoreRecord for a patch; dispatches on the scorer name."""
    if scorer == "consistency":
        value = consistency_score(params, pixels, psi, w, aug_set)
        return ScoreRecord(ref, scorer, value, psi_used=psi)
    if scorer == "entropy":
        return ScoreRecord(ref, scorer, entropy_score(params, pixels))
    if scorer == "mc_dropout":
        value = mc_dropout_score(params, pixels, passes=mc_passes,
                                 seed=derive_seed(seed, ref.image_id, ref.row, ref.col))
        return ScoreRecord(ref, scorer, value)
    if scorer == "random":
        return ScoreRecord(ref, scorer, random_score(ref, seed))
    raise ValueError(f"unknown scorer {scorer!r}")


def score_pool(params, pool, get_pixels, scorer, *, psi=1.3, w=1.0,
               aug_set="pixel", mc_passes=10, seed=0, threads=1):
    """Score every patch in the pool against fixed model parameters.

    ``get_pixels`` maps a PatchRef to its grayscale crop. Values are pure
    functions of (params, pixels, config, seed), so pool order never changes
    any value; records come back in pool order.
    """
    if not pool:
        raise ValueError("empty patch pool")

    def one(ref):
        try:
            return score_patch(params, ref, get_pixels(ref), scorer,
                               psi=psi, w=w, aug_set=aug_set,
                               mc_passes=mc_passes, seed=seed)
        except CellSelectError as exc:
            exc.context["patch"] = ref.key()
            raise

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(one, pool))
    return [one(ref) for ref in pool]


# ---------------------------------------------------------------------------
# scores CSV: image_id,row,col,size,scorer,score,psi — one row per record

SCORES_HEADER = ["image_id", "row", "col", "size", "scorer", "score", "psi"]


def write_scores_csv(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORES_HEADER)
        for rec in records:
            writer.writerow([
                rec.patch.image_id, rec.patch.row, rec.patch.col, rec.patch.size,
                rec.scorer, repr(rec.value),
                "" if rec.psi_used is None else repr(rec.psi_used),
            ])


def read_scores_csv(path):
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != SCORES_HEADER:
            raise ValueError(f"{path}: unexpected scores header {header}")
        for row in reader:
            ref = PatchRef(row[0], int(row[1]), int(row[2]), int(row[3]))
            psi = float(row[6]) if row[6] else None
            records.append(ScoreRecord(ref, row[4], float(row[5]), psi))
    return records
