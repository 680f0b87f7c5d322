"""Evaluation metrics and protocol statistics.

Foreground IoU at a probability threshold, the leave-one-dataset-out split
plan with repeated seeded pool/test partitions, mean/std aggregation, and a
one-sided Wilcoxon signed-rank test (exact by sign enumeration for small n,
normal approximation with continuity correction beyond).
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import AllZeroDifferencesError, ShapeMismatchError, UnknownTargetError
from .scoring import derive_seed

EXACT_WILCOXON_MAX_N = 20


def image_iou(pred, gt, threshold=0.5, mode="fg"):
    """IoU of a thresholded prediction map against a binary mask.

    Foreground mode: |pred & gt| / |pred | gt|, with 1.0 when both are empty.
    fg_bg_mean averages the foreground IoU with the background IoU.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = (np.asarray(gt) != 0)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred {pred.shape} vs gt {gt.shape}")
    pm = pred > threshold

    def fg_iou(a, b):
        union = np.count_nonzero(a | b)
        if union == 0:
            return 1.0
        return np.count_nonzero(a & b) / union

    if mode == "fg":
        return fg_iou(pm, gt)
    if mode == "fg_bg_mean":
        return 0.5 * (fg_iou(pm, gt) + fg_iou(~pm, ~gt))
    raise ValueError(f"unknown miou mode {mode!r}")


def mean_iou(pairs, threshold=0.5, mode="fg"):
    """Mean image IoU over (prediction map, ground truth) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty evaluation set")
    return float(np.mean([image_iou(p, g, threshold, mode) for p, g in pairs]))


# ---------------------------------------------------------------------------
# split protocol


@dataclass
class SplitPlan:
    target_dataset: str
    pool_ids: list
    test_ids: list
    split_seed: int


def make_splits(dataset_ids, target_id, pool_fraction=0.5, n_repeats=10, seed=0):
    """Leave-one-dataset-out plan: every other dataset is a source; the
    target's images are partitioned into pool/test ``n_repeats`` times.

    ``dataset_ids`` maps dataset name to its list of image ids. Returns
    (sources, [SplitPlan...]); each plan's pool and test are disjoint, sorted,
    and together exhaust the target.
    """
    if target_id not in dataset_ids:
        raise UnknownTargetError(f"unknown target dataset {target_id!r}")
    if not 0.0 < pool_fraction < 1.0:
        raise ValueError("pool_fraction must be in (0, 1)")
    sources = sorted(d for d in dataset_ids if d != target_id)
    ids = sorted(dataset_ids[target_id])
    n = len(ids)
    if n < 2:
        raise ValueError(f"target {target_id!r} needs at least 2 images to split")
    k = int(round(pool_fraction * n))
    k = min(max(k, 1), n - 1)
    plans = []
    for r in range(n_repeats):
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, target_id, "split", r)))
        perm = rng.permutation(n)
        pool = sorted(ids[i] for i in perm[:k])
        test = sorted(ids[i] for i in perm[k:])
        plans.append(SplitPlan(target_id, pool, test, split_seed=r))
    return sources, plans


# ---------------------------------------------------------------------------
# result records and aggregation


@dataclass
class RunResult:
    target: str
    scorer: str
    shots: int
    split_seed: int
    miou: float


def aggregate(results):
    """Mean and sample (n-1) standard deviation per (scorer, shots) group."""
    results = list(results)
    if not results:
        raise ValueError("no results to aggregate")
    groups = {}
    for res in results:
        groups.setdefault((res.scorer, res.shots), []).append(res.miou)
    out = {}
    for key in sorted(groups):
        vals = groups[key]
        if not vals:
            raise ValueError(f"empty result group {key}")
        if len(vals) < 2:
            raise ValueError(f"group {key} needs >= 2 results for a std")
        mean = float(np.mean(vals))
        std = float(np.std(vals, ddof=1))
        out[key] = (mean, std, len(vals))
    return out


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank, one-sided


def _rank_abs(diffs):
    """Average ranks of |d|, ties sharing the mean rank."""
    absd = np.abs(diffs)
    order = np.argsort(absd, kind="stable")
    ranks = np.empty(len(absd))
    i = 0
    while i < len(absd):
        j = i
        while j + 1 < len(absd) and absd[order[j + 1]] == absd[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def wilcoxon_one_sided(pairs):
    """p-value for H_a: ours > baseline, from (baseline, ours) pairs.

    Differences ours - baseline; zeros dropped before ranking. Exact p by
    summing over all 2^n sign assignments when n <= 20 (computed via an
    integer distribution over doubled rank sums, identical to enumeration),
    otherwise a normal approximation with continuity and tie corrections.
    """
    diffs = np.asarray([o - b for b, o in pairs], dtype=np.float64)
    diffs = diffs[diffs != 0.0]
    n = len(diffs)
    if n == 0:
        raise AllZeroDifferencesError("all paired differences are zero")
    ranks = _rank_abs(diffs)
    w_plus = float(ranks[diffs > 0].sum())

    if n <= EXACT_WILCOXON_MAX_N:
        # doubled ranks are exact integers (average ranks are multiples of 1/2)
        r2 = [int(round(2.0 * r)) for r in ranks]
        w2 = int(round(2.0 * w_plus))
        counts = {0: 1}
        for r in r2:
            nxt = {}
            for s, c in counts.items():
                nxt[s] = nxt.get(s, 0) + c
                nxt[s + r] = nxt.get(s + r, 0) + c
            counts = nxt
        n_ge = sum(c for s, c in counts.items() if s >= w2)
        return n_ge / float(2 ** n)

    mean = n * (n + 1) / 4.0
    # tie correction on the variance
    _, tie_counts = np.unique(np.abs(diffs), return_counts=True)
    tie_term = float(((tie_counts ** 3) - tie_counts).sum()) / 48.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    z = (w_plus - mean - 0.5) / math.sqrt(var)
    return 0.5 * math.erfc(z / math.sqrt(2.0))


# ---------------------------------------------------------------------------
# CSV plumbing

RESULTS_HEADER = ["target", "scorer", "shots", "split_seed", "miou"]


def write_results_csv(results, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULTS_HEADER)
        for r in results:
            writer.writerow([r.target, r.scorer, r.shots, r.split_seed, repr(r.miou)])


def read_results_csv(path):
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != RESULTS_HEADER:
            raise ValueError(f"{path}: unexpected results header {header}")
        for row in reader:
            out.append(RunResult(row[0], row[1], int(row[2]), int(row[3]),
                                 float(row[4])))
    return out
