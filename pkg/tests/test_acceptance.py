"""Acceptance criteria.

Each test runs one criterion at its stated tolerance and prints a pass line;
the two heavyweight criteria share one benchmark run (plus a second run for
the byte-identity check).
"""

import hashlib
import itertools
import json
import math
import os
import time

import numpy as np
import pytest

from cellselect import (
    evalstats,
    experiment,
    imaging,
    nnet,
    pngio,
    pseudolabel,
    scoring,
    selection,
    synth,
)
from cellselect.config import load_config

TINY = (4, 8, 12, 8, 4)


def report(n, name, detail=""):
    suffix = f" ({detail})" if detail else ""
    print(f"ACCEPTANCE {n:02d} {name}: PASS{suffix}")


def rand_image(h, w, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.random((h, w))


# ---------------------------------------------------------------------------
# 1. gradient correctness


def test_criterion_01_gradient_correctness():
    t0 = time.monotonic()
    params = nnet.init_params(nnet.default_arch(TINY), seed=101)
    assert params.n_params() <= 5000
    rng = np.random.Generator(np.random.PCG64(102))
    image = rng.random((16, 16))
    target = (rng.random((16, 16)) < 0.4).astype(np.uint8)
    err = nnet.grad_check(params, image, target, w=2.0,
                          n_sample=200, h=1e-5, seed=103)
    elapsed = time.monotonic() - t0
    assert err <= 1e-3
    assert elapsed < 30.0
    report(1, "gradient-correctness",
           f"max rel err {err:.2e} over 200 params in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. consistency-score oracle equivalence


def _scalar_aug(kind, x, psi):
    h, w = x.shape
    out = np.zeros_like(x)
    if kind == "autocontrast":
        mn = min(min(r) for r in x.tolist())
        mx = max(max(r) for r in x.tolist())
        if mx == mn:
            return x.copy()
        for r in range(h):
            for c in range(w):
                out[r, c] = (x[r, c] - mn) / (mx - mn)
    elif kind == "brightness":
        for r in range(h):
            for c in range(w):
                out[r, c] = min(max(psi * x[r, c], 0.0), 1.0)
    else:  # sharpness
        kernel = [[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]]
        for r in range(h):
            for c in range(w):
                sm = 0.0
                for a in range(3):
                    for b in range(3):
                        rr = min(max(r + a - 1, 0), h - 1)
                        cc = min(max(c + b - 1, 0), w - 1)
                        sm += kernel[a][b] / 13.0 * x[rr, cc]
                out[r, c] = min(max(x[r, c] + (psi - 1.0) * (x[r, c] - sm),
                                    0.0), 1.0)
    return out


def scalar_consistency(params, patch, psi, w):
    base = nnet.forward(params, patch)
    h, ww = base.shape
    total = 0.0
    for kind in ("autocontrast", "brightness", "sharpness"):
        pa = nnet.forward(params, _scalar_aug(kind, patch, psi))
        term = 0.0
        for r in range(h):
            for c in range(ww):
                term += (w * base[r, c] * math.log(pa[r, c])
                         + (1.0 - base[r, c]) * math.log(1.0 - pa[r, c]))
        total += -term / (h * ww)
    return total


def test_criterion_02_consistency_oracle_equivalence():
    params = nnet.init_params(nnet.default_arch(TINY), seed=201)
    worst = 0.0
    for seed in range(50):
        patch = rand_image(16, 16, 210 + seed)
        got = scoring.consistency_score(params, patch, psi=1.3, w=3.0)
        want = scalar_consistency(params, patch, psi=1.3, w=3.0)
        worst = max(worst, abs(got - want))
    assert worst <= 1e-9
    report(2, "consistency-oracle-equivalence",
           f"max |diff| {worst:.2e} over 50 patches")


# ---------------------------------------------------------------------------
# 3. analytic anchors


def test_criterion_03_analytic_anchors():
    half = nnet.zero_params(nnet.default_arch(TINY))
    patch = rand_image(16, 16, 301)
    cons = scoring.consistency_score(half, patch, psi=1.3, w=1.0)
    assert abs(cons - 3.0 * math.log(2.0)) <= 1e-9
    ent = scoring.entropy_score(half, patch)
    assert abs(ent - math.log(2.0)) <= 1e-12
    p0 = nnet.init_params(nnet.default_arch(TINY), dropout_p=0.0, seed=302)
    assert scoring.mc_dropout_score(p0, patch, passes=10, seed=303) == \
        scoring.entropy_score(p0, patch)
    report(3, "analytic-anchors",
           "3*ln2, ln2, and bitwise MC/entropy equality")


# ---------------------------------------------------------------------------
# 4. selection optimality


def test_criterion_04_selection_optimality():
    from cellselect.imaging import PatchRef
    from cellselect.scoring import ScoreRecord
    rng = np.random.Generator(np.random.PCG64(401))
    for trial in range(200):
        n = int(rng.integers(2, 13))
        budget = int(rng.integers(1, min(n, 4) + 1))
        scores = rng.random(n).tolist()
        records = [ScoreRecord(PatchRef(f"p{i:02d}", 0, 0, 32), "consistency", v)
                   for i, v in enumerate(scores)]
        result = selection.select_support(records, budget)
        assert len(result.chosen) == budget
        by_key = {r.patch.key(): r.value for r in records}
        got = math.fsum(by_key[p.key()] for p in result.chosen)
        best = max(math.fsum(c) for c in itertools.combinations(scores, budget))
        assert got == best
    report(4, "selection-optimality", "200 pools match exhaustive enumeration")


# ---------------------------------------------------------------------------
# 5. budget arithmetic


def test_criterion_05_budget_arithmetic():
    assert selection.budget_from_shots(3, 100) == 300    # TNBC 3-shot
    assert selection.budget_from_shots(1, 500) == 500    # ssTEM 1-shot
    assert selection.budget_from_shots(10, 400) == 4000  # EM 10-shot
    report(5, "budget-arithmetic", "300 / 500 / 4000 exact")


# ---------------------------------------------------------------------------
# benchmark fixture shared by 6, 9, 10


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    base = tmp_path_factory.mktemp("acceptance")
    data = str(base / "data")
    synth.generate(data, domains=4, images_per_domain=12, seed=0, size=64)
    cfg_path = os.path.join(data, "config.json")

    t0 = time.monotonic()
    cfg_a = load_config(cfg_path, overrides={"out_dir": str(base / "run_a")})
    out_a = experiment.run_experiment(cfg_a)
    elapsed = time.monotonic() - t0

    cfg_b = load_config(cfg_path, overrides={"out_dir": str(base / "run_b")})
    experiment.run_experiment(cfg_b)
    return {
        "data": data,
        "cfg_a": cfg_a,
        "cfg_b": cfg_b,
        "out_a": out_a,
        "elapsed": elapsed,
    }


# ---------------------------------------------------------------------------
# 6. pseudo-label pipeline quality


def test_criterion_06_pseudo_label_pipeline(benchmark):
    data = benchmark["data"]
    manifest = json.load(open(os.path.join(data, "darkdisks", "manifest.json")))
    gamma = manifest["suggested_gamma"]
    ious = []
    images = []
    for image_id in manifest["images"]:
        img = pngio.read_gray(os.path.join(data, "darkdisks", "images",
                                           image_id + ".png"))
        gt = pngio.read_mask(os.path.join(data, "darkdisks", "labels",
                                          image_id + ".png"))
        images.append((image_id, img))
        pl = imaging.dilate2x2(imaging.threshold(imaging.equalize(img), gamma))
        ious.append(np.count_nonzero(pl & gt) / np.count_nonzero(pl | gt))
    assert np.mean(ious) >= 0.6

    out = pseudolabel.generate_pipeline(images, gamma)
    for (image_id, img, mask) in out.items:
        manual = imaging.dilate2x2(imaging.threshold(imaging.equalize(img), gamma))
        assert np.array_equal(mask, manual)
    report(6, "pseudo-label-pipeline",
           f"dark-cell IoU {np.mean(ious):.3f} at gamma {gamma}; "
           "composition bitwise")


# ---------------------------------------------------------------------------
# 7. Wilcoxon exactness


def _wilcoxon_bruteforce(pairs):
    diffs = [o - b for b, o in pairs if o != b]
    n = len(diffs)
    absd = [abs(d) for d in diffs]
    order = sorted(range(n), key=lambda i: absd[i])
    ranks = [0.0] * n
    i = 0
    while i < n:
        j = i
        while j + 1 < n and absd[order[j + 1]] == absd[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2.0 + 1.0
        i = j + 1
    w_obs = sum(r for r, d in zip(ranks, diffs) if d > 0)
    count = sum(1 for signs in itertools.product((False, True), repeat=n)
                if sum(r for r, s in zip(ranks, signs) if s) >= w_obs)
    return count / 2.0 ** n


def test_criterion_07_wilcoxon_exactness():
    pairs5 = [(0.0, d) for d in (0.1, 0.2, 0.3, 0.4, 0.5)]
    assert evalstats.wilcoxon_one_sided(pairs5) == 0.03125

    rng = np.random.Generator(np.random.PCG64(701))
    checked = 0
    for n in range(1, 13):
        for variant in range(4):
            base = rng.random(n)
            if variant == 0:
                ours = base + rng.normal(0, 0.3, n)
            elif variant == 1:
                ours = base + rng.choice([-0.2, 0.1, 0.1, 0.3], n)  # ties
            elif variant == 2:
                ours = base + np.abs(rng.normal(0, 0.2, n))         # positive
            else:
                ours = base - np.abs(rng.normal(0, 0.2, n))         # negative
            pairs = list(zip(base.tolist(), ours.tolist()))
            if all(o == b for b, o in pairs):
                continue
            assert evalstats.wilcoxon_one_sided(pairs) == \
                _wilcoxon_bruteforce(pairs)
            checked += 1
    assert checked >= 40
    report(7, "wilcoxon-exactness",
           f"{checked} cases match sign enumeration bitwise; n=5 gives 0.03125")


# ---------------------------------------------------------------------------
# 8. morphology and threshold properties


def test_criterion_08_morphology_threshold_properties():
    rng = np.random.Generator(np.random.PCG64(801))
    for _ in range(1000):
        m1 = (rng.random((16, 16)) < 0.3).astype(np.uint8)
        m2 = (m1 | (rng.random((16, 16)) < 0.2)).astype(np.uint8)
        d1 = imaging.dilate2x2(m1)
        d2 = imaging.dilate2x2(m2)
        assert np.all(d1 >= m1)      # extensivity
        assert np.all(d1 <= d2)      # monotonicity
    for _ in range(1000):
        x = rng.random((16, 16))
        g1, g2 = sorted(rng.random(2))
        assert np.all(imaging.threshold(x, g1) <= imaging.threshold(x, g2))
    report(8, "morphology-threshold-properties",
           "1000 masks (dilation) + 1000 images (threshold)")


# ---------------------------------------------------------------------------
# 9. end-to-end directional check


def test_criterion_09_end_to_end(benchmark):
    out = benchmark["out_a"]
    cfg = benchmark["cfg_a"]
    elapsed = benchmark["elapsed"]
    assert elapsed <= 900.0, f"experiment took {elapsed:.0f}s"

    pretext_mean = np.mean([r.miou for r in out.pretext_results])

    def mean_for(scorer, shots=None):
        vals = [r.miou for r in out.results if r.scorer == scorer
                and (shots is None or r.shots == shots)]
        assert vals
        return float(np.mean(vals))

    # (a) fine-tuning beats the pseudo-adapted model by >= 5 points
    for scorer in cfg.scorers:
        assert mean_for(scorer) >= pretext_mean + 0.05, scorer

    # (b) consistency within a point of random, per shot setting
    for shots in cfg.shots:
        assert mean_for("consistency", shots) >= mean_for("random", shots) - 0.01

    for fname in ("results.csv", "aggregate.csv", "aggregate.md", "wilcoxon.csv"):
        assert os.path.isfile(os.path.join(cfg.out_dir, fname))
    wilcoxon_rows = open(os.path.join(cfg.out_dir, "wilcoxon.csv")).readlines()
    assert len(wilcoxon_rows) >= 1 + len([s for s in cfg.scorers
                                          if s != "consistency"]) * len(cfg.shots)

    gain = 100 * (mean_for("consistency") - pretext_mean)
    report(9, "end-to-end-directional",
           f"fine-tune gain +{gain:.1f}pp over pretext; "
           f"consistency vs random within slack; {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 10. determinism


def _tree_digests(root):
    out = {}
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for fname in sorted(filenames):
            full = os.path.join(dirpath, fname)
            out[os.path.relpath(full, root)] = hashlib.blake2b(
                open(full, "rb").read(), digest_size=16).hexdigest()
    return out


def test_criterion_10_determinism(benchmark):
    a = _tree_digests(benchmark["cfg_a"].out_dir)
    b = _tree_digests(benchmark["cfg_b"].out_dir)
    assert a.keys() == b.keys()
    diffs = [k for k in a if a[k] != b[k]]
    assert not diffs, f"files differ between reruns: {diffs[:10]}"
    report(10, "determinism",
           f"{len(a)} output files byte-identical across reruns")
