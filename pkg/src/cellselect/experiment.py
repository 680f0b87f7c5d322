"""End-to-end experiment driver.

Chains the pipeline stages (pretrain, pseudo-label adaptation, scoring,
selection, fine-tuning, evaluation) over the leave-one-dataset-out split
plans, caches phase checkpoints, and writes the result table, aggregate
report, significance test, and confusion overlays. The CLI stage subcommands
call the same stage functions, so running them manually produces the same
artifacts as one ``experiment`` invocation.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import evalstats, imaging, nnet, pngio, pseudolabel, scoring, selection, training
from .datasets import load_dataset
from .errors import (
    CellSelectError,
    MissingArtifactError,
    StageError,
    SupportTestOverlapError,
)
from .evalstats import RunResult

PRETEXT_SCORER = "none"  # results row for the pseudo-adapted model, no fine-tune


# ---------------------------------------------------------------------------
# artifact layout


def pretrain_ckpt(out, target):
    return os.path.join(out, "checkpoints", target, "pretrain.ckpt")


def pseudo_ckpt(out, target, split):
    return os.path.join(out, "checkpoints", target, f"split{split}", "pseudo.ckpt")


def finetune_ckpt(out, target, split, scorer, shots):
    return os.path.join(out, "checkpoints", target, f"split{split}",
                        f"{scorer}_{shots}shot.ckpt")


def pseudo_dir(out, target, split):
    return os.path.join(out, "pseudolabels", target, f"split{split}")


def scores_csv(out, target, split, scorer):
    return os.path.join(out, "scores", target, f"split{split}", f"{scorer}.csv")


def selection_json(out, target, split, scorer, shots):
    return os.path.join(out, "selections", target, f"split{split}",
                        f"{scorer}_{shots}shot.json")


def overlay_png(out, target, split, scorer, shots, image_id):
    return os.path.join(out, "overlays", target, f"split{split}",
                        f"{scorer}_{shots}shot_{image_id}.png")


def _ensure_parent(path):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    return path


def _write_log(path, log):
    with open(path, "w") as fh:
        json.dump([{"epoch": i, "loss": v} for i, v in enumerate(log)], fh)
        fh.write("\n")


def _stage(stage, target, split, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except CellSelectError as exc:
        raise StageError(f"{stage} failed for target={target} split={split}: {exc}",
                         stage=stage, target=target, split=split, cause=exc) from exc


# ---------------------------------------------------------------------------
# stages


def load_all_datasets(cfg):
    return {name: load_dataset(cfg.data_root, name) for name in sorted(cfg.datasets)}


def source_patch_sets(cfg, datasets, sources):
    """Labeled patch sets for pretraining, one per source dataset."""
    sets = []
    for name in sources:
        ds = datasets[name]
        ppi = cfg.dataset_cfg(name).patches_per_image
        items = []
        for image_id in ds.image_ids():
            if image_id not in ds.labels:
                continue
            img = ds.images[image_id]
            mask = ds.labels[image_id]
            for ref in imaging.extract_patches(image_id, img, cfg.patch_size, ppi):
                items.append((ref.crop(img), ref.crop(mask)))
        sets.append(training.LabeledSet(name, items))
    return sets


def stage_pretrain(cfg, target, datasets, use_cache=True):
    """Generic model from the non-target sources; cached per target."""
    path = pretrain_ckpt(cfg.out_dir, target)
    if use_cache and os.path.isfile(path):
        return nnet.load_checkpoint(path)
    sources = sorted(n for n in cfg.datasets if n != target)
    sets = source_patch_sets(cfg, datasets, sources)
    arch = nnet.default_arch(cfg.arch_channels)
    params, log = training.pretrain_sources(
        sets, cfg.train_cfg("pretrain"), arch, dropout_p=cfg.dropout_p,
        weight_orientation=cfg.weight_orientation)
    _ensure_parent(path)
    nnet.save_checkpoint(params, path)
    _write_log(path.replace(".ckpt", "_log.json"), log)
    return params


def stage_pseudolabel(cfg, target, datasets, plan, use_cache=True):
    """Pseudo-labels for the split's pool images plus the adapted model.

    Only pool images feed the pretext fit, keeping the test set untouched
    by any training signal.
    """
    ds = datasets[target]
    gamma = cfg.dataset_cfg(target).gamma
    images = [(i, ds.images[i]) for i in plan.pool_ids]
    pseudo_set = pseudolabel.generate_pipeline(images, gamma)
    out_masks = pseudo_dir(cfg.out_dir, target, plan.split_seed)
    pseudolabel.write_pseudo_set(pseudo_set, out_masks)

    path = pseudo_ckpt(cfg.out_dir, target, plan.split_seed)
    if use_cache and os.path.isfile(path):
        return nnet.load_checkpoint(path), pseudo_set
    theta = stage_pretrain(cfg, target, datasets, use_cache=use_cache)
    theta_prime, log = training.fit_pseudo(
        theta, pseudo_set, cfg.train_cfg("pseudo"),
        patch_size=cfg.patch_size,
        patches_per_image=cfg.dataset_cfg(target).patches_per_image,
        weight_orientation=cfg.weight_orientation)
    _ensure_parent(path)
    nnet.save_checkpoint(theta_prime, path)
    _write_log(path.replace(".ckpt", "_log.json"), log)
    return theta_prime, pseudo_set


def pool_patch_refs(cfg, target, datasets, plan):
    ds = datasets[target]
    ppi = cfg.dataset_cfg(target).patches_per_image
    refs = []
    for image_id in plan.pool_ids:
        refs.extend(imaging.extract_patches(image_id, ds.images[image_id],
                                            cfg.patch_size, ppi))
    return refs


def consistency_weight(cfg, pseudo_set):
    if cfg.consistency_weight is not None:
        return cfg.consistency_weight
    return training.safe_class_weight(pseudo_set.masks(), cfg.weight_orientation)


def stage_score(cfg, target, datasets, plan, scorer, theta_prime, w):
    ds = datasets[target]
    refs = pool_patch_refs(cfg, target, datasets, plan)
    get_pixels = lambda ref: ref.crop(ds.images[ref.image_id])
    records = scoring.score_pool(
        theta_prime, refs, get_pixels, scorer,
        psi=cfg.dataset_cfg(target).psi, w=w, aug_set=cfg.aug_set,
        mc_passes=cfg.mc_passes,
        seed=scoring.derive_seed(cfg.seed, target, plan.split_seed, scorer),
        threads=cfg.threads)
    path = scores_csv(cfg.out_dir, target, plan.split_seed, scorer)
    _ensure_parent(path)
    scoring.write_scores_csv(records, path)
    return records


def stage_select(cfg, target, plan, scorer, shots, budget=None):
    path = scores_csv(cfg.out_dir, target, plan.split_seed, scorer)
    if not os.path.isfile(path):
        raise MissingArtifactError(f"scores file missing: {path} (run score first)")
    records = scoring.read_scores_csv(path)
    if budget is None:
        budget = selection.budget_from_shots(
            shots, cfg.dataset_cfg(target).patches_per_image)
    result = selection.select_support(records, budget)
    out = selection_json(cfg.out_dir, target, plan.split_seed, scorer, shots)
    _ensure_parent(out)
    selection.write_selection_json(result, records, out)
    return result


def support_items(cfg, target, datasets, plan, result):
    """Expert-labeled crops for the selected patches (the oracle step)."""
    ds = datasets[target]
    pool = set(plan.pool_ids)
    test = set(plan.test_ids)
    items = []
    for ref in result.chosen:
        if ref.image_id in test:
            raise SupportTestOverlapError(
                f"selected patch {ref} comes from test image {ref.image_id}")
        if ref.image_id not in pool:
            raise SupportTestOverlapError(
                f"selected patch {ref} is outside the pool")
        img = ds.images[ref.image_id]
        mask = ds.label_for(ref.image_id)
        items.append((ref.crop(img), ref.crop(mask)))
    return items


def stage_finetune(cfg, target, datasets, plan, scorer, shots, theta_prime,
                   use_cache=True):
    path = finetune_ckpt(cfg.out_dir, target, plan.split_seed, scorer, shots)
    if use_cache and os.path.isfile(path):
        return nnet.load_checkpoint(path)
    sel_path = selection_json(cfg.out_dir, target, plan.split_seed, scorer, shots)
    if not os.path.isfile(sel_path):
        raise MissingArtifactError(
            f"selection file missing: {sel_path} (run select first)")
    result = selection.read_selection_json(sel_path)
    items = support_items(cfg, target, datasets, plan, result)
    theta_star, log = training.finetune_support(
        theta_prime, items, cfg.train_cfg("finetune"),
        weight_orientation=cfg.weight_orientation)
    _ensure_parent(path)
    nnet.save_checkpoint(theta_star, path)
    _write_log(path.replace(".ckpt", "_log.json"), log)
    return theta_star


def evaluate_on_test(cfg, params, datasets, target, plan):
    """mIoU of a model over the split's full-resolution test images."""
    ds = datasets[target]
    test = set(plan.test_ids)
    overlap = test & _support_image_ids(cfg, target, plan)
    if overlap:
        raise SupportTestOverlapError(
            f"test images {sorted(overlap)} appear in a support selection")
    preds = []
    for image_id in plan.test_ids:
        pred = nnet.forward(params, ds.images[image_id])
        preds.append((image_id, pred, ds.label_for(image_id)))
    miou = float(np.mean([
        evalstats.image_iou(p, g, cfg.miou_threshold, cfg.miou_mode)
        for _, p, g in preds]))
    return miou, preds


def _support_image_ids(cfg, target, plan):
    """Image ids referenced by any selection written for this split."""
    ids = set()
    sel_dir = os.path.join(cfg.out_dir, "selections", target,
                           f"split{plan.split_seed}")
    if os.path.isdir(sel_dir):
        for fname in sorted(os.listdir(sel_dir)):
            if fname.endswith(".json"):
                result = selection.read_selection_json(os.path.join(sel_dir, fname))
                ids.update(ref.image_id for ref in result.chosen)
    return ids


def write_overlays(cfg, target, plan, scorer, shots, preds):
    count = min(cfg.overlay_samples, len(preds))
    for image_id, pred, gt in preds[:count]:
        mask = (pred > cfg.miou_threshold).astype(np.uint8)
        path = overlay_png(cfg.out_dir, target, plan.split_seed, scorer, shots,
                           image_id)
        _ensure_parent(path)
        pngio.write_rgb(path, imaging.confusion_overlay(mask, gt))


# ---------------------------------------------------------------------------
# reports


def _summarize(results):
    """Per-(scorer, shots) mean and std; std is None for singleton groups."""
    groups = {}
    for res in results:
        groups.setdefault((res.scorer, res.shots), []).append(res.miou)
    return {key: (float(np.mean(vals)),
                  float(np.std(vals, ddof=1)) if len(vals) > 1 else None,
                  len(vals))
            for key, vals in sorted(groups.items())}


def write_aggregate_reports(cfg, target, results, path_csv, path_md):
    stats = _summarize(results)
    shots_list = sorted({shots for _, shots in stats})
    scorer_order = [s for s in (PRETEXT_SCORER,) + tuple(cfg.scorers)
                    if any(k[0] == s for k in stats)]
    with open(path_csv, "w") as fh:
        fh.write("scorer," + ",".join(f"{s}shot_mean,{s}shot_std"
                                      for s in shots_list) + "\n")
        for scorer in scorer_order:
            cells = []
            for s in shots_list:
                if (scorer, s) in stats:
                    mean, std, _ = stats[(scorer, s)]
                    std_str = "" if std is None else f"{std:.6f}"
                    cells.append(f"{mean:.6f},{std_str}")
                else:
                    cells.append(",")
            fh.write(scorer + "," + ",".join(cells) + "\n")
    ppi = cfg.dataset_cfg(target).patches_per_image
    with open(path_md, "w") as fh:
        fh.write(f"## Target: {target}\n\n")
        header = ["Method"] + [
            f"{s}-shot (budget={selection.budget_from_shots(s, ppi)})"
            if s > 0 else "no fine-tune"
            for s in shots_list]
        fh.write("| " + " | ".join(header) + " |\n")
        fh.write("|" + "---|" * len(header) + "\n")
        for scorer in scorer_order:
            row = [scorer]
            for s in shots_list:
                if (scorer, s) in stats:
                    mean, std, _ = stats[(scorer, s)]
                    cell = f"{100 * mean:.1f}%"
                    if std is not None:
                        cell += f" ±{100 * std:.1f}"
                    row.append(cell)
                else:
                    row.append("-")
            fh.write("| " + " | ".join(row) + " |\n")
    return stats


def write_wilcoxon_report(cfg, results, path):
    """Consistency vs each baseline, paired over split seeds, per shots."""
    by_key = {}
    for r in results:
        by_key[(r.scorer, r.shots, r.split_seed)] = r.miou
    shots_list = sorted({r.shots for r in results if r.scorer != PRETEXT_SCORER})
    seeds = sorted({r.split_seed for r in results})
    rows = []
    baselines = [s for s in cfg.scorers if s != "consistency"]
    if "consistency" in cfg.scorers:
        for baseline in baselines:
            for shots in shots_list:
                pairs = []
                for seed in seeds:
                    b = by_key.get((baseline, shots, seed))
                    o = by_key.get(("consistency", shots, seed))
                    if b is not None and o is not None:
                        pairs.append((b, o))
                if not pairs:
                    continue
                try:
                    p = evalstats.wilcoxon_one_sided(pairs)
                    p_str = repr(p)
                except CellSelectError:
                    p_str = ""  # identical mIoU on every split
                rows.append((baseline, shots, len(pairs), p_str))
    with open(path, "w") as fh:
        fh.write("baseline,shots,n_pairs,p_value\n")
        for baseline, shots, n, p_str in rows:
            fh.write(f"{baseline},{shots},{n},{p_str}\n")
    return rows


# ---------------------------------------------------------------------------
# driver


@dataclass
class ExperimentOutput:
    results: list = field(default_factory=list)          # fine-tuned runs
    pretext_results: list = field(default_factory=list)  # theta-prime only
    aggregate: dict = field(default_factory=dict)
    wilcoxon: list = field(default_factory=list)
    out_dir: str = ""


def run_experiment(cfg, use_cache=True):
    os.makedirs(cfg.out_dir, exist_ok=True)
    datasets = _stage("load", cfg.target, None, load_all_datasets, cfg)
    ids = {name: ds.image_ids() for name, ds in datasets.items()}
    _, plans = evalstats.make_splits(ids, cfg.target, cfg.pool_fraction,
                                     cfg.n_repeats, cfg.seed)
    target = cfg.target
    out = ExperimentOutput(out_dir=cfg.out_dir)

    _stage("pretrain", target, None, stage_pretrain, cfg, target, datasets,
           use_cache)
    for plan in plans:
        split = plan.split_seed
        theta_prime, pseudo_set = _stage(
            "pseudolabel", target, split, stage_pseudolabel,
            cfg, target, datasets, plan, use_cache)
        w = consistency_weight(cfg, pseudo_set)

        miou_pretext, preds = _stage(
            "evaluate", target, split, evaluate_on_test,
            cfg, theta_prime, datasets, target, plan)
        out.pretext_results.append(
            RunResult(target, PRETEXT_SCORER, 0, split, miou_pretext))
        if split == plans[0].split_seed:
            write_overlays(cfg, target, plan, PRETEXT_SCORER, 0, preds)

        for scorer in cfg.scorers:
            _stage("score", target, split, stage_score,
                   cfg, target, datasets, plan, scorer, theta_prime, w)
            for shots in cfg.shots:
                _stage("select", target, split, stage_select,
                       cfg, target, plan, scorer, shots)
                theta_star = _stage(
                    "finetune", target, split, stage_finetune,
                    cfg, target, datasets, plan, scorer, shots, theta_prime,
                    use_cache)
                miou, preds = _stage(
                    "evaluate", target, split, evaluate_on_test,
                    cfg, theta_star, datasets, target, plan)
                out.results.append(RunResult(target, scorer, shots, split, miou))
                if split == plans[0].split_seed:
                    write_overlays(cfg, target, plan, scorer, shots, preds)

    all_rows = out.results + out.pretext_results
    evalstats.write_results_csv(all_rows, os.path.join(cfg.out_dir, "results.csv"))
    out.aggregate = write_aggregate_reports(
        cfg, target, all_rows,
        os.path.join(cfg.out_dir, "aggregate.csv"),
        os.path.join(cfg.out_dir, "aggregate.md"))
    out.wilcoxon = write_wilcoxon_report(
        cfg, out.results, os.path.join(cfg.out_dir, "wilcoxon.csv"))
    return out


def plan_for_split(cfg, datasets, split):
    ids = {name: ds.image_ids() for name, ds in datasets.items()}
    _, plans = evalstats.make_splits(ids, cfg.target, cfg.pool_fraction,
                                     cfg.n_repeats, cfg.seed)
    for plan in plans:
        if plan.split_seed == split:
            return plan
    raise MissingArtifactError(
        f"split {split} outside configured n_repeats={cfg.n_repeats}")
