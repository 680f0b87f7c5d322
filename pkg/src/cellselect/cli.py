"""Command-line entry points: one subcommand per pipeline stage plus the
end-to-end driver and a synthetic dataset generator.

Failures exit nonzero after printing a single-line machine-readable JSON
error object: {"error": code, "stage": ..., "message": ...}.
"""

import argparse
import json
import sys

from . import experiment, nnet, synth
from .config import load_config
from .errors import CellSelectError, MissingArtifactError, StageError


def _config_overrides(args):
    over = {}
    if getattr(args, "target", None):
        over["target"] = args.target
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "out", None):
        over["out_dir"] = args.out
    if getattr(args, "threads", None) is not None:
        over["threads"] = args.threads
    if getattr(args, "miou_mode", None):
        over["miou_mode"] = args.miou_mode
    return over


def _load(args):
    return load_config(args.config, overrides=_config_overrides(args))


def _context(cfg, args, need_plan=True):
    datasets = experiment.load_all_datasets(cfg)
    plan = None
    if need_plan:
        plan = experiment.plan_for_split(cfg, datasets, args.split)
    return datasets, plan


def cmd_synth_gen(args):
    manifests = synth.generate(args.out, domains=args.domains,
                               images_per_domain=args.images_per_domain,
                               seed=args.seed, size=args.size)
    print(json.dumps({
        "out_dir": args.out,
        "domains": [m["name"] for m in manifests],
        "suggested_gammas": {m["name"]: m["suggested_gamma"] for m in manifests},
        "config": f"{args.out}/config.json",
    }, indent=2))


def cmd_pretrain(args):
    cfg = _load(args)
    datasets, _ = _context(cfg, args, need_plan=False)
    experiment.stage_pretrain(cfg, cfg.target, datasets, use_cache=not args.no_cache)
    print(json.dumps({"checkpoint": experiment.pretrain_ckpt(cfg.out_dir, cfg.target)}))


def cmd_pseudolabel(args):
    cfg = _load(args)
    datasets, plan = _context(cfg, args)
    experiment.stage_pseudolabel(cfg, cfg.target, datasets, plan,
                                 use_cache=not args.no_cache)
    print(json.dumps({
        "checkpoint": experiment.pseudo_ckpt(cfg.out_dir, cfg.target, args.split),
        "masks": experiment.pseudo_dir(cfg.out_dir, cfg.target, args.split),
    }))


def cmd_score(args):
    cfg = _load(args)
    datasets, plan = _context(cfg, args)
    ckpt = experiment.pseudo_ckpt(cfg.out_dir, cfg.target, args.split)
    try:
        theta_prime = nnet.load_checkpoint(ckpt)
    except FileNotFoundError:
        raise MissingArtifactError(
            f"pseudo checkpoint missing: {ckpt} (run pseudolabel first)")
    pseudo_set = _pool_pseudo_set(cfg, datasets, plan)
    w = experiment.consistency_weight(cfg, pseudo_set)
    records = experiment.stage_score(cfg, cfg.target, datasets, plan,
                                     args.scorer, theta_prime, w)
    print(json.dumps({
        "scores": experiment.scores_csv(cfg.out_dir, cfg.target, args.split,
                                        args.scorer),
        "records": len(records),
    }))


def _pool_pseudo_set(cfg, datasets, plan):
    from .pseudolabel import generate_pipeline
    ds = datasets[cfg.target]
    images = [(i, ds.images[i]) for i in plan.pool_ids]
    return generate_pipeline(images, cfg.dataset_cfg(cfg.target).gamma)


def cmd_select(args):
    cfg = _load(args)
    datasets, plan = _context(cfg, args)
    result = experiment.stage_select(cfg, cfg.target, plan, args.scorer,
                                     args.shots, budget=args.budget)
    print(json.dumps({
        "selection": experiment.selection_json(cfg.out_dir, cfg.target,
                                               args.split, args.scorer, args.shots),
        "budget": result.budget,
        "threshold_score": result.threshold_score,
    }))


def cmd_finetune(args):
    cfg = _load(args)
    datasets, plan = _context(cfg, args)
    ckpt = experiment.pseudo_ckpt(cfg.out_dir, cfg.target, args.split)
    try:
        theta_prime = nnet.load_checkpoint(ckpt)
    except FileNotFoundError:
        raise MissingArtifactError(
            f"pseudo checkpoint missing: {ckpt} (run pseudolabel first)")
    experiment.stage_finetune(cfg, cfg.target, datasets, plan, args.scorer,
                              args.shots, theta_prime,
                              use_cache=not args.no_cache)
    print(json.dumps({
        "checkpoint": experiment.finetune_ckpt(cfg.out_dir, cfg.target,
                                               args.split, args.scorer,
                                               args.shots),
    }))


def cmd_evaluate(args):
    cfg = _load(args)
    datasets, plan = _context(cfg, args)
    if args.scorer and args.shots:
        ckpt = experiment.finetune_ckpt(cfg.out_dir, cfg.target, args.split,
                                        args.scorer, args.shots)
        scorer, shots = args.scorer, args.shots
    else:
        ckpt = experiment.pseudo_ckpt(cfg.out_dir, cfg.target, args.split)
        scorer, shots = experiment.PRETEXT_SCORER, 0
    try:
        params = nnet.load_checkpoint(ckpt)
    except FileNotFoundError:
        raise MissingArtifactError(f"checkpoint missing: {ckpt}")
    miou, preds = experiment.evaluate_on_test(cfg, params, datasets,
                                              cfg.target, plan)
    experiment.write_overlays(cfg, cfg.target, plan, scorer, shots, preds)
    print(json.dumps({
        "target": cfg.target,
        "scorer": scorer,
        "shots": shots,
        "split": args.split,
        "miou": miou,
    }))


def cmd_experiment(args):
    cfg = _load(args)
    out = experiment.run_experiment(cfg, use_cache=not args.no_cache)
    print(json.dumps({
        "out_dir": out.out_dir,
        "runs": len(out.results),
        "results_csv": f"{out.out_dir}/results.csv",
        "aggregate_md": f"{out.out_dir}/aggregate.md",
        "wilcoxon_csv": f"{out.out_dir}/wilcoxon.csv",
    }))


def _add_common(sub, split=True, scorer=False, shots=False):
    sub.add_argument("--config", required=True, help="experiment config JSON")
    sub.add_argument("--target", help="override the config's target dataset")
    sub.add_argument("--seed", type=int, help="override the config's seed")
    sub.add_argument("--out", help="override the config's output directory")
    sub.add_argument("--threads", type=int, help="scoring thread count")
    sub.add_argument("--miou-mode", dest="miou_mode",
                     choices=["fg", "fg_bg_mean"], help="IoU aggregation mode")
    sub.add_argument("--no-cache", action="store_true",
                     help="recompute even if checkpoints exist")
    if split:
        sub.add_argument("--split", type=int, default=0,
                         help="split repeat index (default 0)")
    if scorer:
        sub.add_argument("--scorer", required=True,
                         choices=["consistency", "entropy", "mc_dropout", "random"])
    if shots:
        sub.add_argument("--shots", type=int, required=True)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cellselect",
        description="Support-set selection for few-shot cell segmentation")
    subs = parser.add_subparsers(dest="command", required=True)

    sg = subs.add_parser("synth-gen", help="generate a synthetic dataset tree")
    sg.add_argument("--out", required=True)
    sg.add_argument("--domains", type=int, default=4)
    sg.add_argument("--images-per-domain", type=int, default=12)
    sg.add_argument("--seed", type=int, default=0)
    sg.add_argument("--size", type=int, default=64)
    sg.set_defaults(fn=cmd_synth_gen)

    pt = subs.add_parser("pretrain", help="train the generic source model")
    _add_common(pt, split=False)
    pt.set_defaults(fn=cmd_pretrain)

    pl = subs.add_parser("pseudolabel",
                         help="generate pseudo-labels and adapt the model")
    _add_common(pl)
    pl.set_defaults(fn=cmd_pseudolabel)

    sc = subs.add_parser("score", help="score the unlabeled patch pool")
    _add_common(sc, scorer=True)
    sc.set_defaults(fn=cmd_score)

    se = subs.add_parser("select", help="pick the budget-exact support set")
    _add_common(se, scorer=True, shots=True)
    se.add_argument("--budget", type=int,
                    help="override the shots-derived budget")
    se.set_defaults(fn=cmd_select)

    ft = subs.add_parser("finetune", help="fine-tune on the selected support set")
    _add_common(ft, scorer=True, shots=True)
    ft.set_defaults(fn=cmd_finetune)

    ev = subs.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    _add_common(ev)
    ev.add_argument("--scorer",
                    choices=["consistency", "entropy", "mc_dropout", "random"])
    ev.add_argument("--shots", type=int)
    ev.set_defaults(fn=cmd_evaluate)

    ex = subs.add_parser("experiment", help="run the full pipeline end to end")
    _add_common(ex, split=False)
    ex.set_defaults(fn=cmd_experiment)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.fn(args)
        return 0
    except StageError as exc:
        print(json.dumps({"error": exc.code, "stage": exc.stage,
                          "target": exc.target, "split": exc.split,
                          "message": str(exc)}))
        return 2
    except CellSelectError as exc:
        print(json.dumps({"error": exc.code, "stage": args.command,
                          "message": str(exc)}))
        return 2
    except OSError as exc:
        print(json.dumps({"error": "io_error", "stage": args.command,
                          "message": str(exc)}))
        return 3


if __name__ == "__main__":
    sys.exit(main())
