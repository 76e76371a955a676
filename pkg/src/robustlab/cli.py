"""Command-line surface: train, eval, sweep, landscape, pseudolabel.

Run directories are append-only: an existing run refuses to be overwritten
unless --force is given or --resume continues it.  The run root defaults to
./runs and can be moved with the ROBUSTLAB_RUN_ROOT environment variable.
All failures exit nonzero with a single `error[<kind>]: message` line.
"""

import argparse
import csv
import json
import os
import shutil
import sys

import numpy as np

from . import checkpoint, config as config_mod, data, evaluation, training
from .attacks import PerturbationSet
from .errors import (
    AttackDiverged,
    ConfigurationError,
    ContractViolation,
    TrainingDiverged,
)

RUN_ROOT_ENV = "ROBUSTLAB_RUN_ROOT"


def _run_root():
    return os.environ.get(RUN_ROOT_ENV, "runs")


def _fail(kind, message, code=2):
    print(f"error[{kind}]: {message}", file=sys.stderr)
    return code


def _split_overrides(extra):
    """Leftover CLI tokens of the form --key=value become config overrides."""
    overrides = []
    for token in extra:
        if token.startswith("--") and "=" in token:
            overrides.append(token[2:])
        else:
            raise ConfigurationError(
                f"unrecognized argument {token!r} (overrides look like "
                f"--section.key=value)")
    return overrides


def _load_splits(cfg):
    name = cfg["data.dataset"]
    root = cfg["data.dir"]
    if name in ("digits", "typeset"):
        full = data.load_dataset(name)
        n_test = cfg["data.n_test"] or max(1, len(full) // 4)
        sizes = {"test": n_test, "val": cfg["data.n_val"], "train": -1}
        parts = data.split_dataset(full, sizes, seed=1234)
        train, val, test = parts["train"], parts["val"], parts["test"]
    else:
        train_full = data.load_dataset(name, root, split="train")
        test = data.load_dataset(name, root, split="test")
        parts = data.split_dataset(train_full,
                                   {"val": cfg["data.n_val"], "train": -1},
                                   seed=1234)
        train, val = parts["train"], parts["val"]
        if cfg["data.n_test"]:
            test = test.subset(range(cfg["data.n_test"]))
    if cfg["data.n_train"]:
        train = train.subset(range(min(cfg["data.n_train"], len(train))))
    return train, val, test


def _assemble_streams(cfg, train):
    """Labeled examples plus optional pseudo-labeled examples from a CSV."""
    labeled_size = cfg["data.labeled_size"]
    ratio = data.parse_ratio(cfg["data.ratio"])
    if labeled_size and labeled_size < len(train):
        labeled_ds = train.subset(range(labeled_size))
        pool = train.images[labeled_size:]
    else:
        labeled_ds = train
        pool = None
    labeled = labeled_ds.examples()
    pseudo = None
    if cfg["data.pseudo_csv"]:
        if pool is None:
            raise ConfigurationError(
                "data.pseudo_csv needs data.labeled_size to carve out a pool")
        pseudo = []
        with open(cfg["data.pseudo_csv"]) as f:
            for row in csv.DictReader(f):
                idx = int(row["pool_id"])
                if idx >= pool.shape[0]:
                    raise ConfigurationError(
                        f"pseudo CSV pool_id {idx} outside pool of "
                        f"{pool.shape[0]}")
                pseudo.append(data.Example(
                    image=pool[idx], label=int(row["predicted_label"]),
                    is_pseudo=True, score=float(row["score"])))
    if ratio < 1.0 and not pseudo:
        raise ConfigurationError(
            "data.ratio below 10:0 requires data.pseudo_csv")
    return labeled, pseudo


def cmd_train(args, overrides):
    cfg = config_mod.load_config(args.config, overrides)
    run_dir = args.run_dir or os.path.join(_run_root(), "train")
    snapshot = os.path.join(run_dir, "config.cfg")
    if os.path.exists(snapshot) and not (args.force or args.resume):
        return _fail("run-dir", f"{run_dir} already holds a run; "
                                f"pass --force to replace or --resume")
    if args.force and os.path.isdir(run_dir) and not args.resume:
        shutil.rmtree(run_dir)
    os.makedirs(run_dir, exist_ok=True)
    with open(snapshot, "w") as f:
        f.write(cfg.snapshot())

    train, val, test = _load_splits(cfg)
    labeled, pseudo = _assemble_streams(cfg, train)
    tc = cfg.train_config()
    winner, results = training.train_dual(
        tc, labeled, pseudo, (val.images, val.labels),
        run_dir=run_dir, resume=args.resume)

    manifest = {
        "winner_seed_index": winner["seed_index"],
        "winner_seed": winner["seed"],
        "candidates": [{"seed": r["seed"], "seed_index": r["seed_index"],
                        "robust_val_acc": r["robust_val_acc"]}
                       for r in results],
    }
    with open(os.path.join(run_dir, "selection.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    winner_best = os.path.join(run_dir, f"seed{winner['seed_index']}",
                               "best.ckpt")
    shutil.copyfile(winner_best, os.path.join(run_dir, "best.ckpt"))
    print(f"run complete: {run_dir} (winner seed {winner['seed']}, "
          f"validation robust accuracy {winner['robust_val_acc']:.4f})")
    return 0


def cmd_eval(args, overrides):
    cfg = config_mod.load_config(args.config, overrides)
    params, manifest = checkpoint.load_params(args.checkpoint)
    if args.dataset:
        cfg.set("data.dataset", args.dataset)
    shape = params.spec.input_shape
    cfg.set("model.input", ",".join(str(v) for v in shape))
    if args.norm:
        cfg.set("threat.norm", args.norm)
    if args.epsilon is not None:
        cfg.set("threat.epsilon", args.epsilon)
    elif str(cfg["threat.epsilon"]) == config_mod.DEFAULTS["threat.epsilon"][0]:
        cfg.set("threat.epsilon", "auto")  # dataset-scale default
    pset = cfg.pset()

    _, _, test = _load_splits(cfg)
    out_dir = args.out or os.path.join(_run_root(), "eval")
    os.makedirs(out_dir, exist_ok=True)
    report, rows, robust = evaluation.standard_protocol(
        params, (test.images, test.labels), pset,
        seed=args.seed, batch_size=cfg["eval.batch"],
        steps_scale=cfg["eval.steps_scale"],
        restarts_scale=cfg["eval.restarts_scale"],
        pgd40_step_size=None if cfg["eval.step_size"] == "auto"
        else config_mod._number(str(cfg["eval.step_size"])))

    report_path = os.path.join(out_dir, "report.json")
    with open(report_path, "w") as f:
        json.dump(report.to_json(), f, indent=2, sort_keys=True)
    from .attacks import write_attack_csv
    write_attack_csv(rows, os.path.join(out_dir, "per_example.csv"))
    print(json.dumps(report.to_json()["per_attack"], indent=2))
    print(f"clean {report.clean_accuracy:.4f}  "
          f"pgd40 {report.extras['pgd40_margin_accuracy']:.4f}  "
          f"robust {report.final_robust_accuracy:.4f}  -> {report_path}")
    return 0


SWEEPABLE_HINT = "any documented config key, e.g. train.wa_tau or attack.steps"


def cmd_sweep(args, overrides):
    base_overrides = list(overrides)
    axis = args.axis
    if axis not in config_mod.DEFAULTS:
        return _fail("sweep", f"{axis!r} is not a config key; sweepable: "
                              f"{SWEEPABLE_HINT}")
    values = args.values.split(",")
    run_root = args.run_dir or os.path.join(_run_root(), "sweep")
    os.makedirs(run_root, exist_ok=True)
    rows = []
    for value in values:
        tag = value.replace("/", "_").replace(":", "-")
        sub = os.path.join(run_root, f"{axis.replace('.', '_')}={tag}")
        cfg = config_mod.load_config(args.config,
                                     base_overrides + [f"{axis}={value}"])
        train_args = argparse.Namespace(config=None, run_dir=sub, force=True,
                                        resume=False)
        snapshot_overrides = [f"{k}={config_mod._format(v)}"
                              for k, v in cfg.values.items()]
        rc = cmd_train(train_args, snapshot_overrides)
        if rc != 0:
            return rc
        params, _ = checkpoint.load_params(os.path.join(sub, "best.ckpt"))
        _, _, test = _load_splits(cfg)
        report, _, _ = evaluation.standard_protocol(
            params, (test.images, test.labels), cfg.pset(),
            seed=args.seed, batch_size=cfg["eval.batch"],
            steps_scale=cfg["eval.steps_scale"],
            restarts_scale=cfg["eval.restarts_scale"])
        train_attack = cfg.train_attack()
        rows.append({
            axis: value,
            "train_step_size": train_attack.step_size,
            "clean_accuracy": report.clean_accuracy,
            "pgd40_margin_accuracy": report.extras["pgd40_margin_accuracy"],
            "stacked_robust_accuracy": report.final_robust_accuracy,
        })
    table = os.path.join(run_root, "sweep.csv")
    with open(table, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"sweep table -> {table}")
    for row in rows:
        print(row)
    return 0


def cmd_landscape(args, overrides):
    cfg = config_mod.load_config(args.config, overrides)
    params, _ = checkpoint.load_params(args.checkpoint)
    shape = params.spec.input_shape
    cfg.set("model.input", ",".join(str(v) for v in shape))
    if args.dataset:
        cfg.set("data.dataset", args.dataset)
    if args.epsilon is not None:
        cfg.set("threat.epsilon", args.epsilon)
    elif str(cfg["threat.epsilon"]) == config_mod.DEFAULTS["threat.epsilon"][0]:
        cfg.set("threat.epsilon", "auto")
    _, _, test = _load_splits(cfg)
    out_dir = args.out or os.path.join(_run_root(), "landscape")
    os.makedirs(out_dir, exist_ok=True)
    indices = [int(v) for v in args.indices.split(",")]
    for idx in indices:
        if idx >= len(test):
            return _fail("landscape", f"index {idx} outside test set of "
                                      f"{len(test)}")
        grid = evaluation.loss_landscape(
            params, test.images[idx:idx + 1], int(test.labels[idx]),
            cfg.pset(), grid_n=args.grid_n, seed=args.seed)
        csv_path = os.path.join(out_dir, f"landscape_{idx}.csv")
        json_path = os.path.join(out_dir, f"landscape_{idx}.json")
        evaluation.write_landscape(grid, csv_path, json_path)
        print(f"example {idx}: clean margin {grid.clean_margin:.4f} "
              f"-> {csv_path}")
    return 0


def cmd_pseudolabel(args, overrides):
    cfg = config_mod.load_config(args.config, overrides)
    classifier, _ = checkpoint.load_params(args.classifier)
    if args.dataset:
        cfg.set("data.dataset", args.dataset)
    cfg.set("model.input",
            ",".join(str(v) for v in classifier.spec.input_shape))
    train, _, test = _load_splits(cfg)
    labeled_size = args.labeled_size or cfg["data.labeled_size"]
    if not labeled_size or labeled_size >= len(train):
        return _fail("pseudolabel",
                     "need --labeled-size below the train split size to "
                     "carve out an unlabeled pool")
    pool = train.images[labeled_size:]
    examples, rows = data.pseudo_label(classifier, pool, test.images,
                                       args.n, classifier.spec.num_classes)
    out = args.out or os.path.join(_run_root(), "pseudo_labels.csv")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    data.write_pseudo_label_csv(rows, out)
    print(f"{len(rows)} pseudo-labels -> {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="robustlab",
        description="desk-scale adversarial training workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="adversarial training with dual-seed "
                                     "selection")
    p.add_argument("--config", help="config file of key = value lines")
    p.add_argument("--run-dir", help="output directory (default under "
                                     "$ROBUSTLAB_RUN_ROOT)")
    p.add_argument("--force", action="store_true",
                   help="replace an existing run directory")
    p.add_argument("--resume", action="store_true",
                   help="continue from the last checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="stacked robustness evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--dataset")
    p.add_argument("--norm", choices=["linf", "l2"])
    p.add_argument("--epsilon")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="one-axis ablation sweep")
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--config")
    p.add_argument("--run-dir")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("landscape", help="margin-surface grids around test "
                                         "examples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--indices", default="0", help="comma-separated test "
                                                  "indices")
    p.add_argument("--grid-n", type=int, default=41)
    p.add_argument("--config")
    p.add_argument("--dataset")
    p.add_argument("--epsilon")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_landscape)

    p = sub.add_parser("pseudolabel", help="label an unlabeled pool with a "
                                           "standard classifier")
    p.add_argument("--classifier", required=True, help="classifier checkpoint")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--labeled-size", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_pseudolabel)
    return parser


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = _split_overrides(extra)
        return args.fn(args, overrides)
    except ConfigurationError as e:
        return _fail("config", str(e))
    except ContractViolation as e:
        return _fail("contract", str(e))
    except (AttackDiverged, TrainingDiverged) as e:
        return _fail("diverged", str(e), code=3)
    except FileNotFoundError as e:
        return _fail("io", str(e))


if __name__ == "__main__":
    sys.exit(main())
