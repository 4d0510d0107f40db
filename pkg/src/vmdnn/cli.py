"""Command-line entry point: ``vmdnn <command> [--config PATH] [--out DIR] ...``.

Exit codes: 0 success, 1 gradient check above tolerance, 2 invalid config,
3 unusable output path, 4 missing prerequisite artifact, 5 numerical
divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from .analysis import (LAYERS, TeacherModel, evaluation_sets, export_csv, occlusion_pc_correlation,
                       occlusion_table, pca, record, success_table)
from .checkpoint import load_checkpoint, save_checkpoint
from .envtask import occlusion_points, read_dataset, write_dataset
from .errors import ConfigurationError, DivergenceError
from .experiment import (build_samples, condition_name, default_experiment, gestureless_trials, gesture_clips,
                         load_experiment, pretrain, read_clips, run_manifest, train_end_to_end,
                         training_trials, trials_from_manifest, write_clips)
from .training import finite_difference_check, gradcheck_case

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_CONFIG = 2
EXIT_OUTPUT = 3
EXIT_MISSING = 4
EXIT_DIVERGED = 5

SPLITS = ("TR", "OBJ", "SUB", "OBJxSUB")
GRADCHECK_TOL = 1e-4

log = logging.getLogger("vmdnn")


class CommandError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _setup_logging():
    level = os.environ.get("VMDNN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _prepare_out(path):
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = tempfile.NamedTemporaryFile(dir=path, prefix=".probe", delete=True)
        probe.close()
    except OSError as exc:
        raise CommandError(EXIT_OUTPUT, f"output directory {path} is not usable: {exc}") from exc
    return path


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise CommandError(EXIT_MISSING, f"missing prerequisite {what}: {path}")
    return path


def _write_json(path, obj):
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True))
    os.replace(tmp, path)


def write_loss_csv(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "wall_seconds", "mean_step_loss"])
        for r in curve:
            w.writerow([r.epoch, f"{r.mean_loss:.10g}", f"{r.wall_seconds:.3f}", f"{r.mean_step_loss:.10g}"])


def _conditions(exp):
    return [tuple(c) for c in exp.experiment.conditions]


def _ckpt(out, stage, vm, pm, seed):
    return out / stage / condition_name(vm, pm) / f"seed{seed}.ckpt"


def _progress(label):
    def report(rec):
        print(f"{label} epoch {rec.epoch:4d}  loss {rec.mean_loss:10.4f}  ({rec.wall_seconds:.1f}s)", flush=True)
    return report


# ---------------------------------------------------------------- commands


def cmd_gen_data(exp, out, args):
    geo = exp.task.geometry
    trials = training_trials(exp)
    sets = evaluation_sets(trials, exp.task.n_eval, exp.task.data_seed, geo)
    final = out / "data"
    staging = Path(tempfile.mkdtemp(prefix=".data-", dir=out))
    try:
        for split in SPLITS:
            write_dataset(staging / split, build_samples(sets[split], geo), exp.task.data_seed, split, geo)
        write_dataset(staging / "gestureless", build_samples(gestureless_trials(exp), geo),
                      exp.task.data_seed, "gestureless", geo)
        write_clips(staging / "gesture_clips", gesture_clips(trials, geo))
        if final.exists():
            shutil.rmtree(final)
        os.replace(staging, final)
    finally:
        if staging.exists():
            shutil.rmtree(staging)
    print(f"wrote {len(SPLITS) + 2} datasets under {final}")
    return {"datasets": [*SPLITS, "gestureless", "gesture_clips"]}


def cmd_pretrain(exp, out, args):
    gestureless, _ = read_dataset(_require(out / "data" / "gestureless" / "manifest.json", "gestureless dataset").parent)
    clips = read_clips(_require(out / "data" / "gesture_clips", "gesture clips"))
    for vm, pm in _conditions(exp):
        cfg = exp.condition_config(vm, pm)
        for seed in exp.experiment.seeds:
            theta, grasp, visual = pretrain(exp, cfg, seed, gestureless, clips,
                                            _progress(f"pretrain {condition_name(vm, pm)} seed {seed}"))
            path = _ckpt(out, "pretrain", vm, pm, seed)
            path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(cfg, theta, path)
            write_loss_csv(path.with_suffix(".grasp_loss.csv"), grasp.curve)
            write_loss_csv(path.with_suffix(".visual_loss.csv"), visual.curve)
    return {}


def cmd_train(exp, out, args):
    samples, _ = read_dataset(_require(out / "data" / "TR" / "manifest.json", "TR dataset").parent)
    for vm, pm in _conditions(exp):
        cfg = exp.condition_config(vm, pm)
        for seed in exp.experiment.seeds:
            theta0 = None
            if not args.from_scratch:
                _, theta0 = load_checkpoint(_require(_ckpt(out, "pretrain", vm, pm, seed),
                                                     "pre-trained checkpoint (or pass --from-scratch)"))
            res = train_end_to_end(exp, cfg, seed, samples, theta0,
                                   _progress(f"train {condition_name(vm, pm)} seed {seed}"))
            path = _ckpt(out, "train", vm, pm, seed)
            path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(cfg, res.params, path)
            write_loss_csv(path.with_suffix(".loss.csv"), res.curve)
    return {"from_scratch": bool(args.from_scratch)}


def _models(exp, out, args):
    if args.teacher_as_model:
        return {"TEACHER": {seed: TeacherModel() for seed in exp.experiment.seeds}}
    models = {}
    for vm, pm in _conditions(exp):
        models[condition_name(vm, pm)] = {
            seed: load_checkpoint(_require(_ckpt(out, "train", vm, pm, seed), "trained checkpoint"))
            for seed in exp.experiment.seeds}
    return models


def _eval_sets(out):
    sets = {}
    for split in SPLITS:
        _, manifest = read_dataset(_require(out / "data" / split / "manifest.json", f"{split} dataset").parent)
        sets[split] = trials_from_manifest(manifest)
    return sets


def _print_table(table):
    for r in table:
        print(f"{r.condition:12s} seed {r.seed}  {r.split:14s} n={r.n:3d}  success {r.success:.3f}  "
              f"confusion {r.confusion:.3f}  other {r.other:.3f}")


def cmd_eval(exp, out, args):
    sets = _eval_sets(out)
    models = _models(exp, out, args)
    table = success_table(models, sets, exp.task.geometry, workers=args.workers)
    (out / "eval").mkdir(exist_ok=True)
    export_csv(table, out / "eval" / "success.csv")
    _print_table(table)
    return {}


def cmd_occlude(exp, out, args):
    trials = _eval_sets(out)["TR"]
    models = _models(exp, out, args)
    table = occlusion_table(models, trials, exp.experiment.occlusion_onsets, exp.task.geometry, workers=args.workers)
    (out / "occlude").mkdir(exist_ok=True)
    export_csv(table, out / "occlude" / "occlusion.csv")
    _print_table(table)
    return {}


def cmd_analyze(exp, out, args):
    geo = exp.task.geometry
    trials = _eval_sets(out)["TR"]
    onset = exp.experiment.pca_onset
    if onset is None:
        onset = occlusion_points(trials[0], geo)[-1]
    adir = out / "analyze"
    adir.mkdir(exist_ok=True)
    rows = []
    for vm, pm in _conditions(exp):
        for seed in exp.experiment.seeds:
            cfg, theta = load_checkpoint(_require(_ckpt(out, "train", vm, pm, seed), "trained checkpoint"))
            trace = record(cfg, theta, trials, geo)
            for layer in exp.experiment.pca_layers:
                if layer not in LAYERS:
                    raise CommandError(EXIT_CONFIG, f"unknown layer {layer!r}; choose from {LAYERS}")
                res = pca(trace, layer, 3)
                export_csv(res, adir / f"pca_{condition_name(vm, pm)}_seed{seed}_{layer}.csv", layer=layer)
                r = occlusion_pc_correlation(cfg, theta, trials, onset, layer, 3, geo)
                rows.append([condition_name(vm, pm), seed, layer, onset] + [f"{v:.4f}" for v in r])
                print(f"{condition_name(vm, pm):12s} seed {seed} {layer}: explained "
                      f"{np.round(res.ratios[:3], 3).tolist()}  occlusion r {np.round(r, 3).tolist()}")
    with open(adir / "pc_correlation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["condition", "seed", "layer", "onset", "r_pc1", "r_pc2", "r_pc3"])
        w.writerows(rows)
    return {"pca_onset": onset}


def cmd_gradcheck(exp, out, args):
    seed = exp.experiment.seeds[0]
    cfg, theta, sample = gradcheck_case(seed)
    err = finite_difference_check(cfg, theta, sample, eps=1e-5)
    ok = err < GRADCHECK_TOL
    print(f"max relative error {err:.3e} over {len(theta)} parameters ({'ok' if ok else 'FAILED'})")
    with open(out / "gradcheck.txt", "w") as fh:
        fh.write(f"{err:.6e}\n")
    if not ok:
        raise CommandError(EXIT_GRADCHECK, f"gradient check failed: {err:.3e} >= {GRADCHECK_TOL}")
    return {"max_relative_error": err}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "occlude": cmd_occlude,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
}


def build_parser():
    p = argparse.ArgumentParser(prog="vmdnn", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="experiment JSON file (defaults built in)")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--seed", type=int, help="gen-data: data seed; other commands: run only this model seed")
    p.add_argument("--workers", type=int, default=1, help="evaluation worker processes")
    p.add_argument("--from-scratch", action="store_true", help="train without a pre-trained checkpoint")
    p.add_argument("--teacher-as-model", action="store_true", help="evaluate the scripted teacher instead")
    return p


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        exp = load_experiment(args.config) if args.config else default_experiment()
        if args.seed is not None:
            if args.command == "gen-data":
                exp.task.data_seed = args.seed
            else:
                exp.experiment.seeds = [args.seed]
    except ConfigurationError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        out = _prepare_out(args.out or exp.output_dir)
        extra = COMMANDS[args.command](exp, out, args) or {}
        seeds = [exp.task.data_seed] if args.command == "gen-data" else exp.experiment.seeds
        flags = {"from_scratch": args.from_scratch, "teacher_as_model": args.teacher_as_model,
                 "workers": args.workers}
        _write_json(out / f"manifest_{args.command}.json",
                    run_manifest(exp, args.command, seeds, {"flags": flags, **extra}))
    except CommandError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    except ConfigurationError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc} (layer {exc.layer}, step {exc.step})", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
