"""Command-line entry point.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.
"""

import argparse
import os
import sys
from dataclasses import replace

import numpy as np
import yaml

from .cil import Arm, ablation_csv, ablation_table, benchmark_dataset, benchmark_scene_spec, run_ablation, run_cil
from .cloud import CloudFormat, SceneSpec, generate_scene, load_cloud, save_cloud
from .config import parse_config, write_effective_config
from .evaluation import ConfusionMatrix, overlap_degree, report_csv
from .exceptions import ConfigKeyError, InvalidConfigError, InvalidPlanError, ProtoPropelError
from .propel import train_novel
from .protoguard import load_model, save_model, train_base
from .validation import IGNORE

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class ConfigProblem(Exception):
    """Raised for anything the user can fix by changing arguments or config."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigProblem(message)


def load_scene_spec(path):
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ConfigProblem(f"{path}: scene spec must be a mapping")
    try:
        return SceneSpec.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigProblem(f"{path}: {exc}") from None


def load_data(cfg):
    """Train clouds, test clouds and the class count described by ``cfg``."""
    if cfg.train_clouds is not None:
        train = [load_cloud(p) for p in cfg.train_clouds]
        test = [load_cloud(p) for p in cfg.test_clouds]
        n_classes = max(int(c.labels.max()) for c in train + test) + 1
        return train, test, n_classes
    spec = load_scene_spec(cfg.scene) if cfg.scene else benchmark_scene_spec(cfg.seed)
    train, test = benchmark_dataset(cfg.n_train_scenes, cfg.n_test_scenes, seed=cfg.seed, spec=spec)
    return train, test, spec.n_classes


def _setup(args):
    cfg = parse_config(args.config)
    train, test, n_classes = load_data(cfg)
    plan = cfg.plan(n_classes)
    return cfg, train, test, plan


def _out_dir(args, cfg):
    out = getattr(args, "out_dir", None) or cfg.out_dir
    if out:
        os.makedirs(out, exist_ok=True)
    return out


def cmd_gen_scene(args):
    spec = load_scene_spec(args.spec)
    if args.seed is not None:
        spec = spec.with_seed(args.seed)
    cloud = generate_scene(spec)
    save_cloud(cloud, args.out, CloudFormat.XYZRGBL_TEXT)
    print(f"wrote {cloud.n_points} points to {args.out}")


def cmd_train_base(args):
    cfg, train, _, plan = _setup(args)
    arm = Arm(cfg.arm)
    model_cfg = cfg.model_config()
    if arm is not Arm.JT:
        model_cfg = replace(model_cfg, use_prototypes=arm.prototypes)
    labels = [plan.to_internal(c.labels) for c in train]
    history = []
    model = train_base(train, plan.n_base, cfg.train_config(), model_cfg, labels=labels, history=history)
    save_model(model, args.out)
    write_effective_config(cfg, args.out + ".effective_config.yaml")
    final = history[-1] if history else float("nan")
    print(f"base model over {plan.n_base} classes saved to {args.out} (final loss {final:.6f})")


def cmd_train_novel(args):
    cfg, train, _, plan = _setup(args)
    arm = Arm(cfg.arm)
    if arm is Arm.JT:
        raise ConfigProblem("arm JT has no novel phase")
    base = load_model(args.base).freeze()
    seen = [plan.n_base] + [plan.seen_after(s) for s in range(len(plan.step_sizes))]
    if base.n_classes not in seen[:-1]:
        raise ConfigProblem(f"base model has {base.n_classes} classes, which matches no step of the plan")
    step = seen.index(base.n_classes)
    n_prev, n_seen = seen[step], seen[step + 1]
    y_bg = plan.n_classes
    internal = [plan.to_internal(c.labels) for c in train]
    annotations = [np.where((lab >= n_prev) & (lab < n_seen), lab, y_bg) for lab in internal]
    result = train_novel(
        base,
        train,
        annotations,
        n_seen - n_prev,
        y_bg,
        cfg.novel_train_config(),
        cfg.propel_config(),
        mode=arm.novel_mode,
        k=cfg.k,
        update_novel_prototypes=arm.prototypes,
    )
    save_model(result.model, args.out)
    write_effective_config(cfg, args.out + ".effective_config.yaml")
    print(f"step {step + 1}: model over {n_seen} classes saved to {args.out}")


def cmd_run_cil(args):
    cfg, train, test, plan = _setup(args)
    out = _out_dir(args, cfg)
    report = run_cil(train, test, plan, cfg.arm, cfg.settings())
    table = report.to_table()
    if out:
        write_effective_config(cfg, os.path.join(out, "effective_config.yaml"))
        with open(os.path.join(out, "report.csv"), "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
        with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as fh:
            fh.write(table)
    sys.stdout.write(table)


def cmd_run_ablation(args):
    cfg, train, test, plan = _setup(args)
    out = _out_dir(args, cfg)
    reports = run_ablation(train, test, plan, cfg.settings())
    table = ablation_table(reports)
    if out:
        write_effective_config(cfg, os.path.join(out, "effective_config.yaml"))
        with open(os.path.join(out, "ablation.csv"), "w", encoding="utf-8") as fh:
            fh.write(ablation_csv(reports))
        with open(os.path.join(out, "ablation.txt"), "w", encoding="utf-8") as fh:
            fh.write(table)
    sys.stdout.write(table)


def read_labels(path):
    """Labels from a cloud file, or from a file with one integer per line."""
    with open(path, encoding="utf-8") as fh:
        first = next((ln.split() for ln in fh if ln.strip()), None)
    if first is None:
        raise ProtoPropelError(f"{path}: no labels")
    if len(first) == 1:
        try:
            return np.loadtxt(path, dtype=np.int64, ndmin=1)
        except ValueError as exc:
            raise ProtoPropelError(f"{path}: {exc}") from None
    return load_cloud(path).labels


def cmd_eval(args):
    pred = read_labels(args.pred)
    gt = read_labels(args.gt)
    if pred.shape != gt.shape:
        raise ProtoPropelError(f"{args.pred} has {pred.size} labels but {args.gt} has {gt.size}")
    valid = gt[gt != IGNORE]
    n = args.n_classes or int(max(valid.max(initial=-1), pred.max(initial=-1))) + 1
    n_base = n if args.n_base is None else args.n_base
    if not 1 <= n_base <= n:
        raise ConfigProblem("--n-base must lie in 1..n_classes")
    cm = ConfusionMatrix.empty(n).accumulate(pred, gt)
    sys.stdout.write(report_csv(cm, list(range(n_base)), list(range(n_base, n))))


def cmd_overlap(args):
    cloud = load_cloud(args.cloud)
    if args.radius <= 0:
        raise ConfigProblem("--radius must be positive")
    print(f"{overlap_degree(cloud, args.a, args.b, args.radius):.6f}")


def build_parser():
    parser = _Parser(prog="protopropel", description="Class-incremental point-cloud segmentation experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-scene", help="sample a synthetic scene from a spec file")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the seed stored in the scene file")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("train-base", help="train the base-phase model")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="model file (.npz)")
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("train-novel", help="run the next incremental step on a saved model")
    p.add_argument("--config", required=True)
    p.add_argument("--base", required=True, help="frozen model from the previous phase")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_novel)

    p = sub.add_parser("run-cil", help="full class-incremental run for one arm")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_run_cil)

    p = sub.add_parser("run-ablation", help="FT / FT+PG / FT+PRO / FT+PG+PRO side by side")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_run_ablation)

    p = sub.add_parser("eval", help="IoU report of predicted against ground-truth labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--n-classes", type=int, default=None)
    p.add_argument("--n-base", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("overlap", help="fraction of class-a points within a radius of class b")
    p.add_argument("--cloud", required=True)
    p.add_argument("--a", type=int, required=True)
    p.add_argument("--b", type=int, required=True)
    p.add_argument("--radius", type=float, default=0.1)
    p.set_defaults(func=cmd_overlap)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except ConfigProblem as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args.func(args)
    except (ConfigProblem, ConfigKeyError, InvalidPlanError, InvalidConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        code = EXIT_CONFIG if exc.filename in (getattr(args, "config", None), getattr(args, "spec", None)) else EXIT_RUNTIME
        print(f"error: {exc}", file=sys.stderr)
        return code
    except (ProtoPropelError, OSError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
