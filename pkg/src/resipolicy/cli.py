"""Command-line entry point for the full experiment pipeline.

Subcommands: gen-demos, train-mgp, train-mrc, eval, trace, validate-config.
Exit codes: 0 success, 1 runtime failure, 2 usage/configuration error.
RESIPOLICY_OUT sets the default output root.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import pathlib
import sys

import numpy as np

from . import episodes as ep_io
from . import runtime as rt
from .config import load_config
from .core import ConfigError
from .episodes import dataset_hash, load_dataset, save_dataset, sha256_file
from .master import MasterPolicy, train_master
from .residual import ResidualCorrector, build_residual_targets, train_residual
from .sim import TASK_KINDS, generate_demos

USAGE_ERROR = 2
RUNTIME_ERROR = 1


class OrderingError(RuntimeError):
    """A pipeline stage was invoked before its prerequisite artifact exists."""


def _out_root(args):
    root = pathlib.Path(args.out or os.environ.get("RESIPOLICY_OUT", "out"))
    root.mkdir(parents=True, exist_ok=True)
    return root


def _write_loss_csv(path, losses):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for i, loss in enumerate(losses):
            writer.writerow([i, repr(loss)])


def cmd_gen_demos(args):
    cfg = load_config(args.config)
    if args.task is not None:
        if args.task not in TASK_KINDS:
            raise ConfigError(f"unknown task name {args.task!r} (choose from {', '.join(TASK_KINDS)})")
        if args.task != cfg.task.kind:
            raise ConfigError(
                f"--task {args.task} conflicts with the configured task {cfg.task.kind}"
            )
    seed = cfg.seed if args.seed is None else args.seed
    n = cfg.demos if args.n is None else args.n
    episodes, normalizer, meta = generate_demos(
        cfg.task, n, seed, horizon=cfg.master.horizon, fusion_cfg=cfg.fusion, pbic_params=cfg.pbic
    )
    out = _out_root(args) / f"demos_{cfg.task.kind}"
    save_dataset(out, episodes, normalizer, extra_meta=meta)
    print(f"wrote {len(episodes)} episodes to {out}")
    print(f"dataset hash: {dataset_hash(out)}")
    return 0


def cmd_train_mgp(args):
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    episodes, normalizer, _ = load_dataset(args.data)
    model, losses = train_master(episodes, normalizer, cfg.master, cfg.fusion, seed)
    out = _out_root(args)
    ckpt = out / "mgp.ckpt"
    model.save(ckpt)
    _write_loss_csv(out / "mgp_loss.csv", losses)
    print(f"wrote {ckpt} (final loss {losses[-1]:.6f})")
    print(f"checkpoint hash: {sha256_file(ckpt)}")
    return 0


def cmd_train_mrc(args):
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    if args.mgp_checkpoint is None:
        raise OrderingError("train-mrc requires --mgp-checkpoint (train the master first)")
    ckpt_path = pathlib.Path(args.mgp_checkpoint)
    if not ckpt_path.exists():
        raise OrderingError(f"master checkpoint {ckpt_path} does not exist")
    hash_before = sha256_file(ckpt_path)
    master = MasterPolicy.load(ckpt_path)
    episodes, normalizer, _ = load_dataset(args.data)
    residual_eps = build_residual_targets(episodes, normalizer, master, root_seed=seed)
    out = _out_root(args)
    res_dir = out / "residual_targets"
    save_dataset(res_dir, residual_eps, normalizer, extra_meta={"source": str(args.data)})
    model, losses = train_residual(residual_eps, normalizer, cfg.residual, seed)
    hash_after = sha256_file(ckpt_path)
    if hash_before != hash_after:
        raise RuntimeError("master checkpoint changed during residual training")
    ckpt = out / "mrc.ckpt"
    model.save(ckpt)
    _write_loss_csv(out / "mrc_loss.csv", losses)
    print(f"master checkpoint unchanged: {hash_after}")
    print(f"wrote {ckpt} (final loss {losses[-1]:.6f})")
    return 0


def _load_models(args):
    if args.mgp_checkpoint is None:
        raise OrderingError("missing --mgp-checkpoint")
    master = MasterPolicy.load(args.mgp_checkpoint)
    residual_model = None
    if args.mrc_checkpoint is not None:
        residual_model = ResidualCorrector.load(args.mrc_checkpoint)
    return master, residual_model


def cmd_eval(args):
    cfg = load_config(args.config)
    master, residual_model = _load_models(args)
    variants = list(rt.VARIANTS) if args.variant == "all" else [args.variant]
    for v in variants:
        if v not in rt.VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
        if v in ("full", "no-fusion", "rigid") and residual_model is None:
            raise OrderingError(f"variant {v!r} needs --mrc-checkpoint")
    out = _out_root(args)
    summary = []
    for v in variants:
        rows, agg = rt.evaluate(
            master,
            cfg.task,
            args.seeds,
            residual_model=residual_model,
            pbic_params=cfg.pbic,
            variant=v,
            root_seed=cfg.seed if args.seed is None else args.seed,
            hold=cfg.hold,
        )
        rt.write_metrics_csv(out / f"metrics_{v}.csv", rows, agg)
        rt.write_metrics_json(out / f"metrics_{v}.json", rows, agg)
        summary.append(
            {
                "variant": v,
                "success_rate": agg["success_rate"],
                "mean_peak_force": agg["mean_peak_force"],
                "mean_rms_err": agg["mean_rms_err"],
                "protective_stops": agg["protective_stop_count"],
                "broken": agg["broken_count"],
            }
        )
        print(
            f"{v:>10}: success {agg['success_rate']:.2f}  "
            f"peak force {agg['mean_peak_force']:.2f} N  "
            f"stops {agg['protective_stop_count']}"
        )
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["variant", "success_rate", "mean_peak_force", "mean_rms_err", "protective_stops", "broken"]
        )
        writer.writeheader()
        writer.writerows(summary)
    return 0


def cmd_trace(args):
    cfg = load_config(args.config)
    master, residual_model = _load_models(args)
    trace = rt.run_rollout(
        master,
        cfg.task,
        residual_model=residual_model,
        pbic_params=cfg.pbic,
        variant=args.variant,
        root_seed=cfg.seed if args.seed is None else args.seed,
        seed_index=args.rollout_seed,
        hold=cfg.hold,
    )
    out = _out_root(args)
    trace_path = out / f"trace_{args.variant}_{args.rollout_seed}.ndjson"
    trace_path.write_bytes(trace.to_ndjson())
    force_path = out / f"force_profile_{args.variant}_{args.rollout_seed}.csv"
    with open(force_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "F_normal"])
        for rec in trace.records:
            writer.writerow([repr(rec["t"]), repr(float(np.linalg.norm(rec["f_ext"][:3])))])
    print(f"outcome: {trace.outcome}")
    print(f"wrote {trace_path}")
    print(f"wrote {force_path}")
    print(f"trace hash: {trace.hash()}")
    return 0


def cmd_validate_config(args):
    cfg = load_config(args.config)
    print(f"configuration is valid: task={cfg.task.kind} seed={cfg.seed}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="resipolicy", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, models=False):
        p.add_argument("--config", required=True, help="experiment configuration file (.yaml or .json)")
        p.add_argument("--seed", type=int, default=None, help="override the configured root seed")
        p.add_argument("--out", default=None, help="output directory (default $RESIPOLICY_OUT or ./out)")
        if data:
            p.add_argument("--data", required=True, help="demo dataset directory")
        if models:
            p.add_argument("--mgp-checkpoint", default=None)
            p.add_argument("--mrc-checkpoint", default=None)

    p = sub.add_parser("gen-demos", help="generate expert demonstrations")
    common(p)
    p.add_argument("--task", default=None, help="task name (must match the config)")
    p.add_argument("--n", type=int, default=None, help="number of episodes")
    p.set_defaults(func=cmd_gen_demos)

    p = sub.add_parser("train-mgp", help="train the master policy")
    common(p, data=True)
    p.set_defaults(func=cmd_train_mgp)

    p = sub.add_parser("train-mrc", help="train the residual corrector against a frozen master")
    common(p, data=True)
    p.add_argument("--mgp-checkpoint", default=None)
    p.set_defaults(func=cmd_train_mrc)

    p = sub.add_parser("eval", help="evaluate ablation variants")
    common(p, models=True)
    p.add_argument("--variant", default="full", help=f"one of {', '.join(rt.VARIANTS)} or 'all'")
    p.add_argument("--seeds", type=int, default=30)
    p.add_argument("--jobs", type=int, default=1, help="reserved; evaluation is sequential and deterministic")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trace", help="dump one rollout trace and force profile")
    common(p, models=True)
    p.add_argument("--variant", default="full")
    p.add_argument("--rollout-seed", type=int, default=0)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("validate-config", help="validate a configuration file")
    common(p)
    p.set_defaults(func=cmd_validate_config)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, OrderingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
