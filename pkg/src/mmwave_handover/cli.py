"""Command-line entry point: ``python -m mmwave_handover <command>``.

Failures exit nonzero after printing one line to stderr of the form
``error kind=<ExceptionName> message=<json string>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .agent import PolicySnapshot, evaluate, write_eval_csv
from .baselines import oracle_dp
from .channel import shannon_rate, write_power_csv
from .errors import HandoverError, InputError
from .qfunc import load_snapshot, save_snapshot

EXIT_INPUT = 2
EXIT_FAILURE = 1


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.load(args.config) if args.config else harness.ExperimentConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise InputError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return harness.ExperimentConfig.from_mapping(overrides, cfg) if overrides else cfg


def _out_path(cfg, given: str | None, default_name: str) -> Path:
    path = Path(given) if given else cfg.resolved_output_dir() / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def cmd_synth(args, cfg):
    data = harness.build_dataset(cfg)
    out = Path(args.out) if args.out else cfg.resolved_output_dir() / f"synth_{cfg.digest()}"
    out.mkdir(parents=True, exist_ok=True)
    write_power_csv(data.power, out / "power.csv")
    harness.write_frames(data.frames, data.fps, out / "frames.mmhf")
    harness.write_labels(data.blockage_onsets, data.blockage_ends, data.power.tau, out / "labels.csv")
    print(f"samples={len(data)} events={len(data.blockage_onsets)} dir={out}")


def cmd_calibrate(args, cfg):
    rate = harness.calibrate_arrival_rate(harness.scene_config(cfg), args.target, args.tolerance,
                                          duration=args.duration, seed=cfg.seed)
    print(f"spawn_rate={rate!r}")


def _setup(cfg, t_dis):
    data = harness.build_dataset(cfg)
    mdp = cfg.mdp_config(t_dis)
    rates = shannon_rate(data.power.powers, cfg.link_budget())
    n_train = cfg.data.train_samples
    n_total = n_train + cfg.data.test_samples
    return data, mdp, rates, n_train, n_total


def cmd_train(args, cfg):
    data, mdp, rates, n_train, n_total = _setup(cfg, args.t_dis)
    obs = data.frames if args.agent == "image" else data.power.powers
    make_env = harness.split_envs(obs, rates, mdp, n_train, n_total, data.power.tau)
    point = cfg.t_dis_sweep.index(args.t_dis) if args.t_dis in cfg.t_dis_sweep else len(cfg.t_dis_sweep)
    dtype = np.float32 if cfg.train.dtype == "float32" else np.float64
    res = harness.train_agent(args.agent, cfg, mdp, make_env, point, dtype)
    out = _out_path(cfg, args.out, f"{args.agent}_tdis{int(round(args.t_dis * 1000)):03d}ms.mmhq")
    save_snapshot(res.best.net, out, harness.snapshot_sidecar(res.best, args.t_dis, cfg.seed))
    res.curve.write_csv(str(out) + ".curve.csv")
    print(f"best_iteration={res.best.iteration} score_mbps={res.best.score_mbps:.6f} snapshot={out}")


def cmd_eval(args, cfg):
    data, mdp, rates, n_train, n_total = _setup(cfg, args.t_dis)
    net = load_snapshot(args.snapshot)
    side = Path(str(args.snapshot) + ".json")
    meta = json.loads(side.read_text()) if side.is_file() else {}
    snap = PolicySnapshot(net, int(meta.get("iteration", 0)), float(meta.get("score_mbps", 0.0)),
                          float(meta.get("reward_scale", 1.0)), float(meta.get("value_offset", 0.0)))
    obs = data.frames if net.arch.variant == "image" else data.power.powers
    env = harness.split_envs(obs, rates, mdp, n_train, n_total, data.power.tau)("test")
    res = evaluate(snap, env)
    out = _out_path(cfg, args.out, f"eval_{Path(args.snapshot).stem}.csv")
    write_eval_csv(res.log, out)
    print(f"avg_rate_mbps={res.average_rate_mbps:.6f} handovers={res.handovers} "
          f"mean_forward_ms={res.forward_seconds.mean() * 1e3:.4f} csv={out}")


def cmd_oracle(args, cfg):
    data, mdp, rates, n_train, n_total = _setup(cfg, args.t_dis)
    res = oracle_dp(rates[n_train:n_total] / 1e6, mdp)
    res.dt = data.power.tau
    out = _out_path(cfg, args.out, f"oracle_tdis{int(round(args.t_dis * 1000)):03d}ms.csv")
    res.write_csv(out)
    print(f"avg_rate_mbps={res.average_rate:.6f} csv={out}")


def cmd_report(args, cfg):
    if args.from_dir:
        text = harness.recompute_report(args.from_dir)
        sys.stdout.write(text)
        return
    rep = harness.run_experiment(cfg, workers=args.workers)
    sys.stdout.write(rep.markdown())
    print(f"run_dir={rep.run_dir}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mmwave_handover", description=__doc__.splitlines()[0])
    p.add_argument("--print-schema", action="store_true", help="list every config key and exit")
    sub = p.add_subparsers(dest="command")

    s = sub.add_parser("synth", parents=[common], help="write the episode as power CSV, frame file and labels")
    s.add_argument("--out")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("calibrate", parents=[common], help="find the arrival rate for a blocked fraction")
    s.add_argument("--target", type=float, default=0.19)
    s.add_argument("--tolerance", type=float, default=0.02)
    s.add_argument("--duration", type=float, default=600.0)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("train", parents=[common], help="train one agent and save its best snapshot")
    s.add_argument("--agent", choices=("image", "power"), required=True)
    s.add_argument("--t-dis", type=float, default=0.0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="greedy rollout of a snapshot on the test split")
    s.add_argument("--snapshot", required=True)
    s.add_argument("--t-dis", type=float, default=0.0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("oracle", parents=[common], help="hindsight optimum on the test split")
    s.add_argument("--t-dis", type=float, default=0.0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_oracle)

    s = sub.add_parser("report", parents=[common], help="run the full sweep, or recompute a report")
    s.add_argument("--from", dest="from_dir", help="recompute report.csv from a finished run directory")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_schema:
        sys.stdout.write(harness.ExperimentConfig.schema())
        return 0
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _config(args)
        args.func(args, cfg)
    except (HandoverError, OSError) as exc:
        print(f"error kind={type(exc).__name__} message={json.dumps(str(exc))}", file=sys.stderr)
        return EXIT_INPUT if isinstance(exc, (InputError, OSError)) else EXIT_FAILURE
    return 0
