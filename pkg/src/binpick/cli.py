"""Command-line entry point: ``train``, ``eval``, ``render`` and ``selfcheck``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="binpick", description="Bin-picking with grasp and shift primitives.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train an agent and write logs and checkpoints")
    t.add_argument("--config", type=Path, help="JSON document with AgentConfig fields")
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--env", choices=("random", "wall", "tucked"), default="random",
                   help="training scenes; 'tucked' mixes wall-tucked rods with random scenes")

    e = sub.add_parser("eval", help="evaluate a checkpoint and write metrics JSON")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--scenario", choices=("random", "wall", "tucked"), default="random")
    e.add_argument("--runs", type=int, default=100)
    e.add_argument("--objects", type=int, default=4)
    e.add_argument("--grasp-only", action="store_true")
    e.add_argument("--unseen-objects", action="store_true")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--episodes-out", type=Path, help="optional JSONL of episode logs (includes latency)")

    r = sub.add_parser("render", help="write PNG panels for a logged episode or a checkpoint on a scene")
    r.add_argument("--log", type=Path, help="episode JSONL written by eval --episodes-out")
    r.add_argument("--index", type=int, default=0)
    r.add_argument("--checkpoint", type=Path)
    r.add_argument("--scene", type=Path, help="scene JSON")
    r.add_argument("--out", type=Path, required=True)

    sub.add_parser("selfcheck", help="gradient, density, rotation and metric quick checks")
    return p


def _env_factory(name: str, cfg):
    from . import binsim
    from .agent import default_env_factory

    base = default_env_factory(cfg)
    if name == "random":
        return base
    if name == "wall":
        def wall(rng, bb):
            n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
            return binsim.spawn_near_wall(n, binsim.TRAIN_OBJECTS, int(rng.integers(2**31)), bb)
        return wall

    def tucked(rng, bb):
        if rng.random() < 0.5:
            return binsim.spawn_wall_tucked(int(rng.integers(2**31)), bb=bb)
        return base(rng, bb)
    return tucked


def cmd_train(args) -> int:
    from .agent import AgentConfig, train_loop

    cfg = AgentConfig.from_json(args.config) if args.config else AgentConfig()
    if args.steps < 1:
        raise UsageError("--steps must be positive")
    agent, _ = train_loop(cfg, args.seed, args.steps, _env_factory(args.env, cfg), out_dir=args.out,
                          log_records=False)
    print(f"trained {args.steps} steps; checkpoint at {args.out / 'checkpoint.npz'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .harness import RunConfig, metrics_document, run_evaluation

    try:
        cfg = RunConfig(str(args.checkpoint), args.scenario, args.runs, args.objects, args.grasp_only,
                        args.unseen_objects, args.seed, args.workers)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    metrics, logs = run_evaluation(cfg)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(metrics_document(metrics, cfg))
    if args.episodes_out:
        with open(args.episodes_out, "w") as fh:
            for log in logs:
                fh.write(json.dumps(log.to_dict(), sort_keys=True) + "\n")
    lat = [s.latency_s for log in logs for s in log.steps]
    if lat:
        print(f"median action latency {np.median(lat) * 1000:.1f} ms over {len(lat)} actions")
    print(json.dumps(metrics.to_dict()))
    return EXIT_OK


def cmd_render(args) -> int:
    from . import binsim
    from .agent import Agent
    from .harness import EpisodeLog, render_checkpoint_scene, render_episode

    if args.log is not None:
        lines = args.log.read_text().splitlines()
        if not 0 <= args.index < len(lines):
            raise UsageError(f"--index {args.index} outside the {len(lines)} logged episodes")
        paths = render_episode(EpisodeLog.from_dict(json.loads(lines[args.index])), args.out)
    elif args.checkpoint is not None and args.scene is not None:
        agent = Agent.load(args.checkpoint)
        scene = binsim.BinScene.from_json(args.scene.read_text())
        paths = render_checkpoint_scene(agent, scene, args.out)
    else:
        raise UsageError("render needs --log, or --checkpoint together with --scene")
    print(f"wrote {len(paths)} images to {args.out}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_all

    return EXIT_OK if run_all() else EXIT_RUNTIME


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "render": cmd_render, "selfcheck": cmd_selfcheck}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - surface every runtime failure as exit code 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
