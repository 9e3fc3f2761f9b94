"""Command line: ``latsync {train,eval,gradcheck,simulate,ablate}``.

Exit codes: 0 success, 1 check failure, 2 usage or configuration error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config, scenario_seeds
from .evaluation import SYSTEMS
from .nn import CheckpointError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
log = logging.getLogger("latsync")


def parse_taus(text: str) -> list[int]:
    """``"1..10"`` (inclusive range), ``"0,5"`` or a mix such as ``"0,2..4"``."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..", 1)
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ValueError(f"empty latency range {part!r}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    if not out or any(t < 0 for t in out):
        raise ValueError(f"latencies must be a nonempty list of integers >= 0, got {text!r}")
    return out


def parse_systems(text: str) -> list[str]:
    names = [s.strip() for s in text.split(",") if s.strip()]
    bad = [n for n in names if n not in SYSTEMS]
    if bad or not names:
        raise ValueError(f"unknown system(s) {bad}; choose from {','.join(SYSTEMS)}")
    return names


def _setup_logging():
    level = os.environ.get("LATSYNC_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.INFO), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _common(p: argparse.ArgumentParser, out=True):
    p.add_argument("--config", help="JSON config file or preset name (default, tiny, bench-small)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. curriculum.final_mode.mean=5 (repeatable)")
    p.add_argument("--seed", type=int, help="experiment seed (overrides config)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for independent work (default 1)")
    if out:
        p.add_argument("--out", help="output directory (overrides config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latsync", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train detectors and the compensation module")
    _common(p)
    p.add_argument("--epochs", type=int, help="compensation-phase epochs (overrides train.epochs)")

    p = sub.add_parser("eval", help="latency sweep benchmark")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory written by train")
    p.add_argument("--systems", default=",".join(SYSTEMS), help="comma list of systems")
    p.add_argument("--tau", help="latencies, e.g. 1..10 or 0,5 (default from config)")
    p.add_argument("--svg", action="store_true", help="write detection overlays")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--scale", default="tiny", help="fixture scale: tiny or small")

    p = sub.add_parser("simulate", help="write a scenario fixture, SVG frames and a latency trace")
    _common(p)

    p = sub.add_parser("ablate", help="train and evaluate the six compensation variants")
    _common(p)
    p.add_argument("--epochs", type=int, default=2, help="epochs per variant (default 2)")
    p.add_argument("--tau", default="1,5", help="latencies to evaluate (default 1,5)")
    return parser


def _config(args):
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "out", None):
        overrides.append("output=" + json.dumps(args.out))
    if getattr(args, "epochs", None) is not None and args.command == "train":
        overrides.append(f"train.epochs={args.epochs}")
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    from .experiment import train_experiment
    cfg = _config(args)
    out = Path(cfg.output)
    train_experiment(cfg, out, args.threads)
    print(f"checkpoint: {out / 'checkpoint'}")
    print(f"metrics: {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .experiment import eval_experiment, load_systems
    cfg = _config(args)
    systems = parse_systems(args.systems)
    taus = parse_taus(args.tau) if args.tau else list(cfg.eval.taus)
    loaded = load_systems(cfg, Path(args.checkpoint))
    out = Path(cfg.output)
    eval_experiment(cfg, loaded, systems, taus, out, args.threads, args.svg)
    print(f"results: {out / 'results.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import THRESHOLD, run_gradcheck
    results = run_gradcheck(args.scale)
    failed = [name for name, err in results.items() if not err < THRESHOLD]
    if failed:
        print(f"gradcheck FAILED: {', '.join(failed)}")
        return EXIT_FAIL
    print("gradcheck passed")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .channel import simulate_links
    from .render import render_frame_svg
    from .world import generate_scenario
    cfg = _config(args)
    out = Path(cfg.output)
    seed = scenario_seeds(cfg.seed, "simulate", 1)[0]
    scenario = generate_scenario(cfg.world, seed)
    trace = simulate_links(cfg.world.n_agents, cfg.world.duration, cfg.channel.latency_model(),
                           np.random.default_rng([cfg.seed, 4]))
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "scenario.json").write_text(scenario.to_json())
    for t in range(cfg.world.duration):
        (out / "frames" / f"frame_{t:03d}.svg").write_text(render_frame_svg(scenario, t))
    (out / "latency_trace.csv").write_text(trace.to_csv())
    print(f"scenario: {out / 'scenario.json'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiment import ablation_csv, run_ablation
    cfg = _config(args)
    rows = run_ablation(cfg, Path(cfg.output), args.epochs, parse_taus(args.tau), args.threads)
    sys.stdout.write(ablation_csv(rows))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "simulate": cmd_simulate,
            "ablate": cmd_ablate}


def main(argv=None) -> int:
    from .training import NumericalError
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
