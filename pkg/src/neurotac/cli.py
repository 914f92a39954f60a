"""``neurotac`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from . import nn
from .dataset import MissingClass, SampleFileError
from .events import InvariantViolation, MalformedHeader, TruncatedRecord
from .harness import (BEST_T_H_MS, ConfigError, ExperimentConfig, Workspace, bench_throughput,
                      exp_detection_delay, exp_full_timeline, exp_history_sweep, exp_unseen_objects)
from .sim import make_object_suite
from .stages import GraspStage
from .windowing import ALLOWED_T_H_MS

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3
DATA_ERRORS = (MalformedHeader, TruncatedRecord, InvariantViolation, SampleFileError, nn.MalformedModelFile,
               nn.EmptyDataset, nn.ShapeMismatch, MissingClass)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _objects(text: str, seed: int) -> tuple[str, ...]:
    """Comma-separated suite names, or a count N meaning the first N objects."""
    names = [p.name for p in make_object_suite(seed)]
    text = text.strip()
    if text.isdigit():
        n = int(text)
        if not 1 <= n <= len(names):
            raise ConfigError(f"--objects count must be in 1..{len(names)}")
        return tuple(names[:n])
    return tuple(v.strip() for v in text.split(",") if v.strip())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="suite seed (default 0)")
    common.add_argument("--out-dir", default="out", help="output directory (default ./out)")
    common.add_argument("--t-h", type=_int_list, default=None,
                        help=f"events history in ms, comma-separated, from {list(ALLOWED_T_H_MS)}")
    common.add_argument("--objects", default=None, help="object names (comma-separated) or a count")
    common.add_argument("--runs", type=int, default=10, help="runs per object (default 10)")
    common.add_argument("--epochs", type=int, default=None, help="max training epochs")
    common.add_argument("--patience", type=int, default=None, help="early-stopping patience")
    common.add_argument("--backend", choices=("cython", "python"), default=None, help="kernel backend")
    common.add_argument("-q", "--quiet", action="store_true", help="only print results")

    p = _Parser(prog="neurotac", description="Event-camera grasp stage pipeline on synthetic tactile data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("simulate", parents=[common], help="generate run bundles and manifest.csv")
    sub.add_parser("encode", parents=[common], help="label and cache heatmap samples")
    sub.add_parser("train", parents=[common], help="train the classifier for each --t-h")
    sub.add_parser("sweep", parents=[common], help="accuracy per object and t_h -> history_sweep.csv")
    sub.add_parser("delay", parents=[common], help="detection delays at t_h -> delay.csv")
    tl = sub.add_parser("timeline", parents=[common], help="per-frame truth vs. prediction for one run")
    tl.add_argument("--object", required=True, dest="object_name")
    tl.add_argument("--run", type=int, default=1, dest="run_index")
    sub.add_parser("unseen", parents=[common], help="seen vs. unseen objects -> unseen.csv")
    b = sub.add_parser("bench", parents=[common], help="window + encode throughput -> bench.csv")
    b.add_argument("--forward-frames", type=int, default=50)
    return p


def config_from_args(args) -> ExperimentConfig:
    single = args.command in ("delay", "timeline", "unseen", "bench")
    t_h = args.t_h or ((BEST_T_H_MS,) if single else ALLOWED_T_H_MS)
    if single and len(t_h) != 1:
        raise ConfigError(f"{args.command} takes a single --t-h value")
    overrides = {k: v for k, v in (("max_epochs", args.epochs), ("patience", args.patience)) if v is not None}
    try:
        cfg = ExperimentConfig(
            seed=args.seed, t_h_list=t_h, runs_per_object=args.runs,
            objects=_objects(args.objects, args.seed) if args.objects else None,
            out_dir=args.out_dir, backend=args.backend,
        )
        if overrides:
            cfg = replace(cfg, train=replace(cfg.train, **overrides))
    except ValueError as e:
        raise ConfigError(str(e)) from None
    cfg.suite()
    return cfg


def run(args) -> int:
    cfg = config_from_args(args)
    cmd = args.command
    if cmd == "bench":
        for r in bench_throughput(cfg, t_h=cfg.t_h_list[0], forward_frames=args.forward_frames):
            print(f"{r.backend}: {r.frames} frames, {r.events} events, {r.frames_per_s:.0f} frames/s, "
                  f"{r.events_per_s:.3g} events/s, p99 {r.p99_ms:.3f} ms, "
                  f"realtime {'yes' if r.realtime else 'no'}; forward mean {r.forward_mean_ms:.2f} ms")
        return EXIT_OK
    ws = Workspace(cfg)
    if cmd == "simulate":
        m = ws.simulate_all()
        print(f"{len(m.entries)} runs, manifest at {cfg.out_dir / 'manifest.csv'}")
    elif cmd == "encode":
        ws.encode_all()
        print(f"samples cached under {cfg.out_dir / 'samples'}")
    elif cmd == "train":
        for t_h in cfg.t_h_list:
            ws.per_object_model(t_h)
        print(f"models under {cfg.out_dir / 'models'}")
    elif cmd == "sweep":
        res = exp_history_sweep(cfg, ws)
        for t_h in cfg.t_h_list:
            mean = sum(res[(o, t_h)] for o in ws.objects) / len(ws.objects)
            print(f"t_h {t_h:2d} ms: mean accuracy {mean:.4f}")
    elif cmd == "delay":
        rep = exp_detection_delay(cfg, cfg.t_h_list[0], ws)
        for o in rep.objects:
            p, s = rep.stats(o, GraspStage.PRESS), rep.stats(o, GraspStage.SLIP)
            print(f"{o:18s} press {p.mean_ms:6.2f} ms (se {p.sem_ms:.2f})  slip {s.mean_ms:6.2f} ms (se {s.sem_ms:.2f})")
    elif cmd == "timeline":
        print(exp_full_timeline(cfg, args.object_name, args.run_index, cfg.t_h_list[0], ws))
    elif cmd == "unseen":
        for r in exp_unseen_objects(cfg, cfg.t_h_list[0], ws):
            print(f"{r.object_name:18s} seen {r.seen_accuracy:.4f}  unseen {r.unseen_accuracy:.4f}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                            format="%(asctime)s %(levelname)s %(message)s")
        return run(args)
    except ConfigError as e:
        print(f"neurotac: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as e:
        print(f"neurotac: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, ValueError) as e:
        print(f"neurotac: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
