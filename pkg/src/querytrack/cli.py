"""Command line entry point.

Subcommands: gen (synthetic ground truth), train (fit and checkpoint),
track (run a checkpoint over a scenario), eval (score a dump against
ground truth), verify (built-in self checks). A JSON config plus
repeatable --set overrides feed every subcommand; --print-config shows
the effective tree and exits.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Optional, Sequence

import numpy as np

from .bank import build_surrogate_bank
from .config import (RunConfig, apply_override, config_to_json, load_config,
                     save_config)
from .metrics import evaluate
from .model import TrackingModel
from .runtime import TrackDump, run_sequence
from .scenario import Scenario, dynamic_mosaic, generate_scenario, mark_rarely_overlapping, random_occlusion
from .training import fit, history_to_text
from .verify import SUITES, run_suites


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 2


def _build_bank(cfg: RunConfig):
    return build_surrogate_bank(
        num_base=cfg.bank.num_base,
        num_novel=cfg.bank.num_novel,
        dim=cfg.model.d_model,
        alignment=cfg.bank.alignment,
        seed=cfg.bank.seed,
        crops_per_category=cfg.bank.crops_per_category,
    )


def _load_text(path: str, kind: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"{kind} file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def _effective_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for assignment in args.set or []:
        apply_override(cfg, assignment)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    cfg = _effective_config(args)
    bank = _build_bank(cfg)
    if args.mosaic:
        parts = [generate_scenario(args.objects, args.frames, args.motion, bank,
                                   seed=args.seed + i, category_pool=args.category_pool)
                 for i in range(4)]
        scenario = dynamic_mosaic(parts, cfg.augment, seed=args.seed)
    else:
        scenario = generate_scenario(args.objects, args.frames, args.motion, bank,
                                     seed=args.seed, category_pool=args.category_pool)
    if args.occlude:
        marked = mark_rarely_overlapping(scenario)
        scenario = random_occlusion(scenario, marked, cfg.augment, seed=args.seed + 101)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(scenario.to_text())
    print(f"wrote {len(scenario.records)} records over {scenario.num_frames} frames "
          f"to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _effective_config(args)
    bank = _build_bank(cfg)
    model = TrackingModel(cfg.model)

    def report(epoch: int, mean_loss: float) -> None:
        print(f"epoch {epoch}: mean clip loss {mean_loss:.6f}")

    history = fit(model, bank, cfg.train, augment=cfg.augment, on_epoch=report)
    model.save(args.out, bank)
    print(f"saved checkpoint to {args.out}")
    if args.history:
        with open(args.history, "w", encoding="utf-8") as fh:
            fh.write(history_to_text(history))
        print(f"wrote {len(history)} loss entries to {args.history}")
    return 0


def cmd_track(args) -> int:
    cfg = _effective_config(args)
    model, bank = TrackingModel.load(args.checkpoint)
    scenario = Scenario.from_text(_load_text(args.scenario, "scenario"))
    dump = run_sequence(model, bank, scenario, cfg.runtime, seed=args.seed,
                        noise=args.noise)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(dump.to_text())
    tracks = len({r.track_id for r in dump.records})
    print(f"wrote {len(dump.records)} records ({tracks} tracks) to {args.out}")
    return 0


def cmd_eval(args) -> int:
    gt = Scenario.from_text(_load_text(args.scenario, "scenario"))
    dump = TrackDump.from_text(_load_text(args.dump, "track dump"))
    novel = None
    if args.novel:
        novel = [int(x) for x in args.novel.split(",") if x.strip()]
    report = evaluate(gt, dump, iou_threshold=args.iou, novel_ids=novel)
    sys.stdout.write(report.to_text())
    return 0


def cmd_verify(args) -> int:
    names = sorted(SUITES) if args.suite == "all" else [args.suite]
    results = run_suites(names)
    failures = 0
    for name, ok, detail in results:
        tag = "PASS" if ok else "FAIL"
        print(f"{tag} {name}: {detail}")
        failures += 0 if ok else 1
    print(f"{len(results) - failures}/{len(results)} checks passed")
    return 0 if failures == 0 else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="querytrack",
        description="Open-vocabulary multi-object tracking on synthetic scenes.")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                        help="override one config value (repeatable)")
    parser.add_argument("--print-config", action="store_true",
                        help="print the effective config as JSON and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen", help="generate a synthetic scenario")
    p.add_argument("--out", required=True)
    p.add_argument("--objects", type=int, default=3)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--motion", default="linear",
                   choices=["linear", "crossing", "enter_exit"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--category-pool", default="base", choices=["base", "novel", "all"])
    p.add_argument("--mosaic", action="store_true",
                   help="compose four generations into a quadrant mosaic")
    p.add_argument("--occlude", action="store_true",
                   help="apply a random occlusion window to a clear target")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="write per-step loss lines here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="run a checkpoint over a scenario")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=None,
                   help="override the rendering noise level")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score a track dump against ground truth")
    p.add_argument("--scenario", required=True)
    p.add_argument("--dump", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--novel", help="comma separated novel category ids")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run built-in self checks")
    p.add_argument("--suite", default="all", choices=sorted(SUITES) + ["all"])
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.print_config:
            cfg = _effective_config(args)
            sys.stdout.write(config_to_json(cfg))
            return 0
        if not getattr(args, "command", None):
            parser.print_help()
            return 2
        return args.func(args)
    except FileNotFoundError as exc:
        return _fail(str(exc))
    except ValueError as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
