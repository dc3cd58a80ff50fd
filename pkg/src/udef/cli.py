"""Command-line entry point: ``udef solve | pretrain | sweep | inspect``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from ._validation import ConfigurationError, ContractError, NumericalError
from .average_oracles import AO_SCHEMES
from .experiments import (
    DESK_SCALE,
    ExperimentSpec,
    build_config,
    default_output_dir,
    infoset_table,
    load_config_file,
    load_modules,
    merge_sections,
    parse_overrides,
    pretrain,
    run_sweep,
    solve,
    solve_baseline,
)
from .pipeline import PRESETS
from .tabular import CFR_VARIANTS

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _scale(args):
    if args.paper_scale:
        return 1.0
    return DESK_SCALE if args.scale is None else args.scale


def _sections(args):
    parts = []
    if getattr(args, "config", None):
        parts.append(load_config_file(args.config))
    parts.append(parse_overrides(getattr(args, "set", None)))
    return merge_sections(*parts)


def cmd_solve(args):
    out_dir = Path(args.output_dir) if args.output_dir else default_output_dir()
    if args.baseline:
        path = Path(args.output) if args.output else out_dir / f"{args.game}_{args.baseline}.csv"
        rows = solve_baseline(args.game, args.baseline, args.iters if args.iters is not None else 1000, path)
        final = rows[-1]["nash_conv_total"] if rows else None
    else:
        sections = _sections(args)
        values = dict(sections.get("udef", {}))
        for key, flag in (("max_iterations", args.iters), ("seed", args.seed), ("ro_mode", args.ro_mode)):
            if flag is not None:
                values[key] = str(flag)
        name = args.preset or sections.get("experiment", {}).get("preset")
        cfg = build_config(name, values, _scale(args))
        modules = load_modules(args.transforms, args.lao, args.gao)
        label = name or "custom"
        path = Path(args.output) if args.output else out_dir / f"{args.game}_{label}_seed{cfg.seed}.csv"
        log = solve(args.game, cfg, path, modules)
        final = log.nash_conv[-1] if len(log) else None
    msg = f"wrote {path}"
    if final is not None:
        msg += f"; final nash_conv {final:.6g}"
    print(msg)
    return EXIT_OK


def cmd_pretrain(args):
    out_dir = Path(args.output_dir) if args.output_dir else default_output_dir() / f"pretrain_{args.game}_{args.target}"
    report = pretrain(
        args.game,
        args.target,
        out_dir,
        las_dim=args.las_dim,
        scale=_scale(args),
        seed=args.seed,
        lao_target=args.lao_target,
        temperature=args.temperature,
    )
    for key, value in sorted(report["heldout"].items()):
        print(f"{key} {value:.6g}")
    if "lao" in report:
        print(f"lao_heldout_l1 {report['lao']['heldout_l1']:.6g}")
    print(f"wrote {out_dir}")
    return EXIT_OK


def cmd_sweep(args):
    sections = _sections(args)
    overrides = dict(
        game=args.game,
        preset=args.preset,
        scale=_scale(args),
        n_jobs=args.jobs,
        output_dir=Path(args.output_dir) if args.output_dir else None,
    )
    if args.seeds:
        overrides["seeds"] = [int(s) for s in args.seeds.split(",")]
    spec = ExperimentSpec.from_sections(sections, **overrides)
    path = run_sweep(spec)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_inspect(args):
    game, rows = infoset_table(args.game)
    print(f"# {game.name}: {game.num_nodes} histories, {game.num_infosets} infosets, {game.num_actions} actions")
    w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]) if rows else ["infoset"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return EXIT_OK


def _add_scale(p):
    p.add_argument("--paper-scale", action="store_true", help="use the full episode and step budgets")
    p.add_argument("--scale", type=float, default=None, help=f"budget multiplier (default {DESK_SCALE})")


def build_parser():
    parser = argparse.ArgumentParser(prog="udef", description="Unified equilibrium finding experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="run one configuration and write its run log")
    p.add_argument("--game", default="kuhn")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--baseline", choices=CFR_VARIANTS + ("fp",), help="run a tabular baseline instead")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--ro-mode", choices=("tabular", "neural"))
    p.add_argument("--transforms", help="pretrained transform checkpoint")
    p.add_argument("--lao", help="pretrained LAO checkpoint")
    p.add_argument("--gao", help="pretrained GAO checkpoint")
    p.add_argument("--output", help="CSV path (default: <output dir>/<game>_<preset>_seed<seed>.csv)")
    p.add_argument("--output-dir")
    _add_scale(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("pretrain", help="pretrain transform modules and optionally a learned LAO")
    p.add_argument("--game", default="leduc")
    p.add_argument("--target", choices=("cfr", "psro", "both"), default="both")
    p.add_argument("--las-dim", type=int, default=16)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--lao-target", choices=AO_SCHEMES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir")
    _add_scale(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("sweep", help="run a configuration grid over seeds")
    p.add_argument("--config", help="flat config with udef., sweep. and experiment. keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--game")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--seeds", help="comma-separated seeds (default 0,1,2)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--output-dir")
    _add_scale(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("inspect", help="print a game's information-set table")
    p.add_argument("--game", default="kuhn")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_CONFIG if err.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigurationError, ContractError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
