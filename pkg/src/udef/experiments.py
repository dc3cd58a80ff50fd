"""Experiment drivers: config files, desk scaling, pretraining and sweeps.

Config files are flat ``key=value`` lines.  Keys may carry a section prefix
(``udef.hs=0.5``, ``sweep.hs=0.1,0.5,0.9``, ``experiment.game=leduc``);
unprefixed keys belong to ``udef``.  Blank lines and ``#`` comments are
ignored.
"""

from __future__ import annotations

import csv
import itertools
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import ConfigurationError, ContractError, NumericalError
from .average_oracles import AO_SCHEMES, LearnedLao, pretrain_lao
from .games import build_game, nash_conv
from .pipeline import PRESETS, RunLog, UdefConfig, preset, run_udef
from .tabular import CFR_VARIANTS, CFRSolver, FictitiousPlay, write_convergence_log
from .transforms import TransformPair, heldout_report, pretrain_transforms

OUTPUT_ENV = "UDEF_OUTPUT_DIR"
DESK_SCALE = 0.1
MAX_RUNS = 1000
SWEEP_KEYS = ("hs", "meta_lr", "meta_steps", "meta_train", "meta_train_max")
AGGREGATE_COLUMNS = ("cell", *SWEEP_KEYS, "iteration", "n_seeds", "mean", "min", "max")
INDEX_COLUMNS = ("cell", "seed", "status", "iterations", "final_nash_conv", "path", "error")

# full-scale pretraining budgets: batch 1000 for 10^4 steps, 10^6 LAO samples
PRETRAIN_STEPS = 10_000
PRETRAIN_BATCH = 1000
LAO_SAMPLES = 1_000_000
LAO_STEPS = 10_000


def default_output_dir():
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def parse_config_text(text):
    """Sections of a flat ``key=value`` config as ``{section: {key: str}}``."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.rpartition(".")
        out.setdefault(section or "udef", {})[name] = value
    return out


def load_config_file(path):
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigurationError(f"cannot read config {path}: {err}") from err
    return parse_config_text(text)


def parse_overrides(items):
    """``["udef.hs=0.5", ...]`` as config sections."""
    return parse_config_text("\n".join(items or []))


def merge_sections(*parts):
    out = {}
    for part in parts:
        for section, values in part.items():
            out.setdefault(section, {}).update(values)
    return out


def desk_scaled(cfg, scale):
    """Shrink the RO and meta-game episode budgets by ``scale``."""
    return cfg.scaled(scale)


def build_config(preset_name=None, values=None, scale=DESK_SCALE):
    """Config from an optional preset plus string overrides, with budgets scaled."""
    values = dict(values or {})
    if preset_name is not None:
        base = preset(preset_name)
        cfg = UdefConfig.from_dict({**base.to_dict(), **values})
    else:
        cfg = UdefConfig.from_dict(values)
    if "episodes_ro" in values or "episodes_meta" in values:
        return cfg
    return desk_scaled(cfg, scale)


# Single runs ---------------------------------------------------------------


def load_modules(transforms=None, lao=None, gao=None):
    out = {}
    for name, path, loader in (
        ("transforms", transforms, TransformPair.load),
        ("lao", lao, LearnedLao.load),
        ("gao", gao, LearnedLao.load),
    ):
        if path is not None:
            try:
                out[name] = loader(path)
            except OSError as err:
                raise ConfigurationError(f"cannot load {name} checkpoint {path}: {err}") from err
    return out


def solve(game_name, cfg, output, modules=None):
    """Run the loop on a named game and write the run log CSV; returns the log."""
    game = build_game(game_name, seed=cfg.seed)
    log, _, _ = run_udef(game, cfg, **(modules or {}))
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    log.to_csv(output)
    return log


def solve_baseline(game_name, method, iterations, output, log_every=1):
    """Tabular CFR variant or fictitious play with the tabular convergence log schema."""
    game = build_game(game_name)
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    if method in CFR_VARIANTS:
        est = CFRSolver(variant=method, iterations=iterations, log_every=log_every).fit(game)
        rows = est.log_
    elif method == "fp":
        est = FictitiousPlay(iterations=iterations).fit(game)
        rows = []
        for t, pol in enumerate(est.policies_[1:], 1):
            if t % log_every == 0 or t == iterations:
                nc = nash_conv(game, pol)
                rows.append(
                    {
                        "iteration": t,
                        "nash_conv_total": nc.total,
                        "nash_conv_p1": nc.per_player[0],
                        "nash_conv_p2": nc.per_player[1],
                        "wall_time_ms": 0.0,
                    }
                )
    else:
        raise ConfigurationError(f"unknown baseline {method!r}")
    write_convergence_log(output, rows)
    return rows


# Pretraining ---------------------------------------------------------------


def pretrain(game_name, target, out_dir, las_dim=16, scale=DESK_SCALE, seed=0, lao_target=None, temperature=1.0):
    """Pretrain transforms (and optionally a learned LAO) and write checkpoints plus a report.

    Returns the report dict, which is also written as ``report.json``.
    """
    if target not in ("cfr", "psro", "both"):
        raise ConfigurationError(f"unknown pretraining target {target!r}")
    if lao_target is not None and lao_target not in AO_SCHEMES:
        raise ConfigurationError(f"unknown LAO target {lao_target!r}")
    game = build_game(game_name)
    active = "psro" if target == "psro" else "cfr"
    tp = TransformPair("learned", "learned", game.num_actions, las_dim, temperature, active, seed=seed)
    masks = game.legal_mask
    util = float(game.utility_range.max())
    steps = max(1, int(round(PRETRAIN_STEPS * scale)))
    tp, rep = pretrain_transforms(tp, target, masks, util, steps=steps, batch_size=PRETRAIN_BATCH, seed=seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tp.save(out_dir / "transforms.bin")
    report = {
        "game": game_name,
        "target": target,
        "las_dim": las_dim,
        "steps": steps,
        "seed": seed,
        "heldout": {k: v for k, v in rep.items() if k != "trace"},
    }
    if lao_target is not None:
        n_games = max(2, int(round(LAO_SAMPLES * scale / 32)))
        lao_steps = max(1, int(round(LAO_STEPS * scale)))
        lao, lrep = pretrain_lao(LearnedLao(seed=seed), lao_target, n_games=n_games, steps=lao_steps, seed=seed)
        lao.save(out_dir / "lao.bin")
        report["lao"] = {"target": lao_target, "games": n_games, "steps": lao_steps, "heldout_l1": lrep["heldout_l1"]}
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def reload_report(out_dir, game_name, target, seed=0):
    """Held-out errors recomputed from the saved transform checkpoint."""
    game = build_game(game_name)
    tp = TransformPair.load(Path(out_dir) / "transforms.bin")
    return heldout_report(tp, target, game.legal_mask, float(game.utility_range.max()), seed=seed + 1)


# Sweeps --------------------------------------------------------------------


@dataclass
class ExperimentSpec:
    """Grid of configurations times seeds on one game.

    ``sweep`` maps any of ``hs, meta_lr, meta_steps, meta_train,
    meta_train_max`` to a list of values.  Baseline cells with
    ``meta_train_max = 0`` are added for every ``hs`` value.
    """

    game: str = "leduc"
    preset: str | None = "nfsp"
    base: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    output_dir: Path = field(default_factory=default_output_dir)
    scale: float = DESK_SCALE
    n_jobs: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ConfigurationError("an experiment needs at least one seed")
        unknown = set(self.sweep) - set(SWEEP_KEYS)
        if unknown:
            raise ConfigurationError(f"cannot sweep over {sorted(unknown)}")
        if self.preset is not None and self.preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {self.preset!r}")
        self.output_dir = Path(self.output_dir)
        n = len(self.cells()) * len(self.seeds)
        if n > MAX_RUNS:
            raise ConfigurationError(f"sweep has {n} runs, more than the limit of {MAX_RUNS}")

    def cells(self):
        """Cross product of the sweep lists plus the baseline cells, without duplicates."""
        keys = [k for k in SWEEP_KEYS if k in self.sweep]
        grid = [dict(zip(keys, combo)) for combo in itertools.product(*(list(self.sweep[k]) for k in keys))]
        base = [{"hs": hs, "meta_train_max": 0} for hs in self.sweep.get("hs", [None])]
        cells, seen = [], set()
        for cell in grid + [{k: v for k, v in b.items() if v is not None} for b in base]:
            key = cell_name(cell)
            if key not in seen:
                seen.add(key)
                cells.append(cell)
        return cells

    def config(self, cell, seed):
        values = {**self.base, **{k: str(v) for k, v in cell.items()}, "seed": str(seed)}
        return build_config(self.preset, values, self.scale)

    @classmethod
    def from_sections(cls, sections, **overrides):
        exp = sections.get("experiment", {})
        sweep = {k: [_number(x) for x in v.split(",") if x.strip()] for k, v in sections.get("sweep", {}).items()}
        kwargs = dict(
            game=exp.get("game", "leduc"),
            preset=exp.get("preset", "nfsp") or None,
            base=dict(sections.get("udef", {})),
            sweep=sweep,
        )
        if "seeds" in exp:
            kwargs["seeds"] = [int(s) for s in exp["seeds"].split(",") if s.strip()]
        if "output_dir" in exp:
            kwargs["output_dir"] = Path(exp["output_dir"])
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)


def _number(text):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        try:
            return float(text)
        except ValueError as err:
            raise ConfigurationError(f"sweep value {text!r} is not a number") from err


def cell_name(cell):
    return "_".join(f"{k}={cell[k]}" for k in SWEEP_KEYS if k in cell) or "base"


def _run_cell(args):
    spec, cell, seed, path = args
    try:
        cfg = spec.config(cell, seed)
        log = solve(spec.game, cfg, path)
        return {"status": "ok", "iterations": len(log), "final": log.nash_conv[-1] if len(log) else float("nan")}
    except (ConfigurationError, ContractError, NumericalError, FloatingPointError, ValueError) as err:
        return {"status": "failed", "error": f"{type(err).__name__}: {err}"}


def run_sweep(spec):
    """Run every cell and seed, write per-run CSVs, an index and the aggregate.

    A failing run is recorded in the index and skipped in the aggregate;
    the sweep carries on.  Returns the aggregate path.
    """
    out = spec.output_dir
    try:
        (out / "runs").mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as err:
        raise ConfigurationError(f"output directory {out} is not writable: {err}") from err
    jobs = []
    for cell in spec.cells():
        for seed in spec.seeds:
            jobs.append((spec, cell, seed, out / "runs" / f"{cell_name(cell)}_seed={seed}.csv"))
    if spec.n_jobs > 1:
        with ProcessPoolExecutor(max_workers=spec.n_jobs) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    index_rows = []
    for (_, cell, seed, path), res in zip(jobs, results):
        index_rows.append(
            {
                "cell": cell_name(cell),
                "seed": seed,
                "status": res["status"],
                "iterations": res.get("iterations", ""),
                "final_nash_conv": repr(float(res["final"])) if "final" in res else "",
                "path": path.relative_to(out).as_posix() if res["status"] == "ok" else "",
                "error": res.get("error", ""),
            }
        )
    _write_rows(out / "index.csv", INDEX_COLUMNS, index_rows)
    agg = aggregate_runs(out, spec.cells(), index_rows)
    path = out / "aggregate.csv"
    _write_rows(path, AGGREGATE_COLUMNS, agg)
    return path


def aggregate_runs(out_dir, cells, index_rows):
    """Mean, min and max NashConv per cell and iteration over the successful seeds."""
    rows = []
    for cell in cells:
        name = cell_name(cell)
        logs = [
            RunLog.from_csv(Path(out_dir) / r["path"]) for r in index_rows if r["cell"] == name and r["status"] == "ok"
        ]
        if not logs:
            continue
        n = min(len(lg) for lg in logs)
        for i in range(n):
            vals = np.array([lg.rows[i]["nash_conv_total"] for lg in logs])
            rows.append(
                {
                    "cell": name,
                    **{k: cell.get(k, "") for k in SWEEP_KEYS},
                    "iteration": logs[0].rows[i]["iteration"],
                    "n_seeds": len(logs),
                    "mean": repr(float(vals.mean())),
                    "min": repr(float(vals.min())),
                    "max": repr(float(vals.max())),
                }
            )
    return rows


def _write_rows(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c, "") for c in columns})


def read_aggregate(path):
    """Parse an aggregate CSV back into typed rows; raises on a schema mismatch."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != AGGREGATE_COLUMNS:
            raise ContractError(f"{path} has columns {reader.fieldnames}, expected {AGGREGATE_COLUMNS}")
        out = []
        for r in reader:
            row = {"cell": r["cell"]}
            for k in SWEEP_KEYS:
                row[k] = _number(r[k]) if r[k] != "" else None
            row["iteration"] = int(r["iteration"])
            row["n_seeds"] = int(r["n_seeds"])
            for k in ("mean", "min", "max"):
                row[k] = float(r[k])
            out.append(row)
    return out


def read_index(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def infoset_table(game_name):
    """Rows describing every information set of a game."""
    game = build_game(game_name)
    rows = []
    for i in range(game.num_infosets):
        rows.append(
            {
                "infoset": i,
                "player": int(game.infoset_player[i]),
                "key": game.infoset_keys[i],
                "depth": int(game.infoset_depth[i]),
                "histories": len(game.infoset_members[i]),
                "legal": " ".join(game.action_names[a] for a in game.legal_actions(i)),
            }
        )
    return game, rows


__all__ = [
    "AGGREGATE_COLUMNS",
    "DESK_SCALE",
    "ExperimentSpec",
    "MAX_RUNS",
    "OUTPUT_ENV",
    "build_config",
    "default_output_dir",
    "infoset_table",
    "load_config_file",
    "pretrain",
    "read_aggregate",
    "reload_report",
    "run_sweep",
    "solve",
    "solve_baseline",
]
