"""Command-line runner: single runs, experiment grids and the verification suite.

Exit codes: 0 success, 1 usage or I/O error, 2 completed with a divergence flag.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import diagnostics
from .data import (
    SparseRatings,
    checkpoint_save,
    generate_synthetic,
    load_ratings,
    write_convergence_csv,
)
from .optimizer import RunConfig, RunLog, ScheduleParams, init_state, run
from .plot import emit_svg_plot

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2
DEFAULT_SYNTHETIC = "200,300,5,0.08,1"
DEFAULT_GRID_CAP = 256
ALGORITHMS = {"full": "full_vb", "alg1": "alg1", "alg2": "alg2"}

log = logging.getLogger("svmp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("list must not be empty")
    return values


def _float_list(text: str) -> list[float]:
    try:
        values = [_fraction(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("list must not be empty")
    return values


def _fraction(text: str) -> float:
    """Accept ``0.5`` as well as ``1/512``."""
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def _str_list(choices):
    def parse(text: str) -> list[str]:
        values = [v.strip() for v in text.split(",") if v.strip()]
        bad = [v for v in values if v not in choices]
        if bad or not values:
            raise argparse.ArgumentTypeError(f"choose from {','.join(choices)}; got {text!r}")
        return values
    return parse


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", type=Path, help="ratings file: user<TAB>item<TAB>rating per line")
    src.add_argument("--synthetic", default=None, metavar="M,N,K,DENSITY,NOISE_SD",
                     help=f"generate synthetic ratings (default {DEFAULT_SYNTHETIC})")
    p.add_argument("--algorithm", choices=sorted(ALGORITHMS), default="alg1")
    p.add_argument("--option", choices=["a", "b"], default="a")
    p.add_argument("--C", type=int, default=1, help="children sampled per factor (alg1)")
    p.add_argument("--C-global", dest="C_global", type=int, default=100, help="batch size (alg2)")
    p.add_argument("--K", type=int, default=5, help="trait dimensions of the fitted model")
    p.add_argument("--kappa", type=float, default=0.6)
    p.add_argument("--tau", type=float, default=0.0)
    p.add_argument("--scale", type=_fraction, default=1.0, help="initial step multiplier, e.g. 1/512")
    p.add_argument("--warm-hold", dest="warm_hold", type=int, default=0)
    p.add_argument("--t-max", dest="t_max", type=int, default=100)
    p.add_argument("--eval-every", dest="eval_every", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("out"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="svmp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_run = sub.add_parser("run", help="execute one training run")
    _add_run_flags(p_run)

    p_grid = sub.add_parser("grid", help="run a cartesian grid of configurations")
    _add_run_flags(p_grid)
    p_grid.add_argument("--C-list", dest="C_list", type=_int_list)
    p_grid.add_argument("--C-global-list", dest="C_global_list", type=_int_list)
    p_grid.add_argument("--scale-list", dest="scale_list", type=_float_list)
    p_grid.add_argument("--option-list", dest="option_list", type=_str_list(["a", "b"]))
    p_grid.add_argument("--algorithm-list", dest="algorithm_list", type=_str_list(sorted(ALGORITHMS)))
    p_grid.add_argument("--max-runs", dest="max_runs", type=int, default=DEFAULT_GRID_CAP)
    p_grid.add_argument("--jobs", type=int, default=1, help="worker processes (results do not depend on it)")

    p_ver = sub.add_parser("verify", help="run the numerical verification suite")
    p_ver.add_argument("--seed", type=int, default=0)
    p_ver.add_argument("--trials", type=int, default=100)
    p_ver.add_argument("--out", type=Path, default=None, help="also write the report as CSV")
    return parser


@dataclass(frozen=True)
class DataSpec:
    path: Path | None
    synthetic: tuple[int, int, int, float, float] | None
    seed: int

    def load(self) -> SparseRatings:
        if self.path is not None:
            with open(self.path, "rb") as fh:
                return load_ratings(fh)
        M, N, K, density, noise = self.synthetic
        data, _ = generate_synthetic(M, N, K, density, noise, self.seed)
        return data


def _data_spec(args) -> DataSpec:
    if args.data is not None:
        return DataSpec(args.data, None, args.seed)
    text = args.synthetic or DEFAULT_SYNTHETIC
    parts = text.split(",")
    if len(parts) != 5:
        raise UsageError(f"--synthetic expects M,N,K,density,noise_sd; got {text!r}")
    try:
        M, N, K = (int(v) for v in parts[:3])
        density, noise = float(parts[3]), float(parts[4])
    except ValueError:
        raise UsageError(f"--synthetic expects M,N,K,density,noise_sd; got {text!r}") from None
    return DataSpec(None, (M, N, K, density, noise), args.seed)


def _config(args, **overrides) -> RunConfig:
    values = dict(
        algorithm=ALGORITHMS[args.algorithm], option=args.option, C=args.C, C_global=args.C_global,
        K=args.K, t_max=args.t_max, seed=args.seed, eval_every=args.eval_every,
        kappa=args.kappa, tau=args.tau, scale=args.scale, warm_hold=args.warm_hold,
    )
    values.update(overrides)
    sched = ScheduleParams(values.pop("kappa"), values.pop("tau"), values.pop("scale"), values.pop("warm_hold"))
    try:
        return RunConfig(schedule=sched, **values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _execute(config: RunConfig, data: SparseRatings) -> RunLog:
    state = init_state(data.M, data.N, config.K, config.seed)
    return run(state, data, config)


def _config_lines(config: RunConfig, spec: DataSpec, data: SparseRatings) -> list[str]:
    s = config.schedule
    source = f"file:{spec.path}" if spec.path is not None else "synthetic:" + ",".join(map(str, spec.synthetic))
    items = {
        "algorithm": config.algorithm, "option": config.option, "C": config.C,
        "C_global": config.C_global, "K": config.K, "t_max": config.t_max, "seed": config.seed,
        "eval_every": config.eval_every, "kappa": repr(s.kappa), "tau": repr(s.tau),
        "scale": repr(s.scale), "warm_hold": s.warm_hold, "data": source,
        "M": data.M, "N": data.N, "ratings": len(data),
    }
    return [f"{k}={v}" for k, v in items.items()]


def _write_outputs(out: Path, result: RunLog, spec: DataSpec, data: SparseRatings) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "run.csv", "w", newline="") as fh:
        write_convergence_csv(result.entries, fh)
    with open(out / "final.ckpt", "wb") as fh:
        checkpoint_save(result.final_state, fh)
    (out / "config.txt").write_text("\n".join(_config_lines(result.config, spec, data)) + "\n")


def cmd_run(args) -> int:
    spec = _data_spec(args)
    config = _config(args)
    data = spec.load()
    result = _execute(config, data)
    _write_outputs(args.out, result, spec, data)
    last = result.entries[-1]
    print(f"t={last.t} ratings_accessed={last.ratings_accessed} elbo={last.elbo!r} "
          f"diverged={int(last.diverged)}")
    return EXIT_DIVERGED if result.diverged else EXIT_OK


def _cell_name(c: RunConfig) -> str:
    if c.algorithm == "full_vb":
        return "full_vb"
    size = f"C{c.C}" if c.algorithm == "alg1" else f"Cg{c.C_global}"
    return f"{c.algorithm}-{c.option}-{size}-s{c.schedule.scale!r}"


def grid_configs(args) -> list[RunConfig]:
    algorithms = args.algorithm_list or [args.algorithm]
    options = args.option_list or [args.option]
    scales = args.scale_list or [args.scale]
    cells: dict[str, RunConfig] = {}
    for alg in algorithms:
        if ALGORITHMS[alg] == "full_vb":
            combos = [{}]
        elif ALGORITHMS[alg] == "alg1":
            combos = [dict(option=o, scale=s, C=c)
                      for o, s, c in itertools.product(options, scales, args.C_list or [args.C])]
        else:
            combos = [dict(option=o, scale=s, C_global=c)
                      for o, s, c in itertools.product(options, scales, args.C_global_list or [args.C_global])]
        for combo in combos:
            cfg = _config(args, algorithm=ALGORITHMS[alg], **combo)
            cells.setdefault(_cell_name(cfg), cfg)
    return list(cells.values())


def _grid_cell(config: RunConfig, spec: DataSpec, data: SparseRatings, out: Path) -> RunLog:
    result = _execute(config, data)
    _write_outputs(out / "cells" / _cell_name(config), result, spec, data)
    return result


SUMMARY_HEADER = ["cell", "algorithm", "option", "C", "C_global", "scale", "kappa", "tau", "warm_hold",
                  "t_max", "seed", "initial_elbo", "final_elbo", "diverged", "ratings_accessed"]


def cmd_grid(args) -> int:
    spec = _data_spec(args)
    configs = grid_configs(args)
    if len(configs) > args.max_runs:
        raise UsageError(f"grid has {len(configs)} runs, above the cap of {args.max_runs}")
    data = spec.load()
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_grid_cell, c, spec, data, args.out) for c in configs]
            results = [f.result() for f in futures]
    else:
        results = [_grid_cell(c, spec, data, args.out) for c in configs]

    with open(args.out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in results:
            c, s = r.config, r.config.schedule
            w.writerow([_cell_name(c), c.algorithm, c.option, c.C, c.C_global, format(s.scale, ".17g"),
                        format(s.kappa, ".17g"), format(s.tau, ".17g"), s.warm_hold, c.t_max, c.seed,
                        format(r.initial_elbo, ".17g"), format(r.final_elbo, ".17g"), int(r.diverged),
                        r.ratings_accessed])

    curves = []
    for r in results:
        pts = [(e.ratings_accessed, math.nan if e.diverged else e.elbo)
               for e in r.entries if e.ratings_accessed > 0]
        if pts:
            curves.append((_cell_name(r.config), pts))
    if curves:
        with open(args.out / "convergence.svg", "w") as fh:
            emit_svg_plot(curves, fh, title=f"ELBO vs ratings accessed (kappa={args.kappa})")

    for r in results:
        print(f"{_cell_name(r.config):<28} final_elbo={r.final_elbo:.6g} diverged={int(r.diverged)}")
    return EXIT_DIVERGED if any(r.diverged for r in results) else EXIT_OK


def cmd_verify(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    results = diagnostics.run_checks(args.seed, args.trials)
    print(f"{'check':<24}{'value':>14}{'tolerance':>14}  result")
    for r in results:
        print(f"{r.check:<24}{r.value:>14.4g}{r.tolerance:>14.4g}  {'PASS' if r.passed else 'FAIL'}")
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["check", "value", "tolerance", "pass"])
            for r in results:
                w.writerow([r.check, format(r.value, ".17g"), format(r.tolerance, ".17g"), int(r.passed)])
    return EXIT_OK if all(r.passed for r in results) else EXIT_USAGE


COMMANDS = {"run": cmd_run, "grid": cmd_grid, "verify": cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"svmp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"svmp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())
