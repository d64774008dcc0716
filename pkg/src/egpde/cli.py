"""Command-line entry point: ``egpde <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .config import ConfigError, RunConfig, load_run_config, with_overrides
from .data import DataError, PreparedData, RawSeries, load_csv, prepare, synthetic_series, write_csv
from .evaluation import (aggregate_runs, contribution_svg, evaluate_arbitrary, variable_contribution,
                         write_contribution_csv)
from .model import AblationMode, EgPDENet, UnsupportedFeatureError
from .ode import SolverConfig
from .training import CheckpointError, TrainingDiverged, fit, load_checkpoint, save_checkpoint, tiny_gradcheck

log = logging.getLogger("egpde")

GRADCHECK_TOLERANCE = 1e-4


class CommandError(Exception):
    pass


def parse_steps(text: str) -> List[float]:
    try:
        steps = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise CommandError(f"could not parse steps {text!r}; expected comma-separated numbers") from None
    if not steps:
        raise CommandError("no steps given")
    if steps[0] <= 0:
        raise CommandError("steps must be positive")
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise CommandError("steps must be strictly increasing")
    return steps


def parse_seeds(text: str) -> List[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise CommandError(f"could not parse seeds {text!r}") from None


def _load_data(cfg: RunConfig, stats=None) -> PreparedData:
    raw = load_csv(cfg.dataset, cfg.target_column)
    return prepare(raw, cfg.window, cfg.offsets, half_rate=cfg.half_rate, stats=stats)


def checkpoint_path(out: Path, seed: int) -> Path:
    return out / f"checkpoint_seed{seed}.json"


def history_path(out: Path, seed: int) -> Path:
    return out / f"history_seed{seed}.csv"


def _train_one(cfg: RunConfig, seed: int) -> str:
    data = _load_data(cfg)
    model = EgPDENet(cfg.model_config(data.original.n_exog, seed))
    model, history = fit(model, data.train, data.valid, cfg.train_config(seed))
    out = cfg.output_dir
    history.write_csv(history_path(out, seed))
    extra = {
        "seed": seed,
        "solver": {"method": cfg.solver.method, "step": cfg.solver.step, "rtol": cfg.solver.rtol,
                   "atol": cfg.solver.atol, "max_steps": cfg.solver.max_steps},
        "half_rate": cfg.half_rate,
        "target_column": cfg.target_column,
        "exog_names": data.original.exog_names,
        "best_epoch": history.best_epoch,
        "best_valid_loss": min(history.valid_loss),
    }
    save_checkpoint(model, data.stats, checkpoint_path(out, seed), extra=extra)
    return (f"seed {seed}: {len(history.epochs)} epochs, best epoch {history.best_epoch}, "
            f"valid mse {min(history.valid_loss):.6f}")


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    cfg = with_overrides(cfg, ablation=args.ablation, output_dir=args.output_dir, max_epochs=args.max_epochs,
                         seeds=parse_seeds(args.seeds) if args.seeds else None)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    _load_data(cfg)  # fail on bad data before any training starts
    if args.parallel and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            for line in pool.map(_train_one, [cfg] * len(cfg.seeds), cfg.seeds):
                print(line)
    else:
        for seed in cfg.seeds:
            print(_train_one(cfg, seed))
    print(f"outputs written to {cfg.output_dir}")
    return 0


def _solver_from(extra: dict) -> SolverConfig:
    return SolverConfig(**extra["solver"]) if "solver" in extra else SolverConfig()


def cmd_eval(args) -> int:
    steps = parse_steps(args.steps) if args.steps else None
    cfg = load_run_config(args.config)
    if args.output_dir:
        cfg = with_overrides(cfg, output_dir=Path(args.output_dir))
    steps = steps or list(cfg.eval_steps)
    reports = []
    for ckpt_path in args.checkpoint:
        ckpt = load_checkpoint(ckpt_path)
        data = _load_data(cfg, stats=ckpt.stats)
        reports.append(evaluate_arbitrary(ckpt.model, data.test, data.original, data.stats, steps,
                                          _solver_from(ckpt.extra)))
    agg = aggregate_runs(reports)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    agg.write_csv(out / "report.csv")
    agg.write_json(out / "report.json")
    print(agg.table())
    skipped = reports[0][0].skipped
    if skipped:
        print(f"{skipped} window(s) skipped: ground truth beyond the end of the original series")
    return 0


def cmd_gradcheck(args) -> int:
    err = tiny_gradcheck(seed=args.seed, mode=args.ablation, eps=args.eps, solver=SolverConfig(step=args.step))
    ok = err < GRADCHECK_TOLERANCE
    print(f"max relative error: {err:.3e} ({'PASS' if ok else 'FAIL'}, tolerance {GRADCHECK_TOLERANCE:g})")
    return 0 if ok else 1


def cmd_contrib(args) -> int:
    cfg = load_run_config(args.config)
    if args.output_dir:
        cfg = with_overrides(cfg, output_dir=Path(args.output_dir))
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.model.mode is AblationMode.NO_SELF_ATT:
        raise UnsupportedFeatureError("variable contributions need the self-attention block; "
                                      "this checkpoint was trained in no_self_att mode")
    data = _load_data(cfg, stats=ckpt.stats)
    contrib = variable_contribution(ckpt.model, data.test, data.original.exog_names)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    write_contribution_csv(contrib, out / "contrib.csv")
    (out / "contrib.svg").write_text(contribution_svg(contrib))
    for name, weight in contrib:
        print(f"{name:<24}{weight:.4f}")
    return 0


def cmd_prepare_data(args) -> int:
    out = Path(args.out)
    if args.synthetic:
        series = synthetic_series(args.rows, seed=args.seed, noise=args.noise)
    else:
        if not args.input:
            raise CommandError("give --input FILE or --synthetic")
        series = _convert(args)
    write_csv(series, out)
    print(f"wrote {len(series)} rows x {len(series.names)} columns to {out} (target: {series.target_name})")
    return 0


def _convert(args) -> RawSeries:
    """Re-emit a delimited text file as canonical CSV, optionally dropping columns."""
    import csv

    src = Path(args.input)
    if not src.is_file():
        raise DataError(f"input not found: {src}")
    delim = {"space": None, "tab": "\t"}.get(args.delimiter, args.delimiter)
    with src.open(encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    split = (lambda ln: ln.split()) if delim is None else (lambda ln: next(csv.reader([ln], delimiter=delim)))
    header = [h.strip() for h in split(lines[0])]
    drop = set(args.drop or [])
    keep = [i for i, h in enumerate(header) if h not in drop]
    tmp = Path(args.out).with_suffix(".tmp.csv")
    tmp.parent.mkdir(parents=True, exist_ok=True)
    with tmp.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([header[i] for i in keep])
        for ln in lines[1:]:
            cells = split(ln)
            w.writerow([cells[i] if i < len(cells) else "" for i in keep])
    try:
        return load_csv(tmp, args.target)
    finally:
        tmp.unlink()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="egpde", description="Exogenous-guided continuous-time forecasting.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = p.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train one model per seed")
    tr.add_argument("config", help="run config JSON file")
    tr.add_argument("--seeds", help="comma-separated seeds, overriding the config")
    tr.add_argument("--ablation", choices=[m.value for m in AblationMode], help="model variant")
    tr.add_argument("--output-dir", type=Path, help="where to write checkpoints and histories")
    tr.add_argument("--max-epochs", type=int, help="epoch budget per run")
    tr.add_argument("--parallel", type=int, default=0, metavar="N",
                    help="train seeds in N worker processes (default: sequential)")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="score checkpoints at arbitrary forecast steps")
    ev.add_argument("checkpoint", nargs="+", help="checkpoint file(s); several are aggregated as seeds")
    ev.add_argument("--config", required=True, help="run config JSON file")
    ev.add_argument("--steps", help='comma-separated increasing steps, e.g. "1,1.5,2,2.5,3"')
    ev.add_argument("--output-dir", help="where to write report.csv / report.json")
    ev.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="compare backprop with finite differences on a tiny model")
    gc.add_argument("--seed", type=int, default=0, help="initialisation and data seed")
    gc.add_argument("--ablation", choices=[m.value for m in AblationMode], default="full", help="model variant")
    gc.add_argument("--eps", type=float, default=1e-5, help="finite-difference half-width")
    gc.add_argument("--step", type=float, default=0.1, help="RK4 step size")
    gc.set_defaults(func=cmd_gradcheck)

    ct = sub.add_parser("contrib", help="export per-variable attention contributions")
    ct.add_argument("checkpoint", help="checkpoint file")
    ct.add_argument("--config", required=True, help="run config JSON file")
    ct.add_argument("--output-dir", help="where to write contrib.csv / contrib.svg")
    ct.set_defaults(func=cmd_contrib)

    pd = sub.add_parser("prepare-data", help="write a canonical CSV (synthetic or converted)")
    pd.add_argument("--out", required=True, help="output CSV path")
    pd.add_argument("--synthetic", action="store_true", help="generate the lagged-sinusoid dataset")
    pd.add_argument("--rows", type=int, default=2000, help="synthetic: number of rows")
    pd.add_argument("--seed", type=int, default=0, help="synthetic: noise/phase seed")
    pd.add_argument("--noise", type=float, default=0.05, help="synthetic: target noise std")
    pd.add_argument("--input", help="convert: source delimited text file with a header row")
    pd.add_argument("--target", help="convert: target column name")
    pd.add_argument("--delimiter", default=",", help='convert: field delimiter, or "space" / "tab"')
    pd.add_argument("--drop", nargs="*", help="convert: column names to leave out")
    pd.set_defaults(func=cmd_prepare_data)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError, DataError, CheckpointError, UnsupportedFeatureError,
            TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
