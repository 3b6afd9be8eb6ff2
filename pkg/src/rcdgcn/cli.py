"""``rcdgcn simulate|train|evaluate|analyze|predict``.

Exit codes: 0 success, 2 usage/config/data error, 3 training or other
runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import model as M
from . import pipeline as P
from . import train as T
from .config import RunConfig, from_mapping, load_config
from .dataset import InsufficientDataError
from .graph import SchemaError
from .tensor import DimensionError

log = logging.getLogger("rcdgcn")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


def _apply_overrides(cfg: RunConfig, pairs: list[str]) -> RunConfig:
    """``--set section.key=value`` with the value parsed as a TOML literal."""
    if not pairs:
        return cfg
    lines = []
    for item in pairs:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        try:
            tomllib.loads(f"v = {value}")
        except tomllib.TOMLDecodeError:
            value = '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
        lines.append(f"{key.strip()} = {value}")
    doc = tomllib.loads("\n".join(lines))
    base = cfg.source.parent if cfg.source else Path.cwd()
    merged = {}
    for section in ("run", "scenario", "data", "model", "train", "analysis"):
        current = getattr(cfg, section)
        merged[section] = {k: (str(v) if isinstance(v, Path) else v)
                           for k, v in vars(current).items() if v is not None}
    for section, table in doc.items():
        if not isinstance(table, dict):
            raise UsageError(f"--set {section}: expected section.key=value")
        merged.setdefault(section, {}).update(table)
    out = from_mapping(merged, base)
    out.source = cfg.source
    return out


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else from_mapping({})
    cfg = _apply_overrides(cfg, args.set)
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        cfg.run = replace(cfg.run, seed=args.seed)
    if getattr(args, "out", None):
        cfg.run = replace(cfg.run, out_dir=Path(args.out).resolve())
    return cfg


def _print_table(rows: list[list[str]]) -> None:
    widths = [max(len(r[k]) for r in rows) for k in range(len(rows[0]))]
    for r in rows:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())


# ----------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = Path(args.out).resolve() if args.out else cfg.data.dir
    s = P.simulate(cfg, out)
    print(f"nodes={s.n_nodes} steps={s.n_steps} incidents={s.n_incidents} dir={s.out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = P.load_dataset(cfg)
    res = P.train_model(cfg, ds)
    out = cfg.run.out_dir
    out.mkdir(parents=True, exist_ok=True)
    variant = res.params.variant
    ckpt = Path(args.checkpoint[0]).resolve() if args.checkpoint else out / f"{variant}.ckpt"
    M.save(res.params, ckpt)
    T.write_curve(out / f"{variant}_curve.csv", res.curve)
    print(f"variant={variant} best_epoch={res.best_epoch} best_val_mse={res.best_val_mse!r} checkpoint={ckpt}")
    return EXIT_OK


def _checkpoints(args) -> list[Path]:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    return [Path(c) for c in args.checkpoint]


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    ds = P.load_dataset(cfg)
    rows = [["checkpoint", "variant", "mae_mph", "rmse_mph", "rmse_norm", "val_mse"]]
    records = []
    for path in _checkpoints(args):
        params = M.load(path)
        rep = P.evaluate(params, ds)
        val = P.validation_mse(params, ds)
        name = path.stem
        rows.append([name, params.variant, f"{rep.mae:.4f}", f"{rep.rmse_mph:.4f}", f"{rep.rmse:.6f}",
                     f"{val:.10g}"])
        records += [(name, params.variant, m, s, v) for m, s, v in rep.rows()]
        records.append((name, params.variant, "mse_norm", "val", val))
    _print_table(rows)
    out = cfg.run.out_dir
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "evaluation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["checkpoint", "variant", "metric", "scope", "value"])
        for name, variant, m, s, v in records:
            w.writerow([name, variant, m, s, repr(float(v))])
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _config(args)
    ds = P.load_dataset(cfg)
    out = cfg.run.out_dir
    a = cfg.analysis
    for path in _checkpoints(args):
        params = M.load(path)
        result = P.analyze(params, ds, a.percentile, a.case_margin, a.case_horizon)
        target = out if len(args.checkpoint) == 1 else out / path.stem
        P.write_analysis(result, target, ds.graph.node_ids)
        print(f"{path.stem}: flagged {len(result.links.flagged)} of {ds.graph.n_nodes} nodes "
              f"({', '.join(result.links.flagged)}); {len(result.cases)} incident cases -> {target}")
    return EXIT_OK


def cmd_predict(args) -> int:
    """Forecast the steps following the last ``history`` steps of the dataset."""
    cfg = _config(args)
    ds = P.load_dataset(cfg)
    out = cfg.run.out_dir
    out.mkdir(parents=True, exist_ok=True)
    q = ds.history
    x = ds.norm.normalize_states(ds.raw.speeds[-q:])[None]
    z = ds.norm.transform_features(ds.raw.features[-q:])[None]
    for path in _checkpoints(args):
        params = M.load(path)
        P.check_compatible(params, ds)
        pred = M.predict(params, x, z, ds.rings(params.hyper.max_hops))[0]
        mph = ds.norm.denormalize_states(pred)
        target = out / f"predictions_{path.stem}.csv"
        with open(target, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "node_id", "speed_mph"])
            for t in range(mph.shape[0]):
                for i, nid in enumerate(ds.graph.node_ids):
                    w.writerow([ds.raw.n_steps + t, nid, repr(float(mph[t, i, 0]))])
        print(f"{path.stem}: {mph.shape[0]} steps x {mph.shape[1]} nodes -> {target}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "evaluate": cmd_evaluate,
            "analyze": cmd_analyze, "predict": cmd_predict}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rcdgcn", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).split("\n")[0])
        p.add_argument("--config", type=Path, help="run configuration (TOML, section.key = value)")
        p.add_argument("--checkpoint", action="append", default=[],
                       help="checkpoint path (repeatable for evaluate/analyze/predict)")
        p.add_argument("--out", help="output directory (dataset directory for simulate)")
        p.add_argument("--seed", type=int, help="overrides run.seed")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config entry")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train" and len(args.checkpoint) > 1:
        print("error: train takes at most one --checkpoint", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (M.ConfigError, M.CheckpointError, SchemaError, InsufficientDataError, UsageError,
            FileNotFoundError, DimensionError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (T.TrainingError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
