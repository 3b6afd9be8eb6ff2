"""Train FCN, RCDGCN-R and RCDGCN over several seeds on one scenario.

    python scripts/compare_variants.py --config configs/icm495-like.toml --seeds 0,1,2

Writes ``variants.csv`` (one row per variant and seed) into ``--out`` and
prints the seed-averaged table, including incident-window MAE with the
capacity features zeroed at inference.
"""
from __future__ import annotations

import argparse
import csv
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from rcdgcn import model as M
from rcdgcn import pipeline as P
from rcdgcn.config import load_config


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--config", type=Path, default=Path("configs/icm495-like.toml"))
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--variants", default=",".join(M.VARIANTS))
    ap.add_argument("--out", type=Path, default=Path("runs/compare"))
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    cfg = load_config(args.config)
    args.out.mkdir(parents=True, exist_ok=True)
    data_dir = args.out / "data"
    if not (data_dir / "speeds.csv").exists():
        print(P.simulate(cfg, data_dir))
    ds = P.load_dataset(cfg, data_dir)

    rows = []
    for seed in (int(s) for s in args.seeds.split(",")):
        run_cfg = replace(cfg, run=replace(cfg.run, seed=seed))
        for variant in args.variants.split(","):
            t0 = time.perf_counter()
            res = P.train_model(run_cfg, ds, variant)
            M.save(res.params, args.out / f"{variant}_seed{seed}.ckpt")
            rep = P.evaluate(res.params, ds)
            row = {"variant": variant, "seed": seed, "mae_mph": rep.mae, "rmse_mph": rep.rmse_mph,
                   "rmse_norm": rep.rmse, "best_epoch": res.best_epoch, "seconds": time.perf_counter() - t0,
                   "incident_mae": np.nan, "incident_mae_zeroed": np.nan}
            if variant != "fcn":
                row["incident_mae"] = P.incident_mae(res.params, ds)
                row["incident_mae_zeroed"] = P.incident_mae(res.params, ds, zero_features=True)
            rows.append(row)
            print(f"seed {seed} {variant:9s} mae {rep.mae:.4f} mph  ({row['seconds']:.0f}s)", flush=True)

    with open(args.out / "variants.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)

    print(f"\n{'variant':9s}  {'mae_mph':>8s}  {'rmse_mph':>8s}  {'rmse_norm':>9s}  {'inc_mae':>8s}  {'zeroed':>8s}")
    for variant in args.variants.split(","):
        sel = [r for r in rows if r["variant"] == variant]
        mean = {k: float(np.mean([r[k] for r in sel])) for k in ("mae_mph", "rmse_mph", "rmse_norm",
                                                                  "incident_mae", "incident_mae_zeroed")}
        print(f"{variant:9s}  {mean['mae_mph']:8.4f}  {mean['rmse_mph']:8.4f}  {mean['rmse_norm']:9.5f}  "
              f"{mean['incident_mae']:8.4f}  {mean['incident_mae_zeroed']:8.4f}")


if __name__ == "__main__":
    main()
