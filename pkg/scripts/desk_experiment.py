"""Desk-scale comparison of single networks, the bagged ensemble and the experts.

    python scripts/desk_experiment.py --out runs/desk

Prints the metric table and eye-focus rates and writes ``results.json``.
Defaults take about five minutes on one CPU core.
"""

import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from cyclone_alexnet.evaluation import render_confusion, render_table
from cyclone_alexnet.experiment import DeskConfig, eye_focus_rate, run_desk_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--members", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0, help="data seed")
    ap.add_argument("--overlap", choices=["none", "one-third-adjacent"], default="one-third-adjacent")
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = DeskConfig(n=args.n, data_seed=args.seed, members=args.members, overlap=args.overlap)
    cfg.training = replace(cfg.training, epochs=args.epochs)
    res = run_desk_experiment(cfg)

    singles = [s["test"] for s in res["singles"]]
    median_single = singles[int(np.argsort([r.rmse for r in singles])[len(singles) // 2])]
    table = render_table(
        {"Single (median)": median_single, "Global AlexNet": res["ensemble_test"], "Local AlexNets": res["distributed_test"]}
    )
    high = [s for s in res["test"] if s.wind_speed > 96]
    focus = {layer: eye_focus_rate(res["ensemble"], high, layer) for layer in range(1, 6)}

    print(f"\npredict-mean baseline RMSE {res['baseline_rmse']:.2f} kt")
    print("single-model RMSE: " + ", ".join(f"{r.rmse:.2f}" for r in singles))
    print(table)
    print("gating confusion (ensemble):")
    print(render_confusion(res["ensemble_test"]))
    print("eye focus (median heatmap argmax within 25% width, speed > 96):")
    for layer, rate in focus.items():
        print(f"  stage {layer}: {rate:.1%}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {
        "baseline_rmse": res["baseline_rmse"],
        "singles": [r.to_dict() for r in singles],
        "ensemble": res["ensemble_test"].to_dict(),
        "distributed": res["distributed_test"].to_dict(),
        "eye_focus": focus,
        "seconds": res["seconds"],
    }
    (out / "results.json").write_text(json.dumps(summary, indent=2, default=float) + "\n")
    print(f"wrote {out / 'results.json'}")


if __name__ == "__main__":
    main()
