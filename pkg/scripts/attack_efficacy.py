#!/usr/bin/env python3
"""Train a forecaster on synthetic AR(1) returns and attack 100 test windows
with both gradient estimators; writes success and reduction rates per budget."""

import argparse
import csv
import dataclasses
import json
import logging
from pathlib import Path

from advforecast.experiments import (
    EfficacyConfig,
    FinancialConfig,
    financial_windows,
    run_efficacy,
    train_financial,
)
from advforecast.model import load_checkpoint, save_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/efficacy")
    ap.add_argument("--checkpoint", help="reuse a trained model instead of training")
    ap.add_argument("--iterations", type=int, default=EfficacyConfig.iterations)
    ap.add_argument("--learning-rate", type=float, default=EfficacyConfig.learning_rate)
    ap.add_argument("--windows", type=int, default=EfficacyConfig.windows)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fin = FinancialConfig()
    if args.checkpoint:
        model, ws = load_checkpoint(args.checkpoint), financial_windows(fin)
    else:
        model, ws, _ = train_financial(fin)
        save_checkpoint(model, out / "checkpoint.npz")
    cfg = EfficacyConfig(iterations=args.iterations, learning_rate=args.learning_rate,
                         windows=args.windows, seed=args.seed)
    report = run_efficacy(model, ws, cfg)

    with open(out / "efficacy.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["estimator", "epsilon", "success_rate", "halved", "median_norm"])
        w.writeheader()
        w.writerows(report.rows())
    meta = {"financial": dataclasses.asdict(fin), "efficacy": dataclasses.asdict(cfg),
            "tau": report.tau, "seconds": report.seconds}
    (out / "efficacy.json").write_text(json.dumps(meta, indent=2))
    for row in report.rows():
        print("{estimator:18s} eps={epsilon:<6g} success={success_rate:.2f} halved={halved:.2f}".format(**row))


if __name__ == "__main__":
    main()
