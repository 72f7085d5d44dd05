#!/usr/bin/env python3
"""Train on plain AR(1) windows and compare validation nll with the process's
own per-step nll.  Optionally retrains to confirm bitwise reproducibility."""

import argparse
import json
import logging

from advforecast.experiments import Ar1TrainingConfig, training_sanity

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--windows", type=int, default=Ar1TrainingConfig.windows)
ap.add_argument("--hidden", type=int, default=Ar1TrainingConfig.hidden)
ap.add_argument("--epochs", type=int, default=Ar1TrainingConfig.max_epochs)
ap.add_argument("--no-repeat", action="store_true", help="skip the reproducibility retrain")
args = ap.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

cfg = Ar1TrainingConfig(windows=args.windows, hidden=args.hidden, max_epochs=args.epochs)
out = training_sanity(cfg, check_reproducible=not args.no_repeat)
print(json.dumps(out, indent=2))
