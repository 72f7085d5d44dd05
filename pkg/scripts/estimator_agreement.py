#!/usr/bin/env python3
"""Compare score-function and reparametrization gradients of E[cum_return]
on a small random forecaster over many independent noise seeds."""

import argparse
import json

import numpy as np

from advforecast.data import ReturnsTransform
from advforecast.estimators import estimator_agreement
from advforecast.model import init_model
from advforecast.sampling import Statistic

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--trials", type=int, default=200)
ap.add_argument("-L", type=int, default=1000)
ap.add_argument("--hidden", type=int, default=4)
ap.add_argument("--stat", default="cum_return:4")
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

model = init_model(args.hidden, 1, args.seed, ReturnsTransform(0.0, 0.02))
rng = np.random.default_rng(args.seed)
x = 10.0 * np.exp(np.cumsum(rng.normal(0, 0.02, 12)))
rep = estimator_agreement(model, x, Statistic.parse(args.stat), trials=args.trials, L=args.L, seed=args.seed)
print(json.dumps({k: rep.to_dict()[k] for k in ("cosine", "within_3se", "var_score", "var_reparam")}, indent=2))
print("variance ratio score/reparam: %.1f" % (rep.var_score / rep.var_reparam))
