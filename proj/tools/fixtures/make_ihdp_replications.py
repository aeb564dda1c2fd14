"""Writes IHDP replication CSVs (response surface B of Hill 2011, the NPCI "A" setting).

Covariates come from the IHDP table bundled with econml (econml/data/ihdp/sim.csv).
Treated children with non-white mothers are removed, leaving 747 units
(139 treated). Usage:

    python make_ihdp_replications.py SIM_CSV OUT_DIR --reps 3 --seed 2024
"""

import argparse
import pathlib

import numpy as np
import pandas as pd

COVARIATES = [
    "bw", "b.head", "preterm", "birth.o", "nnhealth", "momage",
    "sex", "twin", "b.marr", "mom.lths", "mom.hs", "mom.scoll", "cig",
    "first", "booze", "drugs", "work.dur", "prenatal",
    "site1", "site2", "site3", "site4", "site5", "site6", "site7",
]
CONTINUOUS = 6


def load(sim_csv):
    raw = pd.read_csv(sim_csv)
    kept = raw[~((raw["treat"] == 1) & (raw["momwhite"] == 0))]
    x = kept[COVARIATES].to_numpy(dtype=float)
    x[:, :CONTINUOUS] = (x[:, :CONTINUOUS] - x[:, :CONTINUOUS].mean(0)) / x[:, :CONTINUOUS].std(0)
    return x, kept["treat"].to_numpy(dtype=int)


def surface_b(x, t, rng):
    beta = rng.choice([0.0, 0.1, 0.2, 0.3, 0.4], size=x.shape[1], p=[0.6, 0.1, 0.1, 0.1, 0.1])
    mu0 = np.exp((x + 0.5) @ beta)
    lin = x @ beta
    omega = np.mean(lin[t == 1] - mu0[t == 1]) - 4.0
    mu1 = lin - omega
    y0 = mu0 + rng.normal(size=len(t))
    y1 = mu1 + rng.normal(size=len(t))
    return mu0, mu1, y0, y1


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("sim_csv")
    ap.add_argument("out_dir")
    ap.add_argument("--reps", type=int, default=3)
    ap.add_argument("--seed", type=int, required=True)
    args = ap.parse_args()
    x, t = load(args.sim_csv)
    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rep in range(1, args.reps + 1):
        rng = np.random.default_rng([args.seed, rep])
        mu0, mu1, y0, y1 = surface_b(x, t, rng)
        frame = pd.DataFrame(x, columns=[f"x{j}" for j in range(x.shape[1])])
        frame["t"] = t
        frame["yf"] = np.where(t == 1, y1, y0)
        frame["ycf"] = np.where(t == 1, y0, y1)
        frame["mu0"] = mu0
        frame["mu1"] = mu1
        frame.to_csv(out / f"rep_{rep}.csv", index=False, float_format="%.17g")
        print(f"rep_{rep}.csv: n={len(t)} treated={t.sum()} ate={np.mean(mu1 - mu0):.4f}")


if __name__ == "__main__":
    main()
