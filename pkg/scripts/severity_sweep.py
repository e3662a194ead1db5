"""Mean anomaly scores per injected severity for each test anomaly kind.

Seeds are shared across levels so only the injected severity differs.
"""
import argparse
import csv
import sys
import warnings

import numpy as np

from aical.anomaly import fit_normalization, score_sequence
from aical.metrics import spearman_levels
from aical.sim import TEST_KINDS, AnomalySpec, NominalModel, SimConfig, simulate


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--sequences", type=int, default=4, help="sequences per level")
    ap.add_argument("--csv", help="write rows here instead of stdout")
    args = ap.parse_args()

    cfg = SimConfig(seed=args.seed)
    model = NominalModel(cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        stats = fit_normalization([simulate(cfg, None, f"n{i}", seed=1000 + i, model=model)[0]
                                   for i in range(8)])
    rows = []
    for kind in TEST_KINDS:
        per_level = {"rho": [], "delta": []}
        for sev in range(0, 6):
            spec = AnomalySpec(kind, sev) if sev else None
            sc = [score_sequence(simulate(cfg, spec, seed=500 + s, model=model)[0], stats)
                  for s in range(args.sequences)]
            rho = float(np.mean(np.concatenate([c.rho for c in sc])))
            delta = float(np.mean(np.concatenate([c.delta for c in sc])))
            rows.append({"kind": kind, "severity": sev, "rho": round(rho, 4), "delta": round(delta, 4)})
            if sev:
                per_level["rho"].append(rho)
                per_level["delta"].append(delta)
        print(f"{kind:8s} spearman rho {spearman_levels(range(1, 6), per_level['rho']):+.2f}  "
              f"delta {spearman_levels(range(1, 6), per_level['delta']):+.2f}", file=sys.stderr)

    fh = open(args.csv, "w", newline="") if args.csv else sys.stdout
    w = csv.DictWriter(fh, fieldnames=list(rows[0]))
    w.writeheader()
    w.writerows(rows)
    if args.csv:
        fh.close()


if __name__ == "__main__":
    main()
