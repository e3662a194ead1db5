"""Run the full pipeline over several seeds and write the report tables."""
import argparse
import logging
import warnings

from aical.config import load_config
from aical.pipeline import OOD_PROTOCOLS, run_pipeline, write_report


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", help="INI config (defaults otherwise)")
    ap.add_argument("--seeds", type=int, default=5, help="number of seeds, starting at 0")
    ap.add_argument("--out", default="runs/tables", help="report directory")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = load_config(args.config)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rep = run_pipeline(cfg, seeds=range(args.seeds))
    files = write_report(rep, args.out)

    print(f"{'method':14s} {'ID hECE':>9s} {'OOD hECE':>9s}")
    for m in sorted(rep.hece, key=lambda m: rep.hece_mean(m, OOD_PROTOCOLS)):
        print(f"{m:14s} {rep.hece_mean(m, ('in_test',)):9.4f} {rep.hece_mean(m, OOD_PROTOCOLS):9.4f}")
    print(f"wrote {len(files)} files to {args.out}")


if __name__ == "__main__":
    main()
