"""Bi-scale (chunk attention) vs parameter-matched word-attention baseline on the synthetic task.

    python scripts/compare_synthetic.py --seeds 1 2 3 4 5 --out results.json
"""
import argparse
import dataclasses
import json
import time

from chunknmt.experiment import ExperimentConfig, compare


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    ap.add_argument("--epochs", type=int, default=ExperimentConfig.epochs)
    ap.add_argument("--decode", choices=("beam", "greedy"), default="beam")
    ap.add_argument("--out", help="write per-seed metrics as JSON")
    ap.add_argument("--quiet", action="store_true")
    args = ap.parse_args()
    cfg = ExperimentConfig(epochs=args.epochs, decode=args.decode)
    log = None if args.quiet else print
    rows = []
    start = time.perf_counter()
    for seed in args.seeds:
        r = compare(seed, cfg, log)
        row = {"seed": seed, "margin": r["margin"]}
        for side in ("biscale", "baseline"):
            row[side] = {k: v for k, v in r[side].items() if k != "model"}
        rows.append(row)
        print(f"seed {seed}: biscale BLEU {row['biscale']['test_bleu']:.2f} "
              f"({row['biscale']['params']} params)  baseline BLEU {row['baseline']['test_bleu']:.2f} "
              f"({row['baseline']['params']} params)  margin {r['margin']:+.2f}", flush=True)
    wins = sum(r["margin"] > 0 for r in rows)
    print(f"bi-scale ahead in {wins}/{len(rows)} seeds; {time.perf_counter() - start:.0f}s total")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"config": dataclasses.asdict(cfg), "runs": rows}, fh, indent=2, default=float)


if __name__ == "__main__":
    main()
