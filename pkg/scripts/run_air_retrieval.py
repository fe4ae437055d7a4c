"""Recall@k of the trained aspect image retriever against plain aspect-text similarity."""

import argparse
import json
import time

from aspectkg.experiments import air_vs_baseline


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--k", default="3,5,10")
    ap.add_argument("--out", help="optional JSON output path")
    args = ap.parse_args()
    ks = tuple(int(k) for k in args.k.split(","))
    t0 = time.perf_counter()
    cmp = air_vs_baseline(seeds=range(args.seeds), ks=ks)
    print(cmp.table())
    print(f"({time.perf_counter() - t0:.1f} s, {args.seeds} seeds)")
    if args.out:
        payload = {"ks": list(ks), "air": cmp.air, "baseline": cmp.baseline, "loss_curves": cmp.loss_curves}
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
