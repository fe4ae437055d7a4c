"""MAP with and without the image feature as the number of text features grows.

Prints the per-size table averaged over seeds and writes the raw numbers as JSON.
"""

import argparse
import json
import time

from aspectkg.experiments import eal_image_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--queries", type=int, default=600)
    ap.add_argument("--out", help="optional JSON output path")
    args = ap.parse_args()
    t0 = time.perf_counter()
    res = eal_image_ablation(seeds=range(args.seeds), n_queries=args.queries)
    print(res.table())
    print(f"({time.perf_counter() - t0:.1f} s, {args.seeds} seeds, {args.queries} queries)")
    if args.out:
        payload = {"sizes": res.sizes, "without": res.without, "with_image": res.with_image,
                   "mean_delta": {k: res.mean_delta(k) for k in res.sizes}}
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
