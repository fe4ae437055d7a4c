"""Write a small synthetic workspace that every CLI stage can consume."""

import argparse
import json

from aspectkg.experiments import DEMO_CONFIG
from aspectkg.synthetic import write_demo_workspace


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("directory")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    paths = write_demo_workspace(args.directory, seed=args.seed)
    config = paths["pages"].parent / "config.json"
    config.write_text(json.dumps(DEMO_CONFIG, indent=2) + "\n", encoding="utf-8")
    for role, path in paths.items():
        print(f"{role:10s} {path}")
    print(f"{'config':10s} {config}")


if __name__ == "__main__":
    main()
