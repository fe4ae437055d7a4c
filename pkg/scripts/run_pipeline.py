"""Run every CLI stage end to end on a fresh demo workspace.

Stops at the first stage that exits non-zero and returns its exit code.
"""

import argparse
import json
import sys
from pathlib import Path

from aspectkg.cli import main as cli
from aspectkg.experiments import DEMO_CONFIG, demo_pipeline_commands
from aspectkg.synthetic import write_demo_workspace


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--work", default="demo/work", help="where the synthetic inputs are written")
    ap.add_argument("--out", default="demo/out", help="where stage outputs and manifests go")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    work = Path(args.work)
    write_demo_workspace(work, seed=args.seed)
    (work / "config.json").write_text(json.dumps(DEMO_CONFIG, indent=2) + "\n", encoding="utf-8")
    for argv in demo_pipeline_commands(work, args.out):
        print(f"$ aspectkg {' '.join(argv)}", flush=True)
        rc = cli(argv)
        if rc:
            print(f"stage {argv[0]} exited with {rc}", file=sys.stderr)
            return rc
    return 0


if __name__ == "__main__":
    sys.exit(main())
