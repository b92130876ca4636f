"""Run a directory of recipes and, per dataset/window group, the six-model consensus."""

import argparse
import json
import os
from collections import defaultdict
from pathlib import Path

from scvae import cli


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("configs", help="directory of JSON recipes, e.g. configs/cnc")
    ap.add_argument("--out", default="out")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--ratio", type=float, default=0.05)
    args = ap.parse_args()

    paths = sorted(str(p) for p in Path(args.configs).glob("*.json"))
    result = cli.cmd_grid(paths, {"out": args.out}, args.jobs)
    for path, err in result["failed"].items():
        print(f"FAILED {path}: {err}")

    groups = defaultdict(list)
    for path, out in result["completed"].items():
        cfg = cli.load_config(path)
        groups[(cfg.dataset, cfg.tw)].append(out["score"]["scores"])
        if "metric" in out:
            m = out["metric"]
            print(f"{m['dataset']:<12} tw={m['tw']:<3} {m['model']:<8} PRAUC {m['value']:.4f}")
    for (dataset, tw), scores in sorted(groups.items()):
        if len(scores) != len(cli.ENSEMBLE):
            continue
        rep = cli.cmd_consensus(scores, args.ratio, os.path.join(args.out, "consensus"))
        print(f"consensus {dataset} tw={tw}: " + json.dumps(rep["match_general"], sort_keys=True))
        if "ground_truth_agreement" in rep:
            print("  agreement with ground truth: " + json.dumps(rep["ground_truth_agreement"], sort_keys=True))


if __name__ == "__main__":
    main()
