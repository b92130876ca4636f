"""Write the run recipes under configs/: UCI grid plus synthetic CNC stand-ins."""

import argparse
import json
from pathlib import Path

from scvae.cli import ENSEMBLE
from scvae.data import CNC_SHAPES

WINDOWS = (4, 8, 16)
STANDIN_ROWS = 1000


def recipes():
    for dataset in ("occupancy", "ozone"):
        for tw in WINDOWS:
            for model in ENSEMBLE:
                yield f"uci/{dataset}-tw{tw}-{model}.json", {"dataset": dataset, "tw": tw, "model": model}
    for name, (rows, _) in CNC_SHAPES.items():
        for model in ENSEMBLE:
            yield f"cnc/{name}-tw4-{model}.json", {
                "dataset": f"synth:{name}",
                "synth_scale": STANDIN_ROWS / rows,
                "tw": 4,
                "model": model,
                "epochs": 40,
            }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dest", default="configs")
    args = ap.parse_args()
    n = 0
    for rel, cfg in recipes():
        path = Path(args.dest) / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
        n += 1
    print(f"wrote {n} recipes under {args.dest}/")


if __name__ == "__main__":
    main()
