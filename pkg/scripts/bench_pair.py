"""Train both architectures on one dataset and print the learning/inference/memory table."""

import argparse
import os

from scvae import cli


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dataset", default="occupancy")
    ap.add_argument("--tw", type=int, default=16)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--out", default="out")
    args = ap.parse_args()

    cfg = cli.RunConfig(dataset=args.dataset, tw=args.tw, epochs=args.epochs, out=args.out)
    result = cli.cmd_bench(cfg)
    with open(os.path.join(cfg.run_dir, "bench.txt"), encoding="utf-8") as fh:
        print(fh.read(), end="")
    print("SCVAE / CNN-VAE ratios:", {k: round(v, 3) for k, v in result["ratios"].items() if v is not None})
    print("report:", result["bench"])


if __name__ == "__main__":
    main()
