"""Write a synthetic MNIST-style IDX dataset (default 10k train / 2k test)."""

import argparse
import time
from pathlib import Path

from batt.dataset_io import write_idx
from batt.synthetic import make_digits


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--train", type=int, default=10000)
    parser.add_argument("--test", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    args.out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    for split, n, prefix in (("train", args.train, "train"), ("test", args.test, "t10k")):
        images, labels = make_digits(n, args.seed, split)
        write_idx(images, labels, args.out_dir / f"{prefix}-images-idx3-ubyte", args.out_dir / f"{prefix}-labels-idx1-ubyte")
        print(f"{split}: {n} samples -> {args.out_dir}")
    print(f"done in {time.time() - t0:.1f}s")


if __name__ == "__main__":
    main()
