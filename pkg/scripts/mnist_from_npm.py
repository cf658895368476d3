"""Convert the digit JSON files shipped in the npm ``mnist`` package to IDX.

The package stores each digit as 784 intensities in [0, 1] rounded to three
decimals; ``round(v * 255)`` recovers the original bytes. Digits are
interleaved class by class (0, 1, ..., 9, 0, 1, ...) so any prefix of the
output is class-balanced.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""

import argparse
import json
import os

import numpy as np

from spatial_vae.data import write_idx


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("digits_dir")
    ap.add_argument("out_dir")
    args = ap.parse_args(argv)
    per_class = []
    for d in range(10):
        with open(os.path.join(args.digits_dir, f"{d}.json")) as f:
            flat = np.asarray(json.load(f)["data"], dtype=np.float64)
        per_class.append(np.rint(flat.reshape(-1, 28, 28) * 255.0).astype(np.uint8))
    images, labels = [], []
    for k in range(max(len(c) for c in per_class)):
        for d, c in enumerate(per_class):
            if k < len(c):
                images.append(c[k])
                labels.append(d)
    os.makedirs(args.out_dir, exist_ok=True)
    write_idx(os.path.join(args.out_dir, "images-idx3-ubyte.gz"), np.stack(images))
    write_idx(os.path.join(args.out_dir, "labels-idx1-ubyte.gz"), np.asarray(labels, dtype=np.uint8))
    print(f"wrote {len(images)} digits to {args.out_dir}")


if __name__ == "__main__":
    main()
