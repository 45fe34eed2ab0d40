#!/usr/bin/env python3
"""Build the class-balanced MNIST subset used by the training checks.

Input is a directory of per-digit JSON files as shipped by the `mnist` npm
package (src/digits/<d>.json, each {"data": [784 floats per image]}).
Output is four IDX files (images 0x00000803, labels 0x00000801).
"""

import argparse
import json
import random
import struct
from pathlib import Path


def load_digits(src: Path):
    per_class = []
    for d in range(10):
        flat = json.loads((src / f"{d}.json").read_text())["data"]
        if len(flat) % 784:
            raise SystemExit(f"{d}.json: {len(flat)} values is not a multiple of 784")
        per_class.append([flat[i:i + 784] for i in range(0, len(flat), 784)])
    return per_class


def write_images(path: Path, images):
    with path.open("wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(min(255, max(0, round(v * 255))) for v in img))


def write_labels(path: Path, labels):
    with path.open("wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("src", type=Path, help="directory holding 0.json .. 9.json")
    ap.add_argument("out", type=Path)
    ap.add_argument("--train-per-class", type=int, default=500)
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=2022)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    train, test = [], []
    for label, images in enumerate(load_digits(args.src)):
        need = args.train_per_class + args.test_per_class
        if len(images) < need:
            raise SystemExit(f"digit {label}: {len(images)} images, need {need}")
        order = list(range(len(images)))
        rng.shuffle(order)
        train += [(images[i], label) for i in order[:args.train_per_class]]
        test += [(images[i], label) for i in order[args.train_per_class:need]]
    rng.shuffle(train)
    rng.shuffle(test)

    args.out.mkdir(parents=True, exist_ok=True)
    for name, rows in (("train", train), ("t10k", test)):
        write_images(args.out / f"mnist-{name}-images-idx3-ubyte", [r[0] for r in rows])
        write_labels(args.out / f"mnist-{name}-labels-idx1-ubyte", [r[1] for r in rows])
        print(f"{name}: {len(rows)} images")


if __name__ == "__main__":
    main()
