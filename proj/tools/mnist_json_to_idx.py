#!/usr/bin/env python3
"""Convert the per-digit JSON files shipped in the `mnist` npm package into
IDX train/test files (train-images-idx3-ubyte, ...).

Each digit file holds a flat list of 784-pixel images scaled to [0,1] with
three decimals; pixels are mapped back to bytes with round(v * 255).
The first `--train-per-class` images of every digit go to the train split,
the rest to the test split; both splits are shuffled with a fixed seed.
"""
import argparse
import json
import pathlib
import random
import struct

ROWS = COLS = 28


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), ROWS, COLS))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=pathlib.Path)
    ap.add_argument("out_dir", type=pathlib.Path)
    ap.add_argument("--train-per-class", type=int, default=800)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    train, test = [], []
    for digit in range(10):
        data = json.loads((args.digits_dir / f"{digit}.json").read_text())["data"]
        n = len(data) // (ROWS * COLS)
        for k in range(n):
            px = data[k * ROWS * COLS:(k + 1) * ROWS * COLS]
            img = [min(255, max(0, round(v * 255))) for v in px]
            (train if k < args.train_per_class else test).append((img, digit))

    rng = random.Random(args.seed)
    rng.shuffle(train)
    rng.shuffle(test)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for name, split in (("train", train), ("t10k", test)):
        write_images(args.out_dir / f"{name}-images-idx3-ubyte", [s[0] for s in split])
        write_labels(args.out_dir / f"{name}-labels-idx1-ubyte", [s[1] for s in split])
    print(f"wrote {len(train)} train / {len(test)} test images to {args.out_dir}")


if __name__ == "__main__":
    main()
