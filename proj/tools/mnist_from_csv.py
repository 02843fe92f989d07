#!/usr/bin/env python3
"""Convert a CSV of unrolled 28x28 digits (784 pixels, label last) into
IDX files: the first --train-per-class images of each digit go to the
train-* pair, the next --test-per-class to the t10k-* pair."""

import argparse
import csv
import gzip
import pathlib
import struct


def write_idx(path, dims, payload):
    magic = 0x0800 | len(dims)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(bytes(payload))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("csv")
    ap.add_argument("out")
    ap.add_argument("--train-per-class", type=int, default=400)
    ap.add_argument("--test-per-class", type=int, default=100)
    args = ap.parse_args()

    opener = gzip.open if args.csv.endswith(".gz") else open
    rows = {d: [] for d in range(10)}
    with opener(args.csv, "rt") as f:
        for rec in csv.reader(f):
            label = int(float(rec[-1]))
            rows[label].append([int(float(v)) for v in rec[:-1]])

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = {"train": (0, args.train_per_class),
              "t10k": (args.train_per_class, args.train_per_class + args.test_per_class)}
    for name, (lo, hi) in splits.items():
        images, labels = [], []
        for i in range(lo, hi):
            for d in range(10):
                images.extend(rows[d][i])
                labels.append(d)
        n = len(labels)
        write_idx(out / f"{name}-images-idx3-ubyte", [n, 28, 28], images)
        write_idx(out / f"{name}-labels-idx1-ubyte", [n], labels)
        print(f"{name}: {n} images")


if __name__ == "__main__":
    main()
