#!/usr/bin/env python3
"""Convert the 5000-sample MNIST subset shipped in the mlxtend wheel into
gzipped IDX files (seeded shuffle, 4000 train / 1000 test).

    pip download --no-deps -d /tmp/pk mlxtend
    python3 tools/make_mnist_subset.py /tmp/pk/mlxtend-*.whl data/mnist-5k
"""
import argparse
import gzip
import pathlib
import random
import struct
import zipfile

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    # mtime=0 keeps the archive bytes reproducible
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
        f.write(header + bytes(payload))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("wheel")
    ap.add_argument("out_dir")
    ap.add_argument("--test", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=20240101)
    args = ap.parse_args()

    text = gzip.decompress(zipfile.ZipFile(args.wheel).read(MEMBER)).decode()
    rows = [list(map(int, line.split(","))) for line in text.splitlines() if line]
    random.Random(args.seed).shuffle(rows)

    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = {"test": rows[: args.test], "train": rows[args.test :]}
    for name, part in splits.items():
        pixels = [p for r in part for p in r[:-1]]
        labels = [r[-1] for r in part]
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x00000803, (len(part), 28, 28), pixels)
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x00000801, (len(part),), labels)
        print(name, len(part))


if __name__ == "__main__":
    main()
