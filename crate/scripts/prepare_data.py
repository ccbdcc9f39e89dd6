#!/usr/bin/env python3
"""Convert the per-class JSON dumps shipped in the `mnist` and `fashion-mnist`
npm packages into gzipped IDX files.

    npm pack mnist fashion-mnist
    tar xzf mnist-1.1.0.tgz -C mnist && tar xzf fashion-mnist-1.1.0.tgz -C fashion
    python3 scripts/prepare_data.py --mnist mnist/package/src/digits \
        --fashion fashion/package/src/clothes --out data

The first `train` samples of every class (in package order) form the train
split, the next `test` samples the test split. Samples are interleaved by
class so every prefix of the file is class-balanced.
"""
import argparse
import gzip
import json
import os
import struct


def load_class(path):
    data = json.load(open(path))["data"]
    if isinstance(data[0], list):
        rows = data
    else:
        rows = [data[i:i + 784] for i in range(0, len(data), 784)]
    out = []
    for r in rows:
        if len(r) != 784:
            continue
        if max(r) <= 1.0:
            r = [int(round(v * 255.0)) for v in r]
        out.append(bytes(int(v) for v in r))
    return out


def write_idx(prefix, images, labels):
    with gzip.GzipFile(prefix + "-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(img)
    with gzip.GzipFile(prefix + "-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def convert(src, name, train, test, out):
    classes = [load_class(os.path.join(src, f"{c}.json")) for c in range(10)]
    for split, lo, hi in (("train", 0, train), ("test", train, train + test)):
        images, labels = [], []
        for i in range(lo, hi):
            for c in range(10):
                images.append(classes[c][i])
                labels.append(c)
        write_idx(os.path.join(out, f"{name}-{split}"), images, labels)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--mnist", required=True)
    ap.add_argument("--fashion", required=True)
    ap.add_argument("--out", default="data")
    ap.add_argument("--mnist-train", type=int, default=500)
    ap.add_argument("--mnist-test", type=int, default=200)
    ap.add_argument("--fashion-train", type=int, default=1000)
    ap.add_argument("--fashion-test", type=int, default=200)
    a = ap.parse_args()
    os.makedirs(a.out, exist_ok=True)
    convert(a.mnist, "mnist", a.mnist_train, a.mnist_test, a.out)
    convert(a.fashion, "fashion", a.fashion_train, a.fashion_test, a.out)


if __name__ == "__main__":
    main()
