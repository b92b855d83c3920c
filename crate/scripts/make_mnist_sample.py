#!/usr/bin/env python3
"""Build a small MNIST sample in gzipped IDX format.

Source: the `mnist` npm package (MIT, https://github.com/cazala/mnist), which
ships 10,000 MNIST digits as normalized grayscale JSON. Pixels are mapped back
to bytes with round(v * 255), shuffled with a fixed seed, and split into
6,000 training and 4,000 test images.

Usage:
    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python3 scripts/make_mnist_sample.py package/src/digits data/mnist-sample
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

TRAIN = 6000


def write_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    samples = []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        for k in range(len(data) // 784):
            px = [min(255, max(0, round(v * 255))) for v in data[k * 784:(k + 1) * 784]]
            samples.append((px, digit))
    random.Random(20240611).shuffle(samples)
    train, test = samples[:TRAIN], samples[TRAIN:]
    write_images(dst / "train-images-idx3-ubyte.gz", [s[0] for s in train])
    write_labels(dst / "train-labels-idx1-ubyte.gz", [s[1] for s in train])
    write_images(dst / "t10k-images-idx3-ubyte.gz", [s[0] for s in test])
    write_labels(dst / "t10k-labels-idx1-ubyte.gz", [s[1] for s in test])
    print(f"train={len(train)} test={len(test)}")


if __name__ == "__main__":
    main()
