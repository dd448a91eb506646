"""Build the desk-scale MNIST IDX subset from the 5,000-image MNIST sample
shipped inside the `mlxtend` wheel (mlxtend/data/data/mnist_5k.csv.gz).

Usage: python3 convert.py path/to/mnist_5k.csv.gz

Writes a stratified split: 200 images per digit for training (2,000 total)
and 100 per digit for testing (1,000 total), shuffled with a fixed seed.
"""
import gzip
import random
import struct
import sys


def write_idx(prefix, rows):
    with open(f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(rows), 28, 28))
        for pixels, _ in rows:
            f.write(bytes(pixels))
    with open(f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(rows)))
        f.write(bytes(label for _, label in rows))


def main(path):
    by_class = {k: [] for k in range(10)}
    with gzip.open(path, "rt") as f:
        for line in f:
            vals = [int(float(v)) for v in line.strip().split(",")]
            by_class[vals[-1]].append((vals[:-1], vals[-1]))
    rng = random.Random(20190601)
    train, test = [], []
    for k in range(10):
        rows = by_class[k]
        rng.shuffle(rows)
        train += rows[:200]
        test += rows[200:300]
    rng.shuffle(train)
    rng.shuffle(test)
    write_idx("train", train)
    write_idx("t10k", test)


if __name__ == "__main__":
    main(sys.argv[1])
