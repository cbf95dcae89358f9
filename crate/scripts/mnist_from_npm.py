#!/usr/bin/env python3
"""Convert the digit samples bundled in the npm `mnist` package (MIT, 10,001
MNIST test digits) into gzipped IDX files.

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_from_npm.py package/dist/mnist.js data/mnist
"""
import gzip
import json
import re
import struct
import sys
from pathlib import Path


def main(bundle: str, out_dir: str) -> None:
    src = Path(bundle).read_text()
    chunks = re.findall(r'module.exports=(\{ "data": \[[^\]]*\]\s*\})', src)
    if len(chunks) != 10:
        sys.exit(f"expected 10 digit blocks, found {len(chunks)}")

    images = bytearray()
    labels = bytearray()
    # interleave digits so the file is not sorted by class
    per_digit = [json.loads(c)["data"] for c in chunks]
    counts = [len(d) // 784 for d in per_digit]
    for i in range(max(counts)):
        for digit, pixels in enumerate(per_digit):
            if i < counts[digit]:
                row = pixels[i * 784:(i + 1) * 784]
                images.extend(min(255, max(0, round(v * 255))) for v in row)
                labels.append(digit)

    n = len(labels)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(out / "digits-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        f.write(images)
    with gzip.GzipFile(out / "digits-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels)
    print(f"wrote {n} samples to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
