#!/usr/bin/env python3
"""Fetch a 5,000-image handwritten-digit subset and write it as dataset containers.

The images come from the MNIST subset bundled in the mlxtend wheel (500 per
class, 28x28, grey levels 0..255). The script writes <out>/train and
<out>/test in the container layout read by unlearn::data::load_dataset.
"""
import argparse
import gzip
import io
import json
import pathlib
import subprocess
import sys
import tempfile
import zipfile

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def download_wheel(dest: pathlib.Path) -> pathlib.Path:
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "--only-binary=:all:", "-d", str(dest), "mlxtend"],
        check=True,
        stdout=subprocess.DEVNULL,
    )
    wheels = sorted(dest.glob("mlxtend-*.whl"))
    if not wheels:
        sys.exit("fetch_digits: pip did not produce an mlxtend wheel")
    return wheels[-1]


def load_csv(wheel: pathlib.Path) -> np.ndarray:
    with zipfile.ZipFile(wheel) as zf:
        raw = gzip.decompress(zf.read(MEMBER))
    return np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.float64)


def write_container(path: pathlib.Path, x: np.ndarray, y: np.ndarray) -> None:
    path.mkdir(parents=True, exist_ok=True)
    meta = {"num_classes": 10, "input_shape": [1, 28, 28], "count": int(len(y)), "dtype": "float32"}
    (path / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    x.astype("<f4").tofile(path / "inputs.bin")
    y.astype("<u4").tofile(path / "labels.bin")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, type=pathlib.Path)
    ap.add_argument("--wheel", type=pathlib.Path, help="use an already downloaded mlxtend wheel")
    ap.add_argument("--test-per-class", type=int, default=100)
    args = ap.parse_args()

    if (args.out / "train" / "meta.json").exists() and (args.out / "test" / "meta.json").exists():
        print(f"fetch_digits: {args.out} already populated")
        return

    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel or download_wheel(pathlib.Path(tmp))
        table = load_csv(wheel)

    x = table[:, :784] / 255.0
    y = table[:, 784].astype(np.int64)
    # Deterministic stratified split: the last items of each class are held out.
    test = np.zeros(len(y), dtype=bool)
    for c in range(10):
        idx = np.flatnonzero(y == c)
        test[idx[-args.test_per_class:]] = True
    write_container(args.out / "train", x[~test], y[~test])
    write_container(args.out / "test", x[test], y[test])
    print(f"fetch_digits: wrote {int((~test).sum())} train / {int(test.sum())} test items to {args.out}")


if __name__ == "__main__":
    main()
