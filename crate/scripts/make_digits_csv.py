"""Writes the 8x8 handwritten-digits set as data/digits.csv.

Pixel intensities 0..16 are scaled to [0, 1]; the header is f0..f63,label.
"""

import csv
import pathlib

from sklearn.datasets import load_digits


def main() -> None:
    digits = load_digits()
    out = pathlib.Path(__file__).resolve().parent.parent / "data" / "digits.csv"
    out.parent.mkdir(exist_ok=True)
    with out.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"f{j}" for j in range(digits.data.shape[1])] + ["label"])
        for row, label in zip(digits.data, digits.target):
            w.writerow([repr(float(v) / 16.0) for v in row] + [int(label)])
    print(f"{len(digits.target)} rows -> {out}")


if __name__ == "__main__":
    main()
