#!/usr/bin/env python3
"""Writes data/wine.csv from the UCI Wine table.

Downloads the original file; falls back to the copy bundled with
scikit-learn when offline.
"""

import csv
import io
import pathlib
import sys
import urllib.request

URL = "https://archive.ics.uci.edu/ml/machine-learning-databases/wine/wine.data"
COLUMNS = [
    "alcohol",
    "malic_acid",
    "ash",
    "alcalinity_of_ash",
    "magnesium",
    "total_phenols",
    "flavanoids",
    "nonflavanoid_phenols",
    "proanthocyanins",
    "color_intensity",
    "hue",
    "od280_od315",
    "proline",
]


def from_uci():
    with urllib.request.urlopen(URL, timeout=30) as resp:
        text = resp.read().decode("ascii")
    rows = []
    for rec in csv.reader(io.StringIO(text)):
        if rec:
            rows.append(rec[1:] + [rec[0]])
    return rows


def from_sklearn():
    from sklearn.datasets import load_wine

    bunch = load_wine()
    return [
        [repr(float(v)) if not float(v).is_integer() else str(int(v)) for v in x] + [str(int(y) + 1)]
        for x, y in zip(bunch.data, bunch.target)
    ]


def main():
    out = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else "data/wine.csv")
    try:
        rows = from_uci()
    except OSError as e:
        print(f"download failed ({e}); using scikit-learn copy", file=sys.stderr)
        rows = from_sklearn()
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(COLUMNS + ["class"])
        w.writerows(rows)
    print(f"wrote {out} ({len(rows)} rows)")


if __name__ == "__main__":
    main()
