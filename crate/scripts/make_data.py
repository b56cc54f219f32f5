#!/usr/bin/env python3
"""Writes the synthetic landmark files in data/ (deterministic)."""

import json
import math
import random
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "data"


def ring(n, rx, ry=None, phase=0.0, bump=0.0, lobes=3):
    ry = rx if ry is None else ry
    pts = []
    for i in range(n):
        t = 2 * math.pi * i / n + phase
        s = 1 + bump * math.cos(lobes * t)
        pts.append([round(rx * s * math.cos(t), 12), round(ry * s * math.sin(t), 12)])
    return pts


def write(name, sets):
    n = len(next(iter(sets.values())))
    doc = {"version": 1, "d": 2, "N": n, "sets": sets}
    (OUT / name).write_text(json.dumps(doc, indent=1) + "\n")


def main():
    OUT.mkdir(exist_ok=True)
    write("circles.json", {"reference": ring(20, 1.0), "target": ring(20, 2.0)})
    write("ellipse_pair.json", {"reference": ring(12, 1.0), "target": ring(12, 1.3, 0.8, bump=0.1)})
    bean = ring(12, 1.0, 0.7, bump=0.15, lobes=1)
    write("mirrored.json", {"reference": bean, "target": [[-x, y] for x, y in bean]})
    rng = random.Random(2024)
    base = ring(12, 1.0, 0.7)
    ensemble = {}
    for j in range(16):
        ensemble[f"s{j:02d}"] = [[round(x + rng.gauss(0, 0.05), 12), round(y + rng.gauss(0, 0.05), 12)] for x, y in base]
    write("ensemble.json", ensemble)


if __name__ == "__main__":
    main()
