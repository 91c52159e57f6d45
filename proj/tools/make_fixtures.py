#!/usr/bin/env python3
"""Regenerates the small synthetic test fixtures under tests/fixtures.

communities_sample.csv mimics the normalized Communities and Crime layout:
128 columns, five identifier columns first, values in [0, 1], '?' for
missing cells, the target last. The IDX pair holds 28x28 digit-like images.
Output is byte-for-byte deterministic.
"""

import random
import struct
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def communities(rows=40, seed=7):
    rng = random.Random(seed)
    predictors = 122
    # Columns 3, 17 and 60 have gaps; column 99 is missing in most rows.
    gappy = {3: 0.2, 17: 0.1, 60: 0.3, 99: 0.85}
    weights = [rng.uniform(-0.2, 0.2) for _ in range(predictors)]
    lines = []
    for r in range(rows):
        ids = [str(rng.randint(1, 56)), "?", "?", f"Town{r}city", str(r % 10 + 1)]
        xs = [rng.random() for _ in range(predictors)]
        y = 0.3 + sum(w * x for w, x in zip(weights, xs)) / 4.0 + rng.uniform(-0.02, 0.02)
        y = min(max(y, 0.0), 1.0)
        cells = []
        for c, x in enumerate(xs):
            if c in gappy and rng.random() < gappy[c] and not (c == 99 and r < 6):
                cells.append("?")
            else:
                cells.append(f"{x:.2f}")
        lines.append(",".join(ids + cells + [f"{y:.2f}"]))
    (OUT / "communities_sample.csv").write_text("\n".join(lines) + "\n")


def digits(count=60, seed=11):
    rng = random.Random(seed)
    images = bytearray()
    labels = bytearray()
    for i in range(count):
        label = i % 10
        img = [0] * (28 * 28)
        # A bright vertical bar whose column encodes the label, plus noise.
        col = 4 + 2 * label
        for r in range(6, 22):
            img[r * 28 + col] = 200 + rng.randint(0, 55)
            img[r * 28 + col + 1] = 120 + rng.randint(0, 80)
        for _ in range(20):
            img[rng.randrange(28 * 28)] = rng.randint(1, 90)
        images.extend(img)
        labels.append(label)
    (OUT / "digits-images-idx3-ubyte").write_bytes(struct.pack(">IIII", 2051, count, 28, 28) + images)
    (OUT / "digits-labels-idx1-ubyte").write_bytes(struct.pack(">II", 2049, count) + labels)


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    communities()
    digits()
