#!/usr/bin/env python3
"""Writes the constructed non-monotonic target release curves.

The curve has a slow onset, a rapid rise to a peak and a sharp decay. It is a
hand-built shape, not measured data.
"""
import argparse
import math
import pathlib

BASE, PEAK, TAIL = 1.0e-5, 2.5e-5, 2.0e-6


def mdot(s):
    if s < 0.35:
        return -BASE
    if s < 0.55:
        u = (s - 0.35) / 0.2
        return -(BASE + (PEAK - BASE) * math.sin(0.5 * math.pi * u))
    u = (s - 0.55) / 0.45
    return -(TAIL + (PEAK - TAIL) * math.exp(-6.0 * u))


def write(path, dt, n_steps):
    with open(path, "w") as f:
        f.write("t,mdot\n")
        for n in range(1, n_steps + 1):
            f.write(f"{n * dt:.17g},{mdot(n / n_steps):.17g}\n")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parent.parent / "configs" / "targets"))
    ap.add_argument("--dt", type=float, default=500.0)
    args = ap.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for n in (40, 100):
        write(out / f"nonmonotonic_{n}.csv", args.dt, n)


if __name__ == "__main__":
    main()
