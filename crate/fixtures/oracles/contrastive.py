#!/usr/bin/env python3
"""Brute-force oracle for the contrastive loss.

Recomputes the normalized-temperature cross-entropy directly from its
definition: rows are L2-normalized, row i's positive is row i^1, the
denominator runs over every other row, and the loss is the mean over all
rows. Also evaluates the degenerate all-identical-rows case, whose loss is
exactly ln(rows - 1). Usage: python3 contrastive.py <fixtures_dir>.
"""
import json
import math
import os
import sys


def nt_xent(rows, tau):
    zn = []
    for r in rows:
        norm = math.sqrt(math.fsum(v * v for v in r))
        zn.append([v / norm for v in r])
    n = len(zn)
    sim = lambda a, b: math.fsum(x * y for x, y in zip(a, b))
    total = 0.0
    for i in range(n):
        j = i ^ 1
        denom = math.fsum(
            math.exp(sim(zn[i], zn[k]) / tau) for k in range(n) if k != i
        )
        total += -math.log(math.exp(sim(zn[i], zn[j]) / tau) / denom)
    return total / n


def main():
    root = sys.argv[1]
    man = json.load(open(os.path.join(root, "manifest.json")))
    out = {}
    for f in man["fixtures"]:
        op, p = f["operation"], f["params"]
        if op == "nt_xent_loss":
            z = json.load(open(os.path.join(root, f["inputs"][0])))
            out[f["id"]] = {"loss": nt_xent(z, p["temperature"])}
        elif op == "nt_xent_degenerate":
            out[f["id"]] = {"loss": math.log(p["rows"] - 1)}
    print(json.dumps(out))


if __name__ == "__main__":
    main()
