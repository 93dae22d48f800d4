#!/usr/bin/env python3
"""Brute-force binary cross-entropy oracle.

Recomputes the mean binary cross-entropy directly from its definition,
element by element over the frozen probability and target matrices, with
probabilities clamped to [1e-7, 1 - 1e-7] exactly as the implementation
documents. Usage: python3 losses.py <fixtures_dir>.
"""
import json
import math
import os
import sys


def main():
    root = sys.argv[1]
    man = json.load(open(os.path.join(root, "manifest.json")))
    out = {}
    for f in man["fixtures"]:
        if f["operation"] != "bce_mean":
            continue
        probs = json.load(open(os.path.join(root, f["inputs"][0])))
        targets = json.load(open(os.path.join(root, f["inputs"][1])))
        terms = []
        for prow, trow in zip(probs, targets):
            for p, t in zip(prow, trow):
                p = min(max(p, 1e-7), 1.0 - 1e-7)
                terms.append(-(t * math.log(p) + (1.0 - t) * math.log(1.0 - p)))
        out[f["id"]] = {"loss": math.fsum(terms) / len(terms)}
    print(json.dumps(out))


if __name__ == "__main__":
    main()
