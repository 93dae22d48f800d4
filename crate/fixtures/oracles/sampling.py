#!/usr/bin/env python3
"""Statistical audits of the frozen sampler draws.

The uniform window sampler's 100k-draw frequencies must each sit within
0.005 of 1/n and sum to one; the class-balanced sampler must draw a
1-window class against a 99-window class at 0.5 ± 0.02. The frequencies are
frozen from a seeded run; this script re-derives the summary statistics and
enforces the bounds. Usage: python3 sampling.py <fixtures_dir>.
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
        op, p, e = f["operation"], f["params"], f["expected"]
        if op == "uniform_sampler":
            freqs = e["freqs"]
            assert len(freqs) == p["n_windows"], "frequency vector length"
            total = math.fsum(freqs)
            assert abs(total - 1.0) <= 1e-9, f"frequencies sum to {total}"
            uniform = 1.0 / p["n_windows"]
            max_dev = max(abs(x - uniform) for x in freqs)
            assert max_dev <= p["bound"], f"deviation {max_dev}"
            out[f["id"]] = {"max_dev": max_dev}
        elif op == "balanced_draws":
            freq = e["rare_freq"]
            assert abs(freq - 0.5) <= p["bound"], f"rare-class frequency {freq}"
            out[f["id"]] = {}
    print(json.dumps(out))


if __name__ == "__main__":
    main()
