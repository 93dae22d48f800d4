#!/usr/bin/env python3
"""Independent property audits for the augmentation operators.

Checks the frozen expected values against their defining properties:
Gaussian noise of width 0.1 over 100k samples has a sample std within
[0.099, 0.101]; crop-and-resize applied to a linear ramp yields another
straight line spanning the kept value range; time warping a monotone ramp
preserves length and monotonicity. Usage: python3 augment.py <fixtures_dir>.
"""
import json
import os
import sys


def main():
    root = sys.argv[1]
    man = json.load(open(os.path.join(root, "manifest.json")))
    out = {}
    for f in man["fixtures"]:
        op, p, e = f["operation"], f["params"], f["expected"]
        if op == "noise_std":
            std = e["sample_std"]
            assert p["lo"] <= std <= p["hi"], f"sample std {std}"
            out[f["id"]] = {}
        elif op == "crop_resize_ramp":
            row = e["output"]
            t = p["t"]
            assert len(row) == t, f"length {len(row)}"
            keep = int(round(p["fraction"] * t))
            max_dd = max(
                abs(row[i + 2] - 2.0 * row[i + 1] + row[i]) for i in range(t - 2)
            )
            assert max_dd <= 1e-7, f"second difference {max_dd}"
            span = row[-1] - row[0]
            assert abs(span - (keep - 1)) <= 1e-6, f"value span {span}"
            assert -1e-9 <= row[0] and row[-1] <= t - 1 + 1e-9, "values escape ramp range"
            out[f["id"]] = {"max_second_diff": max_dd}
        elif op == "time_warp_ramp":
            row = e["output"]
            assert len(row) == p["t"], f"length {len(row)}"
            monotone = all(row[i + 1] >= row[i] - 1e-9 for i in range(len(row) - 1))
            assert monotone, "warped ramp is not monotone"
            out[f["id"]] = {"length": len(row), "monotone": monotone}
    print(json.dumps(out))


if __name__ == "__main__":
    main()
