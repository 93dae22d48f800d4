#!/usr/bin/env python3
"""Independent beat-interval oracle.

Reads the frozen lead-I traces of one normal and one fast-rhythm synthetic
record, counts prominent peaks (local maxima above half the global max with
a 0.25 s refractory gap), and reports the mean beat interval of each plus
their ratio. The ratio must sit within 0.05 of the reciprocal rate factor.
Usage: python3 beats.py <fixtures_dir>; prints JSON on stdout.
"""
import json
import os
import sys


def mean_peak_interval(x, fs):
    mx = max(x)
    thr = 0.5 * mx
    min_gap = int(0.25 * fs + 0.5)
    peaks = []
    for i in range(1, len(x) - 1):
        if x[i] >= thr and x[i] >= x[i - 1] and x[i] > x[i + 1]:
            if not peaks or i - peaks[-1] >= min_gap:
                peaks.append(i)
    if len(peaks) < 2:
        return None
    return (peaks[-1] - peaks[0]) / ((len(peaks) - 1) * fs)


def main():
    root = sys.argv[1]
    man = json.load(open(os.path.join(root, "manifest.json")))
    out = {}
    for f in man["fixtures"]:
        if f["operation"] != "synth_beat_rate":
            continue
        p = f["params"]
        normal = json.load(open(os.path.join(root, f["inputs"][0])))
        tachy = json.load(open(os.path.join(root, f["inputs"][1])))
        base = mean_peak_interval(normal, p["fs"])
        fast = mean_peak_interval(tachy, p["fs"])
        assert base is not None and fast is not None, "too few peaks"
        ratio = fast / base
        target = 1.0 / p["factor"]
        assert abs(ratio - target) <= 0.05, (
            f"interval ratio {ratio} not within 0.05 of {target}"
        )
        out[f["id"]] = {
            "normal_interval_s": base,
            "tachy_interval_s": fast,
            "interval_ratio": ratio,
        }
    print(json.dumps(out))


if __name__ == "__main__":
    main()
