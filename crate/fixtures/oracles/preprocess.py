#!/usr/bin/env python3
"""Independent oracles for the signal-preparation stages.

Covers: linear resampling of a ramp (closed-form interpolation with
endpoint hold), per-channel mean removal, the analytic magnitude of the
band-pass filter (prewarped analog Butterworth closed form evaluated through
the bilinear transform), and amplitude/shape preservation of a mid-band sine
through the full pipeline. Usage: python3 preprocess.py <fixtures_dir>.
"""
import json
import math
import os
import sys


def resample_linear(row, fs_in, fs_out):
    t = len(row)
    n_out = int(round(t * fs_out / fs_in))
    out = []
    for j in range(n_out):
        u = j * fs_in / fs_out
        i0 = int(math.floor(u))
        if i0 >= t - 1:
            out.append(row[t - 1])
            continue
        frac = u - i0
        out.append(row[i0] * (1.0 - frac) + row[i0 + 1] * frac)
    return out


def butterworth_bandpass_magnitude(freq, order, low, high, fs):
    # Bilinear transform with prewarping maps the digital filter's response
    # at f onto the analog prototype's response at w = 2 fs tan(pi f / fs),
    # so the closed-form analog Butterworth band-pass magnitude applies
    # exactly.
    warp = lambda f_hz: 2.0 * fs * math.tan(math.pi * f_hz / fs)
    w = warp(freq)
    w1, w2 = warp(low), warp(high)
    w0sq = w1 * w2
    bw = w2 - w1
    x = (w * w - w0sq) / (bw * w)
    return 1.0 / math.sqrt(1.0 + x ** (2 * order))


def pipeline_checks(frozen, p):
    fs, freq = p["fs"], p["freq_hz"]
    wi = p["window_index"]
    win_len = len(frozen)
    skip = 500
    out = frozen[skip:]
    raw = [
        math.sin(2.0 * math.pi * freq * (wi * win_len + skip + i) / fs)
        for i in range(win_len - skip)
    ]
    rms = lambda v: math.sqrt(sum(x * x for x in v) / len(v))
    rms_ratio = rms(out) / rms(raw)
    n = len(out) - 20
    best_corr = -1e300
    for lag in range(20):
        dot = sum(out[i + lag] * raw[i] for i in range(n))
        no = sum(out[i + lag] * out[i + lag] for i in range(n))
        nr = sum(raw[i] * raw[i] for i in range(n))
        best_corr = max(best_corr, dot / math.sqrt(no * nr))
    assert abs(rms_ratio - 1.0) <= 0.10, f"RMS ratio {rms_ratio}"
    assert best_corr >= 0.99, f"best-lag correlation {best_corr}"
    return {"rms_ratio": rms_ratio, "best_corr": best_corr}


def main():
    root = sys.argv[1]
    man = json.load(open(os.path.join(root, "manifest.json")))
    out = {}
    for f in man["fixtures"]:
        op, p = f["operation"], f["params"]
        if op == "resample_linear_ramp":
            rows = [resample_linear(r, p["fs_in"], p["fs_out"]) for r in p["input"]]
            out[f["id"]] = {"output": rows}
        elif op == "remove_mean":
            rows = json.load(open(os.path.join(root, f["inputs"][0])))
            centered = []
            for r in rows:
                m = math.fsum(r) / len(r)
                centered.append([v - m for v in r])
            max_mean = max(abs(math.fsum(r) / len(r)) for r in centered)
            assert max_mean <= 1e-9, f"residual mean {max_mean}"
            out[f["id"]] = {"output": centered, "max_abs_row_mean": max_mean}
        elif op == "bandpass_gain":
            mag = butterworth_bandpass_magnitude(
                p["freq_hz"], p["order"], p["low_hz"], p["high_hz"], p["fs"]
            )
            measured = f["expected"]["measured_gain"]
            if "max_db_error" in p:
                db = abs(20.0 * math.log10(measured / mag))
                assert db <= p["max_db_error"], f"{db} dB off analytic"
            if "min_gain" in p:
                assert measured >= p["min_gain"], f"gain {measured}"
            out[f["id"]] = {"magnitude": mag}
        elif op == "pipeline_sine":
            frozen = json.load(open(os.path.join(root, f["inputs"][0])))
            out[f["id"]] = pipeline_checks(frozen, p)
    print(json.dumps(out))


if __name__ == "__main__":
    main()
