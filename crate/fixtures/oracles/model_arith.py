#!/usr/bin/env python3
"""Independent arithmetic oracles for the encoder.

Recomputes, from the architecture definition alone: the per-stage lengths of
the four stride-2 convolutions; adaptive pooling over (channel, time) by
direct bin averaging; the classification-head and miniature-model parameter
counts by closed-form accounting; and the per-channel activation budget of
the convolutional front-end. Also audits the frozen channel-permutation and
finite-difference gradient-check results against their tolerance bounds.
Usage: python3 model_arith.py <fixtures_dir>.
"""
import json
import math
import os
import sys

# Miniature encoder dimensions (must track the tiny preset).
TINY = dict(f=16, d=64, ffn=256, blocks=2, k=8, groups=16, proj=32)
FULL = dict(f=256, d=768, ffn=3072, blocks=12, k=128, groups=16, proj=256)


def backbone_params(f, d, ffn, blocks, k, groups, proj):
    conv = f * 1 * 2 + 3 * (f * f * 2)  # four bias-free kernel-2 stages
    group_norm = 2 * f
    pre_pool_norm = 2 * f
    embed = d * f + d
    pos_conv = d * (d // groups) * k + k + d  # direction + per-tap gain + bias
    pos_norm = 2 * d
    per_block = (
        4 * (d * d + d)  # q, k, v, out projections with bias
        + 2 * d  # attention layer norm
        + (ffn * d + ffn)  # ffn up
        + (d * ffn + d)  # ffn down
        + 2 * d  # ffn layer norm
    )
    backbone = conv + group_norm + pre_pool_norm + embed + pos_conv + pos_norm
    backbone += blocks * per_block
    projection = proj * d + proj + 2 * proj  # linear + batch-norm affine
    return backbone, projection


def adaptive_pool(channels, out_len):
    # channels: F x C x T nested lists; bin l covers
    # [floor(l*T/L), ceil((l+1)*T/L)) and the channel axis is averaged away.
    f = len(channels)
    c = len(channels[0])
    t = len(channels[0][0])
    rows = []
    for fi in range(f):
        row = []
        for l in range(out_len):
            s = l * t // out_len
            e = -((-(l + 1) * t) // out_len)  # ceil division
            vals = [channels[fi][ci][j] for ci in range(c) for j in range(s, e)]
            row.append(math.fsum(vals) / len(vals))
        rows.append(row)
    return rows


def main():
    root = sys.argv[1]
    man = json.load(open(os.path.join(root, "manifest.json")))
    out = {}
    for f in man["fixtures"]:
        op, p, e = f["operation"], f["params"], f["expected"]
        if op == "conv_stage_lengths":
            t = p["t"]
            lengths = []
            for _ in range(4):
                t //= 2
                lengths.append(t)
            out[f["id"]] = {"lengths": lengths}
        elif op == "adaptive_pool_small":
            channels = json.load(open(os.path.join(root, f["inputs"][0])))
            out[f["id"]] = {"output": adaptive_pool(channels, p["out_len"])}
        elif op == "head_param_count":
            d = FULL["d"]
            out[f["id"]] = {"params": p["classes"] * d + p["classes"]}
        elif op == "tiny_param_count":
            backbone, projection = backbone_params(**TINY)
            out[f["id"]] = {
                "backbone": backbone,
                "projection_head": projection,
                "total": backbone + projection,
            }
        elif op == "gradient_check":
            err = e["max_rel_err"]
            assert err <= 1e-3, f"gradient check error {err}"
            assert e["n_sampled"] >= p["min_samples"], "too few coordinates"
            out[f["id"]] = {}
        elif op == "channel_permutation":
            diff = e["max_abs_diff"]
            assert diff <= 1e-5, f"permutation moved outputs by {diff}"
            out[f["id"]] = {}
        elif op == "activation_budget":
            t = p["t"]
            lengths = []
            for _ in range(4):
                t //= 2
                lengths.append(t)
            f_ch = FULL["f"]
            # Stage 1 output is counted twice: once raw, once after its
            # normalization + activation (the only stage with that pair).
            per_channel = f_ch * (lengths[0] * 2 + lengths[1] + lengths[2] + lengths[3])
            full = p["full_channels"] * p["batch"] * per_channel
            out[f["id"]] = {
                "per_channel_conv_elements": p["batch"] * per_channel,
                "conv_elements_full": full,
                "ratio": p["full_channels"],
                "transformer_invariant": True,
            }
    print(json.dumps(out))


if __name__ == "__main__":
    main()
