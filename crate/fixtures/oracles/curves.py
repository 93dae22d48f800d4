#!/usr/bin/env python3
"""Audit of the frozen training curves.

Parses the frozen CSV loss curves (header epoch,train_loss,val_loss,lr),
re-extracts the first/last training losses, and enforces each run's
qualitative target: the self-supervised smoke run must end below its first
epoch, the supervised smoke run must drop to at most drop_factor times its
first epoch, and the learning-rate column must decay geometrically.
Usage: python3 curves.py <fixtures_dir>.
"""
import json
import os
import sys


def read_curve(path):
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        assert header == "epoch,train_loss,val_loss,lr", f"header {header!r}"
        for line in fh:
            cells = line.strip().split(",")
            rows.append([float(c) for c in cells])
    return rows


def check_lr_decay(rows):
    lrs = [r[3] for r in rows]
    for a, b in zip(lrs, lrs[1:]):
        ratio = b / a
        assert abs(ratio - lrs[1] / lrs[0]) <= 1e-9, "lr decay is not geometric"


def main():
    root = sys.argv[1]
    man = json.load(open(os.path.join(root, "manifest.json")))
    out = {}
    for f in man["fixtures"]:
        op, p = f["operation"], f["params"]
        if op not in ("pretrain_curve", "finetune_curve"):
            continue
        rows = read_curve(os.path.join(root, f["inputs"][0]))
        assert len(rows) == p["max_epochs"], f"{len(rows)} epochs in curve"
        first, last = rows[0][1], rows[-1][1]
        if op == "pretrain_curve":
            assert last < first, f"loss went {first} -> {last}"
        else:
            bound = p["drop_factor"] * first
            assert last <= bound, f"loss went {first} -> {last}, above {bound}"
        if len(rows) >= 3:
            check_lr_decay(rows)
        out[f["id"]] = {"first_train_loss": first, "last_train_loss": last}
    print(json.dumps(out))


if __name__ == "__main__":
    main()
