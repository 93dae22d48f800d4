#!/usr/bin/env python3
"""Independent oracle for the weighted multi-label score and its summary.

Recomputes the hand-sized scoring case from first principles (weighted
confusion shares normalized between the always-normal and perfect anchors)
and the mean/sample-std aggregation via the statistics module.
Usage: python3 scoring.py <fixtures_dir>.
"""
import json
import os
import statistics
import sys


def weighted_sum(truths, preds, classes, weights, normal):
    total = 0.0
    for g_set, p_set in zip(truths, preds):
        g = set(g_set) or {normal}
        p = set(p_set) or {normal}
        share = 1.0 / len(g | p)
        for gi in g:
            for pi in p:
                total += weights[classes.index(gi)][classes.index(pi)] * share
    return total


def hand_case_score():
    classes = ["A", "B", "N"]
    normal = "N"
    weights = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    truths = [{"A"}, {"B"}]
    preds = [{"A"}, {"A"}]
    observed = weighted_sum(truths, preds, classes, weights, normal)
    inactive = weighted_sum(truths, [set()] * len(truths), classes, weights, normal)
    perfect = weighted_sum(truths, truths, classes, weights, normal)
    return (observed - inactive) / (perfect - inactive)


def main():
    root = sys.argv[1]
    man = json.load(open(os.path.join(root, "manifest.json")))
    out = {}
    for f in man["fixtures"]:
        op, p = f["operation"], f["params"]
        if op == "score_hand_case":
            out[f["id"]] = {"score": hand_case_score()}
        elif op == "score_aggregate":
            scores = p["scores"]
            out[f["id"]] = {
                "mean": statistics.fmean(scores),
                "std": statistics.stdev(scores),
            }
    print(json.dumps(out))


if __name__ == "__main__":
    main()
