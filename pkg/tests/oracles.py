"""Independent straight-line reference implementations used as test oracles."""

import itertools
import math

import numpy as np


def scalar_infonce(pred, target, tau, symmetric):
    """Loop-by-loop InfoNCE over python floats."""
    B = len(pred)

    def cos(u, v):
        dot = sum(a * b for a, b in zip(u, v))
        return dot / (math.sqrt(sum(a * a for a in u)) * math.sqrt(sum(b * b for b in v)))

    s = [[cos(pred[i], target[j]) / tau for j in range(B)] for i in range(B)]

    def lse(vals):
        m = max(vals)
        return m + math.log(sum(math.exp(v - m) for v in vals))

    rows = sum(lse(s[i]) - s[i][i] for i in range(B)) / B
    if not symmetric:
        return rows
    cols = sum(lse([s[j][i] for j in range(B)]) - s[i][i] for i in range(B)) / B
    return 0.5 * (rows + cols)


def subset_oracle(weights, K):
    """Best K-subset by total weight; ties go to the lexicographically smallest."""
    best, best_sum = None, -1.0
    for subset in itertools.combinations(range(len(weights)), K):
        s = math.fsum(weights[i] for i in subset)
        if s > best_sum + 1e-12:
            best, best_sum = subset, s
    return best


def confusion_oracle(pred, true, C):
    """Accuracy and macro metrics from an explicit confusion matrix."""
    conf = [[0] * C for _ in range(C)]
    for p, t in zip(pred, true):
        conf[t][p] += 1
    present = [c for c in range(C) if any(conf[c]) or any(conf[r][c] for r in range(C))]
    precs, recs, f1s = [], [], []
    for c in present:
        tp = conf[c][c]
        col = sum(conf[r][c] for r in range(C))
        row = sum(conf[c])
        p = tp / col if col else 0.0
        r = tp / row if row else 0.0
        precs.append(p)
        recs.append(r)
        f1s.append(2 * p * r / (p + r) if p + r else 0.0)
    return {"accuracy": sum(conf[c][c] for c in range(C)) / len(pred),
            "precision": float(np.mean(precs)), "recall": float(np.mean(recs)),
            "f1": float(np.mean(f1s))}
