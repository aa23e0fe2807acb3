"""Independent brute-force oracles used by the test suite.

These deliberately share no code with the package: plain Python loops and
math.* so that agreement with the library is evidence, not tautology.
"""

import math

import numpy as np


def bf_fsis(v_img, v_sym, form="per_sample"):
    b = len(v_img)
    cosines = []
    for i in range(b):
        dot = 0.0
        for a, c in zip(v_img[i], v_sym[i]):
            dot += float(a) * float(c)
        cosines.append(dot)
    if form == "per_sample":
        return sum(1.0 - 0.5 * (c + 1.0) for c in cosines) / b
    return (1.0 - sum(0.5 * (c + 1.0) for c in cosines)) / b


def bf_softmax_row(row):
    m = max(float(x) for x in row)
    exps = [math.exp(float(x) - m) for x in row]
    s = sum(exps)
    return [e / s for e in exps]


def bf_ce_row(logits_row, target):
    probs = bf_softmax_row(logits_row)
    return -math.log(probs[int(target)])


def bf_mean_ce(logits, targets):
    n = len(targets)
    return sum(bf_ce_row(logits[i], targets[i]) for i in range(n)) / n


def bf_soft_ce_row(logits_row, target_row):
    probs = bf_softmax_row(logits_row)
    return -sum(float(y) * math.log(p) for y, p in zip(target_row, probs))


def bf_its(g_i2t, g_t2i, y_i2t, y_t2i):
    """0.5 * mean over queries of the two soft cross-entropies on given distributions."""
    b = len(g_i2t)
    tot_i2t = sum(
        -sum(float(y) * math.log(float(g)) for y, g in zip(y_i2t[i], g_i2t[i])) for i in range(b)
    )
    tot_t2i = sum(
        -sum(float(y) * math.log(float(g)) for y, g in zip(y_t2i[i], g_t2i[i])) for i in range(b)
    )
    return 0.5 * (tot_i2t / b + tot_t2i / b)


def bf_soft_targets(positives, momentum, alpha):
    b = len(positives)
    m = len(momentum[0])
    out = []
    for i in range(b):
        row = [(1.0 - alpha) * (1.0 if k == positives[i] else 0.0) + alpha * float(momentum[i][k])
               for k in range(m)]
        out.append(row)
    return out


def bf_recall_at_k(sims, positives, k):
    """Rank = strictly-greater count + earlier-index ties; hit if rank < k."""
    hits = 0
    for q in range(len(positives)):
        pos = int(positives[q])
        pv = float(sims[q][pos])
        rank = 0
        for c in range(len(sims[q])):
            v = float(sims[q][c])
            if v > pv or (v == pv and c < pos):
                rank += 1
        if rank < k:
            hits += 1
    return hits / len(positives)


def bf_macro_f1(preds, golds):
    classes = sorted(set(int(p) for p in preds) | set(int(g) for g in golds))
    f1s = []
    for c in classes:
        tp = sum(1 for p, g in zip(preds, golds) if p == c and g == c)
        fp = sum(1 for p, g in zip(preds, golds) if p == c and g != c)
        fn = sum(1 for p, g in zip(preds, golds) if p != c and g == c)
        f1s.append(0.0 if 2 * tp + fp + fn == 0 else 2.0 * tp / (2 * tp + fp + fn))
    return sum(f1s) / len(f1s) if f1s else 0.0


def central_diff_grad(f, arr, h=1e-4):
    """Central-difference gradient of scalar f() w.r.t. every entry of arr (mutated in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def grad_close(analytic, numeric, rtol=1e-3, atol=1e-6):
    """Mixed-tolerance agreement: |a - n| <= atol + rtol * max(|a|, |n|) everywhere."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return bool(np.all(np.abs(a - n) <= atol + rtol * np.maximum(np.abs(a), np.abs(n))))


def binomial_ci_99(n, p=0.5):
    """Normal-approximation 99% interval for a Binomial(n, p) proportion."""
    half = 2.5758293035489004 * math.sqrt(p * (1.0 - p) / n)
    return p - half, p + half
