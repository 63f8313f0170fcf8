"""Slow, obviously-correct reference implementations used only by the tests.

Nothing here imports the package's fast paths.
"""

import itertools
import math

import numpy as np


def conv2d_loops(x, k, b):
    B, H, W, C = x.shape
    O = k.shape[3]
    out = np.zeros((B, H, W, O))
    for n, i, j, o in itertools.product(range(B), range(H), range(W), range(O)):
        acc = b[o]
        for c, di, dj in itertools.product(range(C), range(3), range(3)):
            ii, jj = i + di - 1, j + dj - 1
            if 0 <= ii < H and 0 <= jj < W:
                acc += x[n, ii, jj, c] * k[c, di, dj, o]
        out[n, i, j, o] = acc
    return out


def maxpool_loops(x):
    B, H, W, C = x.shape
    out = np.zeros((B, H // 2, W // 2, C))
    for n, i, j, c in itertools.product(range(B), range(H // 2), range(W // 2), range(C)):
        out[n, i, j, c] = max(x[n, 2 * i + a, 2 * j + d, c] for a in range(2) for d in range(2))
    return out


def matmul_loops(x, w, b):
    B, D = x.shape
    M = w.shape[1]
    out = np.zeros((B, M))
    for i in range(B):
        for j in range(M):
            out[i, j] = b[j] + sum(x[i, d] * w[d, j] for d in range(D))
    return out


def spatial_mean_loops(x):
    B, H, W, C = x.shape
    out = np.zeros((B, C))
    for n in range(B):
        for c in range(C):
            out[n, c] = sum(x[n, i, j, c] for i in range(H) for j in range(W)) / (H * W)
    return out


def central_difference(f, arr, index, h=1e-5):
    """d f / d arr[index] by central differences, restoring arr afterwards."""
    old = arr[index]
    arr[index] = old + h
    fp = f()
    arr[index] = old - h
    fm = f()
    arr[index] = old
    return (fp - fm) / (2 * h)


def rel_error(a, n, floor=1e-6):
    return abs(a - n) / max(abs(a), abs(n), floor)


def brute_rank(scores, label, higher_is_better=True):
    """Position of ``label`` after a full sort; ties keep index order."""
    keyed = sorted(range(len(scores)),
                   key=lambda i: (-scores[i] if higher_is_better else scores[i], i))
    return keyed.index(label)


def brute_average_precision(query, feats, labels):
    others = [i for i in range(len(labels)) if i != query]
    dists = [(math.dist(feats[query], feats[i]), i) for i in others]
    dists.sort()
    hits = 0
    precisions = []
    for pos, (_, i) in enumerate(dists, start=1):
        if labels[i] == labels[query]:
            hits += 1
            precisions.append(hits / pos)
    return sum(precisions) / hits if hits else None
