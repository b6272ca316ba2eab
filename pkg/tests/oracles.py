"""Scalar reference evaluations written loop-by-loop, independent of the vectorised code."""

import math


def sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def dot(a, b):
    s = 0.0
    for x, y in zip(a, b):
        s += x * y
    return s


def gated_attention(H, V, U, w):
    scores = []
    for h in H:
        s = 0.0
        for j in range(len(w)):
            s += w[j] * math.tanh(dot(V[j], h)) * sig(dot(U[j], h))
        scores.append(s)
    m = max(scores)
    e = [math.exp(s - m) for s in scores]
    z = sum(e)
    return [x / z for x in e]


def weighted_sum(H, a):
    out = [0.0] * len(H[0])
    for i, h in enumerate(H):
        for m in range(len(h)):
            out[m] += a[i] * h[m]
    return out


def bag_score(n, beta):
    return sig(dot(n, beta))


def pair_vector(he, hl):
    return [l - e for e, l in zip(he, hl)] + list(hl) + list(he)
