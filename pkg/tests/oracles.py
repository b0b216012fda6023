"""Independent brute-force references: plain Python loops, no numpy kernels."""

import math


def dist(a, b):
    dx = float(a[0]) - float(b[0])
    dy = float(a[1]) - float(b[1])
    dz = float(a[2]) - float(b[2])
    return math.sqrt(dx * dx + dy * dy + dz * dz)


def nearest_dist(q, pts):
    return min(dist(q, p) for p in pts)


def knn(pts, q, k):
    ranked = sorted(((dist(q, p), i) for i, p in enumerate(pts)))
    return [(i, d) for d, i in ranked[:k]]


def fps(pts, count, start):
    n = len(pts)
    sel = [start]
    for _ in range(min(count, n) - 1):
        best, best_d = None, -1.0
        for i in range(n):
            if i in sel:
                continue
            d = min(dist(pts[i], pts[j]) for j in sel)
            if d > best_d:
                best, best_d = i, d
        sel.append(best)
    return sel


def buffered_difference(G, X, d_y):
    if not len(X):
        return list(range(len(G)))
    keep = []
    for i, g in enumerate(G):
        d = nearest_dist(g, X)
        if d >= d_y and d > 0:
            keep.append(i)
    return keep


def chamfer(P, G):
    a = sum(nearest_dist(p, G) for p in P) / len(P)
    b = sum(nearest_dist(g, P) for g in G) / len(G)
    return a + b


def cd_pt(P, G):
    return sum(nearest_dist(p, G) for p in P) / len(P)


def histogram(G, P, edges):
    counts = [0] * (len(edges) + 1)
    for g in G:
        d = nearest_dist(g, P)
        b = len(edges)
        for j, e in enumerate(edges):
            if d < e:
                b = j
                break
        counts[b] += 1
    return [100.0 * c / len(G) for c in counts]


def rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)
