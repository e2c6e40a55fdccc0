"""Slow scalar-loop reference implementations of the pretraining losses.

These exist solely so tests can cross-check the vectorized versions against
an independent computation path: plain Python lists, explicit loops, no
numpy, no shared code with the production losses.
"""

from __future__ import annotations

import math

_EPS = 1e-12


def _normalize_row(row):
    norm = math.sqrt(sum(x * x for x in row))
    norm = max(norm, _EPS)
    return [x / norm for x in row]


def ref_nt_xent(z, tau):
    """z: list of 2N rows, rows 2k and 2k+1 sharing an origin."""
    rows = [_normalize_row(r) for r in z]
    n = len(rows)
    sims = [[sum(a * b for a, b in zip(rows[i], rows[j])) / tau for j in range(n)]
            for i in range(n)]
    total = 0.0
    for i in range(n):
        j = i ^ 1
        denom = sum(math.exp(sims[i][a]) for a in range(n) if a != i)
        total += -math.log(math.exp(sims[i][j]) / denom)
    return total


def ref_supcon(z, labels, tau):
    """labels are per origin (length N); both views of origin k share them."""
    rows = [_normalize_row(r) for r in z]
    n = len(rows)
    expanded = []
    for lab in labels:
        expanded.extend([lab, lab])
    sims = [[sum(a * b for a, b in zip(rows[i], rows[j])) / tau for j in range(n)]
            for i in range(n)]
    total = 0.0
    for i in range(n):
        positives = [p for p in range(n) if p != i and expanded[p] == expanded[i]]
        denom = sum(math.exp(sims[i][a]) for a in range(n) if a != i)
        inner = 0.0
        for p in positives:
            inner += math.log(math.exp(sims[i][p]) / denom)
        total += -inner / len(positives)
    return total


def _standardize_columns(z):
    n = len(z)
    d = len(z[0])
    out = [[0.0] * d for _ in range(n)]
    for col in range(d):
        column = [z[row][col] for row in range(n)]
        mu = sum(column) / n
        var = sum((x - mu) ** 2 for x in column) / n
        s = math.sqrt(var) + _EPS
        for row in range(n):
            out[row][col] = (column[row] - mu) / s
    return out


def ref_barlow_twins(z1, z2, lam):
    n = len(z1)
    d = len(z1[0])
    s1 = _standardize_columns(z1)
    s2 = _standardize_columns(z2)
    corr = [[sum(s1[b][i] * s2[b][j] for b in range(n)) / n for j in range(d)]
            for i in range(d)]
    on = sum((1.0 - corr[i][i]) ** 2 for i in range(d))
    off = sum(corr[i][j] ** 2 for i in range(d) for j in range(d) if i != j)
    return on + lam * off


def ref_sup_bt(z1, z2, labels, lam, bt_mode="full", sbt_scale="inv_d"):
    b = len(z1)
    d = len(z1[0])
    r1 = [_normalize_row(r) for r in z1]
    r2 = [_normalize_row(r) for r in z2]
    scale = 1.0 / d if sbt_scale == "inv_d" else 1.0
    sims = [[sum(a * c for a, c in zip(r1[k], r2[l])) * scale for l in range(b)]
            for k in range(b)]
    same = 0.0
    diff = 0.0
    for k in range(b):
        for l in range(b):
            if labels[k] == labels[l]:
                same += (1.0 - sims[k][l]) ** 2
            elif k != l:
                diff += (1.0 + sims[k][l]) ** 2
    if bt_mode == "on_diag_only":
        return same
    if bt_mode == "off_diag_only":
        return lam * diff
    return same + lam * diff
