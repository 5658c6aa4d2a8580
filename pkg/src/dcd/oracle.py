"""Naive per-pair loop references for every loss term.

Everything here is deliberately slow and scalar: explicit loops over
instances, classes and feature dimensions using plain Python floats.
Property tests compare the vectorized losses against these functions;
the two sides share no arithmetic code.  Complexity is O(N^2 * D) or
worse, so callers keep N small (<= 16).
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass
class OracleResult:
    value: float
    per_instance: list[float]


def _mean(values: list[float]) -> OracleResult:
    total = 0.0
    for v in values:
        total += v
    return OracleResult(total / len(values), values)


def _cosine(u, v) -> float:
    dot = 0.0
    nu = 0.0
    nv = 0.0
    for k in range(len(u)):
        uk = float(u[k])
        vk = float(v[k])
        dot += uk * vk
        nu += uk * uk
        nv += vk * vk
    return dot / (math.sqrt(nu) * math.sqrt(nv))


def oracle_similarity(zs, zt, tau: float, b: float, anchor: str = "student") -> list[list[float]]:
    """Pairwise logit matrix cos(anchor_i, other_j) * exp(tau) + b."""
    n = len(zs)
    out = []
    for i in range(n):
        row = []
        for j in range(n):
            if anchor == "student":
                c = _cosine(zs[i], zt[j])
            else:
                c = _cosine(zt[i], zs[j])
            row.append(c * math.exp(tau) + b)
        out.append(row)
    return out


def _row_log_softmax(row: list[float]) -> list[float]:
    m = row[0]
    for v in row[1:]:
        if v > m:
            m = v
    total = 0.0
    for v in row:
        total += math.exp(v - m)
    lse = m + math.log(total)
    return [v - lse for v in row]


def oracle_student_distribution(zs, zt, tau: float, b: float) -> list[list[float]]:
    logits = oracle_similarity(zs, zt, tau, b, anchor="student")
    return [[math.exp(v) for v in _row_log_softmax(row)] for row in logits]


def oracle_teacher_distribution(zs, zt, tau: float, b: float) -> list[list[float]]:
    logits = oracle_similarity(zs, zt, tau, b, anchor="teacher")
    return [[math.exp(v) for v in _row_log_softmax(row)] for row in logits]


def oracle_contrastive(zs, zt, tau: float, b: float) -> OracleResult:
    """Mean over i of -log softmax(logits_i)[i] with student anchors."""
    logits = oracle_similarity(zs, zt, tau, b, anchor="student")
    per = [-_row_log_softmax(row)[i] for i, row in enumerate(logits)]
    return _mean(per)


def oracle_consistency(zs, zt, tau: float, b: float) -> OracleResult:
    """Mean over i of KL(p_i_student || p_i_teacher)."""
    ls = [_row_log_softmax(r) for r in oracle_similarity(zs, zt, tau, b, "student")]
    lt = [_row_log_softmax(r) for r in oracle_similarity(zs, zt, tau, b, "teacher")]
    n = len(zs)
    per = []
    for i in range(n):
        kl = 0.0
        for j in range(n):
            kl += math.exp(ls[i][j]) * (ls[i][j] - lt[i][j])
        per.append(kl)
    return _mean(per)


def oracle_kd_kl(student_logits, teacher_logits, temperature: float) -> OracleResult:
    """T^2-scaled mean KL between T-softened teacher and student rows."""
    n = len(student_logits)
    t = float(temperature)
    per = []
    for i in range(n):
        srow = [float(v) / t for v in student_logits[i]]
        trow = [float(v) / t for v in teacher_logits[i]]
        ls = _row_log_softmax(srow)
        lt = _row_log_softmax(trow)
        kl = 0.0
        for j in range(len(srow)):
            kl += math.exp(lt[j]) * (lt[j] - ls[j])
        per.append(t * t * kl)
    return _mean(per)


def oracle_cross_entropy(logits, labels) -> OracleResult:
    per = []
    for i in range(len(logits)):
        row = [float(v) for v in logits[i]]
        per.append(-_row_log_softmax(row)[int(labels[i])])
    return _mean(per)
