"""Independent brute-force oracles.

Everything here is written as plain Python loops over float accumulators,
deliberately sharing no code path with the package's vectorised kernels.
"""

from __future__ import annotations

import math


def alpha_oracle(v_inv, v_edit, eps=1e-12):
    """Per-(head, token) projection coefficients via explicit loops."""
    heads, tokens, dim = len(v_inv), len(v_inv[0]), len(v_inv[0][0])
    out = [[0.0] * tokens for _ in range(heads)]
    for h in range(heads):
        for i in range(tokens):
            num = 0.0
            den = 0.0
            for c in range(dim):
                num += float(v_inv[h][i][c]) * float(v_edit[h][i][c])
                den += float(v_edit[h][i][c]) * float(v_edit[h][i][c])
            out[h][i] = 1.0 if den <= eps else num / den
    return out


def mask_oracle(alpha, text_tokens):
    return [
        [1.0 if i < text_tokens else alpha[h][i] for i in range(len(alpha[h]))]
        for h in range(len(alpha))
    ]


def project_oracle(v_inv, v_edit, text_tokens, mask):
    alpha = alpha_oracle(v_inv, v_edit)
    if mask:
        alpha = mask_oracle(alpha, text_tokens)
    heads, tokens, dim = len(v_edit), len(v_edit[0]), len(v_edit[0][0])
    return [
        [[alpha[h][i] * float(v_edit[h][i][c]) for c in range(dim)] for i in range(tokens)]
        for h in range(heads)
    ]


def modulate_oracle(k_edit, k_inv, gain):
    heads, tokens, dim = len(k_edit), len(k_edit[0]), len(k_edit[0][0])
    scale = 1.0 / math.sqrt(dim)
    out = [[[0.0] * dim for _ in range(tokens)] for _ in range(heads)]
    for h in range(heads):
        for i in range(tokens):
            scores = []
            for j in range(tokens):
                s = 0.0
                for c in range(dim):
                    s += float(k_edit[h][i][c]) * float(k_inv[h][j][c])
                scores.append(s * scale)
            peak = max(scores)
            exps = [math.exp(s - peak) for s in scores]
            total = sum(exps)
            weights = [e / total for e in exps]
            for c in range(dim):
                mixed = 0.0
                for j in range(tokens):
                    mixed += weights[j] * float(k_inv[h][j][c])
                out[h][i][c] = float(k_edit[h][i][c]) + gain * mixed
    return out


def direction_oracle(old_members, young_members):
    """Entrywise mean(old) - mean(young) over nested lists."""

    def mean(members):
        heads, tokens, dim = len(members[0]), len(members[0][0]), len(members[0][0][0])
        return [
            [
                [sum(float(m[h][i][c]) for m in members) / len(members) for c in range(dim)]
                for i in range(tokens)
            ]
            for h in range(heads)
        ]

    mo, my = mean(old_members), mean(young_members)
    heads, tokens, dim = len(mo), len(mo[0]), len(mo[0][0])
    return [
        [[mo[h][i][c] - my[h][i][c] for c in range(dim)] for i in range(tokens)]
        for h in range(heads)
    ]


def age_weight_oracle(target, low, high):
    return (target - low) / (high - low)


def shift_oracle(block, delta, weight):
    heads, tokens, dim = len(block), len(block[0]), len(block[0][0])
    return [
        [[float(block[h][i][c]) + weight * float(delta[h][i][c]) for c in range(dim)] for i in range(tokens)]
        for h in range(heads)
    ]


def linear_flow_exact(z0, a, b, t):
    """Closed-form solution of dz/dt = a*z + b from z(0) = z0."""
    if a == 0.0:
        return z0 + b * t
    return (z0 + b / a) * math.exp(a * t) - b / a
