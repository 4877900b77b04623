"""Slow, definition-level reference computations.

Each function here recomputes something the library does, by a different
route: permutation averages instead of subset enumeration, Pearson
correlation of ranks in exact rationals instead of the squared-difference
shortcut, Python sorting instead of numpy argsort, central differences
instead of backpropagation. Nothing in this module calls the code it checks.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np


def spearman_definition(truth: Sequence[int], predicted: Sequence[int]) -> float:
    """Pearson correlation of the two rank vectors, in exact rationals.

    For two permutations of 1..n both variances are equal, so the
    correlation is cov / var and stays rational.
    """
    a = [Fraction(v) for v in truth]
    b = [Fraction(v) for v in predicted]
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    if va == vb:
        return float(cov / va)
    return float(cov) / math.sqrt(float(va) * float(vb))


def shapley_permutations(v: Callable[[frozenset], float], n: int) -> list[float]:
    """Average marginal contribution over all n! arrival orders."""
    phi = [0.0] * n
    orders = list(itertools.permutations(range(n)))
    for order in orders:
        seen: frozenset = frozenset()
        for i in order:
            phi[i] += v(seen | {i}) - v(seen)
            seen = seen | {i}
    return [p / len(orders) for p in phi]


def prune_layer_by_sorting(layer: Sequence[float], r: float) -> list[float]:
    """Keep the floor(n r / 100) largest |x| (lower index on ties) as signs."""
    n = len(layer)
    m = int(Fraction(repr(float(r))) * n // 100)
    ranked = sorted(range(n), key=lambda h: (-abs(layer[h]), h))
    keep = set(ranked[:m])
    out = []
    for h, x in enumerate(layer):
        if h in keep and x != 0:
            out.append(1.0 if x > 0 else -1.0)
        else:
            out.append(0.0)
    return out


def sign_agreement_loop(theta: Sequence[float], window: Sequence[float]) -> int:
    def sgn(x: float) -> int:
        x = float(x)
        return (x > 0) - (x < 0)

    return sum(sgn(a) * sgn(b) for a, b in zip(theta, window))


def mlp_loss(flat: np.ndarray, dims: Sequence[int], x: np.ndarray, y: np.ndarray, activation: str = "relu") -> float:
    """Mean softmax cross-entropy of a dense net given as one flat vector.

    Parameter order: W1 (row-major, fan_in x fan_out), b1, W2, b2, ...
    """
    pos = 0
    h = x
    n_layers = len(dims) - 1
    for j in range(n_layers):
        fan_in, fan_out = dims[j], dims[j + 1]
        w = flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = flat[pos:pos + fan_out]
        pos += fan_out
        h = h @ w + b
        if j < n_layers - 1:
            h = np.where(h > 0, h, 0.0) if activation == "relu" else np.tanh(h)
    total = 0.0
    for row, label in zip(h, y):
        top = max(row)
        lse = top + math.log(sum(math.exp(v - top) for v in row))
        total += lse - row[label]
    return total / len(y)


def central_difference(f: Callable[[np.ndarray], float], flat: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    work = np.array(flat, dtype=np.float64)
    grad = np.empty_like(work)
    for h in range(work.size):
        keep = work[h]
        work[h] = keep + eps
        up = f(work)
        work[h] = keep - eps
        down = f(work)
        work[h] = keep
        grad[h] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_h |a - n| / max(|a|, |n|, floor); the floor caps relative scaling of near-zero gradients."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
