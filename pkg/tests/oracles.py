"""Brute-force reference implementations the fast code is checked against.

Everything here favours obviousness over speed: alignments are enumerated
explicitly, probabilities are summed in plain Python, and derivatives come
from central finite differences.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from tdkd.lattice import BLANK_ID, OutputLattice


def all_alignments(T: int, U: int) -> list[tuple[tuple[int, int, int], ...]]:
    """Every monotone path of T blank steps and U label steps, as (t, u, is_label)."""
    out: list[tuple[tuple[int, int, int], ...]] = []

    def walk(t: int, u: int, steps: list[tuple[int, int, int]]) -> None:
        if t == T:
            if u == U:
                out.append(tuple(steps))
            return
        walk(t + 1, u, steps + [(t, u, 0)])
        if u < U:
            walk(t, u + 1, steps + [(t, u, 1)])

    walk(0, 0, [])
    return out


def path_score(lat: OutputLattice, tokens: Sequence[int], path) -> float:
    s = 0.0
    for t, u, is_label in path:
        s += lat.values[t, u, tokens[u] if is_label else BLANK_ID]
    return s


def enum_nll(lat: OutputLattice, tokens: Sequence[int]) -> float:
    scores = [path_score(lat, tokens, p) for p in all_alignments(lat.T, lat.U)]
    m = max(scores)
    return -(m + math.log(sum(math.exp(s - m) for s in scores)))


def enum_best(lat: OutputLattice, tokens: Sequence[int]) -> tuple[float, list]:
    """Max path score and all argmax paths (exact float comparison)."""
    paths = all_alignments(lat.T, lat.U)
    scores = [path_score(lat, tokens, p) for p in paths]
    best = max(scores)
    return best, [p for p, s in zip(paths, scores) if s == best]


def central_diff(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, coordinate by coordinate."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
