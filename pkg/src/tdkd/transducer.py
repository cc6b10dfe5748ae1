"""Transducer loss via forward-backward, its lattice-logit gradient, and Viterbi.

The total conditional probability of a token sequence marginalizes over every
monotone alignment path through the output lattice:

    alpha[0, 0] = 0
    alpha[t, u] = logaddexp(alpha[t-1, u] + blank(t-1, u),
                            alpha[t, u-1] + label(t, u-1))
    log p(y | X) = alpha[T-1, U] + blank(T-1, U)

where ``blank(t, u)`` and ``label(t, u)`` are the node log-probabilities of
the blank symbol and of the next reference token ``y[u]``.  The backward pass
mirrors it, and posterior node/emission occupancies give the analytic
gradient with respect to the pre-softmax joint logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .lattice import BLANK_ID, NEG_INF, Alignment, OutputLattice, check_tokens


@dataclass(frozen=True)
class ForwardBackwardTable:
    """Log forward/backward scores on the grid plus the total log-probability."""

    alpha: np.ndarray
    beta: np.ndarray
    total_logprob: float


def _check_inputs(lat: OutputLattice, tokens: Sequence[int]) -> tuple[int, ...]:
    y = check_tokens(tokens, lat.K)
    if len(y) != lat.U:
        raise ValueError(f"token sequence length {len(y)} != lattice U {lat.U}")
    if lat.T < 1:
        raise ValueError("lattice must cover at least one frame")
    return y


def _emission_scores(lat: OutputLattice, y: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    """Per-node blank scores (T, U+1) and next-label scores (T, U)."""
    blank = lat.values[:, :, BLANK_ID]
    if y:
        label = lat.values[:, np.arange(len(y)), list(y)]
    else:
        label = np.zeros((lat.T, 0))
    return blank, label


def transducer_nll(lat: OutputLattice, tokens: Sequence[int]) -> tuple[float, ForwardBackwardTable]:
    """Negative log-probability of ``tokens`` plus the forward-backward table."""
    y = _check_inputs(lat, tokens)
    T, U = lat.T, lat.U
    blank, label = _emission_scores(lat, y)

    alpha = np.full((T, U + 1), NEG_INF)
    alpha[0, 0] = 0.0
    for t in range(T):
        for u in range(U + 1):
            if t == 0 and u == 0:
                continue
            from_blank = alpha[t - 1, u] + blank[t - 1, u] if t > 0 else NEG_INF
            from_label = alpha[t, u - 1] + label[t, u - 1] if u > 0 else NEG_INF
            alpha[t, u] = np.logaddexp(from_blank, from_label)

    beta = np.full((T, U + 1), NEG_INF)
    beta[T - 1, U] = blank[T - 1, U]
    for t in range(T - 1, -1, -1):
        for u in range(U, -1, -1):
            if t == T - 1 and u == U:
                continue
            via_blank = blank[t, u] + beta[t + 1, u] if t < T - 1 else NEG_INF
            via_label = label[t, u] + beta[t, u + 1] if u < U else NEG_INF
            beta[t, u] = np.logaddexp(via_blank, via_label)

    total = float(alpha[T - 1, U] + blank[T - 1, U])
    return -total, ForwardBackwardTable(alpha=alpha, beta=beta, total_logprob=total)


def transducer_nll_grad(lat: OutputLattice, tokens: Sequence[int]) -> np.ndarray:
    """Gradient of the NLL with respect to the pre-softmax logits, shape (T, U+1, K).

    For each node the gradient is the occupancy-weighted softmax residual
    ``p(k|t,u) * gamma(t,u) - gamma_emit(t,u,k)``, so each node's entries
    sum to zero.
    """
    y = _check_inputs(lat, tokens)
    T, U = lat.T, lat.U
    _, table = transducer_nll(lat, tokens)
    alpha, beta, total = table.alpha, table.beta, table.total_logprob
    blank, label = _emission_scores(lat, y)

    # Log-occupancy of each emission arc: through (t, u) emitting blank / y[u].
    occ_blank = np.full((T, U + 1), NEG_INF)
    occ_blank[: T - 1, :] = alpha[: T - 1, :] + blank[: T - 1, :] + beta[1:, :]
    occ_blank[T - 1, U] = alpha[T - 1, U] + blank[T - 1, U]
    occ_label = alpha[:, :U] + label + beta[:, 1:] if U > 0 else np.zeros((T, 0))

    g_blank = np.exp(occ_blank - total)
    g_label = np.exp(occ_label - total) if U > 0 else occ_label
    node_occ = g_blank.copy()
    if U > 0:
        node_occ[:, :U] += g_label

    grad = np.exp(lat.values) * node_occ[:, :, None]
    grad[:, :, BLANK_ID] -= g_blank
    if U > 0:
        grad[:, np.arange(U), list(y)] -= g_label
    return grad


def viterbi_alignment(lat: OutputLattice, tokens: Sequence[int]) -> tuple[Alignment, float]:
    """Best alignment path and its log-score; ties prefer the blank transition."""
    y = _check_inputs(lat, tokens)
    T, U = lat.T, lat.U
    blank, label = _emission_scores(lat, y)

    score = np.full((T, U + 1), NEG_INF)
    score[0, 0] = 0.0
    # came_by_label[t, u] marks arrival at (t, u) via the label step from (t, u-1).
    came_by_label = np.zeros((T, U + 1), dtype=bool)
    for t in range(T):
        for u in range(U + 1):
            if t == 0 and u == 0:
                continue
            via_blank = score[t - 1, u] + blank[t - 1, u] if t > 0 else NEG_INF
            via_label = score[t, u - 1] + label[t, u - 1] if u > 0 else NEG_INF
            if t == 0 or via_label > via_blank:
                score[t, u] = via_label
                came_by_label[t, u] = True
            else:
                score[t, u] = via_blank

    best = float(score[T - 1, U] + blank[T - 1, U])
    steps: list[tuple[int, int, int]] = [(T - 1, U, BLANK_ID)]
    t, u = T - 1, U
    while (t, u) != (0, 0):
        if came_by_label[t, u]:
            u -= 1
            steps.append((t, u, y[u]))
        else:
            t -= 1
            steps.append((t, u, BLANK_ID))
    steps.reverse()
    return Alignment(tuple(steps)), best
