"""Add-alpha smoothed count n-gram language model over non-blank tokens.

Conditional estimates back off to the next shorter history whenever a
history was never observed, bottoming out at the unigram.  ``step_dist``
returns a full K-vector of log-scores whose blank entry is a NaN sentinel:
the blank score depends on the emission context and is filled in at fusion
or decoding time.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .lattice import check_tokens


@dataclass
class NgramLm:
    order: int
    alpha: float
    vocab_size: int  # K including blank; the model covers tokens 1..K-1
    counts: list[dict[tuple[int, ...], Counter]] = field(default_factory=list)

    @property
    def n_tokens(self) -> int:
        return self.vocab_size - 1


def train_lm(corpus: Sequence[Sequence[int]], order: int, alpha: float, vocab_size: int) -> NgramLm:
    """Count n-grams of every order up to ``order`` over the corpus."""
    if order < 1:
        raise ValueError("order must be >= 1")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    seqs = [check_tokens(s, vocab_size) for s in corpus]
    if not seqs or all(len(s) == 0 for s in seqs):
        raise ValueError("empty corpus")
    counts: list[dict[tuple[int, ...], Counter]] = [dict() for _ in range(order)]
    for seq in seqs:
        for o in range(1, order + 1):
            table = counts[o - 1]
            for i in range(len(seq)):
                if i < o - 1:
                    continue
                hist = seq[i - o + 1 : i]
                table.setdefault(hist, Counter())[seq[i]] += 1
    return NgramLm(order=order, alpha=alpha, vocab_size=vocab_size, counts=counts)


def step_dist(lm: NgramLm, history: Sequence[int]) -> np.ndarray:
    """Log-distribution over the next token given a history.

    Non-blank entries sum to one; the blank entry is NaN until the caller
    applies its blank rule.
    """
    hist = tuple(int(t) for t in history)
    table: Counter | None = None
    for o in range(min(lm.order, len(hist) + 1), 0, -1):
        table = lm.counts[o - 1].get(hist[len(hist) - o + 1 :] if o > 1 else ())
        if table:
            break
        table = None
    total = sum(table.values()) if table else 0
    denom = total + lm.alpha * lm.n_tokens
    out = np.full(lm.vocab_size, np.nan)
    for k in range(1, lm.vocab_size):
        c = table.get(k, 0) if table else 0
        out[k] = math.log((c + lm.alpha) / denom)
    return out


def save_lm(lm: NgramLm, path) -> None:
    payload = {
        "order": lm.order,
        "alpha": lm.alpha,
        "vocab_size": lm.vocab_size,
        "counts": [
            {" ".join(map(str, hist)): dict(sorted(counter.items())) for hist, counter in sorted(table.items())}
            for table in lm.counts
        ],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True)


def load_lm(path) -> NgramLm:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    counts: list[dict[tuple[int, ...], Counter]] = []
    for table in payload["counts"]:
        parsed: dict[tuple[int, ...], Counter] = {}
        for hist_str, counter in table.items():
            hist = tuple(int(t) for t in hist_str.split()) if hist_str else ()
            parsed[hist] = Counter({int(k): int(v) for k, v in counter.items()})
        counts.append(parsed)
    return NgramLm(order=payload["order"], alpha=payload["alpha"], vocab_size=payload["vocab_size"], counts=counts)
