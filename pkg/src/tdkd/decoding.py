"""Frame-synchronous transducer decoding and WER scoring.

Greedy decoding emits the argmax symbol at each step until blank wins the
node (with a per-frame emission cap so a pathological model cannot loop).
Beam search keeps the ``B`` best hypotheses per frame; each hypothesis
expands only its ``B`` most probable continuations, which makes ``B = 1``
reduce to greedy decoding exactly.  Hypotheses with identical token
sequences are merged by log-sum-exp, so with a wide enough beam the score of
a hypothesis approaches the full marginal ``log p(y | X)``.

Optional shallow fusion adds ``beta * log LM(token | history)`` to non-blank
expansions; blank carries no LM score.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .lattice import BLANK_ID
from .lm import NgramLm, step_dist
from .nnet import TransducerModel, encode, joint_logprobs, pred_start, pred_step

MAX_SYMBOLS_PER_FRAME = 10


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    score: float
    emission_frames: tuple[int, ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.emission_frames):
            raise ValueError("one emission frame per token required")
        if any(b > a for a, b in zip(self.emission_frames[1:], self.emission_frames)):
            raise ValueError("emission frames must be nondecreasing")

    @property
    def text(self) -> str:
        return " ".join(str(t) for t in self.tokens)


@dataclass(frozen=True)
class WerReport:
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int
    wer: float


def greedy_decode(
    model: TransducerModel, X: np.ndarray, max_symbols_per_frame: int = MAX_SYMBOLS_PER_FRAME
) -> Hypothesis:
    f = encode(model, X)
    g, h = pred_start(model)
    tokens: list[int] = []
    frames: list[int] = []
    score = 0.0
    for t in range(f.shape[0]):
        emitted = 0
        while True:
            logp = joint_logprobs(model, f[t], g)
            k = int(np.argmax(logp))
            if k == BLANK_ID or emitted >= max_symbols_per_frame:
                score += float(logp[BLANK_ID])
                break
            tokens.append(k)
            frames.append(t)
            score += float(logp[k])
            g, h = pred_step(model, h, k)
            emitted += 1
    return Hypothesis(tuple(tokens), score, tuple(frames))


@dataclass
class _BeamHyp:
    tokens: tuple[int, ...]
    score: float
    frames: tuple[int, ...]
    g: np.ndarray
    h: np.ndarray


def _merge(pool: dict, hyp: _BeamHyp) -> None:
    old = pool.get(hyp.tokens)
    if old is None:
        pool[hyp.tokens] = hyp
    else:
        keep_new = hyp.score > old.score
        merged = float(np.logaddexp(old.score, hyp.score))
        best = hyp if keep_new else old
        pool[hyp.tokens] = _BeamHyp(best.tokens, merged, best.frames, best.g, best.h)


def _prune(pool: dict, beam: int) -> dict:
    ranked = sorted(pool.values(), key=lambda h: (-h.score, h.tokens))
    return {h.tokens: h for h in ranked[:beam]}


def beam_decode(
    model: TransducerModel,
    X: np.ndarray,
    beam: int,
    lm: NgramLm | None = None,
    beta: float = 0.0,
    max_symbols_per_frame: int = MAX_SYMBOLS_PER_FRAME,
) -> list[Hypothesis]:
    """Top-``beam`` hypotheses sorted by total log score."""
    if beam < 1:
        raise ValueError("beam width must be >= 1")
    f = encode(model, X)
    g0, h0 = pred_start(model)
    current: dict = {(): _BeamHyp((), 0.0, (), g0, h0)}
    lm_cache: dict[tuple[int, ...], np.ndarray] = {}

    def lm_scores(history: tuple[int, ...]) -> np.ndarray | None:
        if lm is None or beta == 0.0:
            return None
        if history not in lm_cache:
            lm_cache[history] = step_dist(lm, history)
        return lm_cache[history]

    for t in range(f.shape[0]):
        next_set: dict = {}
        level = current
        for depth in range(max_symbols_per_frame + 1):
            new_level: dict = {}
            for hyp in level.values():
                logp = joint_logprobs(model, f[t], hyp.g)
                cand = logp.copy()
                lm_vec = lm_scores(hyp.tokens)
                if lm_vec is not None:
                    cand[1:] += beta * lm_vec[1:]
                order = np.argsort(-cand, kind="stable")[:beam]
                for k in order:
                    k = int(k)
                    if k == BLANK_ID or depth == max_symbols_per_frame:
                        _merge(next_set, _BeamHyp(hyp.tokens, hyp.score + float(logp[BLANK_ID]),
                                                  hyp.frames, hyp.g, hyp.h))
                        if depth == max_symbols_per_frame:
                            break
                    else:
                        g2, h2 = pred_step(model, hyp.h, k)
                        _merge(new_level, _BeamHyp(hyp.tokens + (k,), hyp.score + float(cand[k]),
                                                   hyp.frames + (t,), g2, h2))
            level = _prune(new_level, beam)
            if not level:
                break
        current = _prune(next_set, beam)

    ranked = sorted(current.values(), key=lambda h: (-h.score, h.tokens))
    return [Hypothesis(h.tokens, h.score, h.frames) for h in ranked[:beam]]


def wer(ref: Sequence, hyp: Sequence) -> WerReport:
    """Levenshtein-aligned word error rate with deterministic tie-breaking.

    Ties prefer substitution over insertion over deletion.  An empty
    reference scores 0 against an empty hypothesis and infinity otherwise.
    """
    ref = list(ref)
    hyp = list(hyp)
    n, m = len(ref), len(hyp)
    if n == 0:
        if m == 0:
            return WerReport(0, 0, 0, 0, 0.0)
        return WerReport(0, 0, m, 0, math.inf)

    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            ins = dist[i, j - 1] + 1
            dele = dist[i - 1, j] + 1
            dist[i, j] = min(sub, ins, dele)

    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] != hyp[j - 1]:
                subs += 1
            i, j = i - 1, j - 1
        elif j > 0 and dist[i, j] == dist[i, j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return WerReport(subs, dels, ins, n, (subs + dels + ins) / n)


def mean_emission_frame(hyp: Hypothesis) -> float:
    """Average frame index at which tokens were emitted; NaN for empty output."""
    if not hyp.emission_frames:
        return math.nan
    return sum(hyp.emission_frames) / len(hyp.emission_frames)


def emission_lag(h_stream: Hypothesis, h_nonstream: Hypothesis) -> float:
    """Mean per-token frame delay of one hypothesis against another."""
    if h_stream.tokens != h_nonstream.tokens:
        raise ValueError("emission lag requires identical token sequences")
    if not h_stream.tokens:
        return 0.0
    diffs = [a - b for a, b in zip(h_stream.emission_frames, h_nonstream.emission_frames)]
    return sum(diffs) / len(diffs)


def save_hypotheses(items: Sequence[tuple[str, Hypothesis]], path) -> None:
    """JSON Lines dump: id, tokens, text, score, emission frames."""
    with open(path, "w", encoding="utf-8") as f:
        for utt_id, hyp in items:
            rec = {
                "id": utt_id,
                "tokens": list(hyp.tokens),
                "text": hyp.text,
                "score": float(hyp.score),
                "frames": list(hyp.emission_frames),
            }
            f.write(json.dumps(rec) + "\n")


def load_hypotheses(path) -> dict[str, Hypothesis]:
    out: dict[str, Hypothesis] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            out[rec["id"]] = Hypothesis(tuple(rec["tokens"]), float(rec["score"]), tuple(rec["frames"]))
    return out
