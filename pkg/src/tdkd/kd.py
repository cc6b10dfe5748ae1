"""Distillation losses over transducer output lattices.

Three ways for a student lattice to imitate a teacher:

* full-lattice cross-entropy over every node of the ``T x (U+1)`` grid,
* a collapsed 3-class variant (blank / next reference token / everything
  else) over every node,
* cross-entropy restricted to the teacher's one-best alignment path, with an
  optional delay ``tau`` that matches each path node ``(t, u)`` against the
  student node ``(t + tau, u)`` so a causal student may emit later than its
  teacher.

Teacher distributions are fixed, so every loss is a plain cross-entropy and
its gradient with respect to the student's pre-softmax logits is
``p_student - p_teacher`` on the touched nodes.  Targets can additionally be
sharpened with an external language model by log-linear interpolation before
renormalization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .lattice import (
    BLANK_ID,
    Alignment,
    OutputLattice,
    alignment_from_json,
    alignment_to_json,
    check_tokens,
)

KD_VARIANTS = ("full_lattice", "collapsed", "one_best")


@dataclass(frozen=True)
class KdConfig:
    """Knobs of the distillation objective."""

    lam: float = 0.1
    tau: int = 0
    beta_lm: float = 0.0
    variant: str = "one_best"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.tau < 0:
            raise ValueError("tau must be non-negative")
        if self.beta_lm < 0:
            raise ValueError("beta_lm must be non-negative")
        if self.variant not in KD_VARIANTS:
            raise ValueError(f"unknown KD variant {self.variant!r}")


@dataclass(frozen=True)
class KdTargetSet:
    """Distillation payload for one utterance: the teacher's one-best path
    plus its full log-distribution at every path node."""

    utt_id: str
    alignment: Alignment
    node_dists: np.ndarray  # (T+U, K) log-probabilities
    fused: bool = False
    beta: float = 0.0
    tau_applicable: bool = True

    def __post_init__(self):
        if self.node_dists.shape[0] != len(self.alignment.steps):
            raise ValueError("one distribution per alignment step required")

    @property
    def stored_values(self) -> int:
        return int(self.node_dists.size)


@dataclass(frozen=True)
class CollapsedTargetLattice:
    """Per-node 3-class teacher probabilities (blank, next token, rest)."""

    values: np.ndarray  # (T, U+1, 3) probabilities

    @property
    def stored_values(self) -> int:
        return int(self.values.size)


def _check_same_grid(zt: OutputLattice, zs: OutputLattice) -> None:
    if zt.values.shape != zs.values.shape:
        raise ValueError(f"lattice shapes differ: {zt.values.shape} vs {zs.values.shape}")


def _cross_entropy(p_target: np.ndarray, log_student: np.ndarray) -> float:
    """-sum(p_target * log_student), skipping zero-mass target entries."""
    with np.errstate(invalid="ignore"):
        terms = np.where(p_target > 0, p_target * log_student, 0.0)
    return float(-np.sum(terms))


def kd_full_lattice(zt: OutputLattice, zs: OutputLattice) -> float:
    """Cross-entropy between teacher and student over every lattice node."""
    _check_same_grid(zt, zs)
    return _cross_entropy(np.exp(zt.values), zs.values)


def kd_full_lattice_grad(zt: OutputLattice, zs: OutputLattice) -> np.ndarray:
    """d(loss)/d(student logits): ``p_student - p_teacher`` at every node."""
    _check_same_grid(zt, zs)
    return np.exp(zs.values) - np.exp(zt.values)


def collapse_node(dist: np.ndarray, correct: int | None) -> np.ndarray:
    """Collapse a K-class probability vector to (blank, correct, rest)."""
    if correct is not None and correct == BLANK_ID:
        raise ValueError("the correct symbol cannot be the blank")
    p_blank = float(dist[BLANK_ID])
    p_correct = float(dist[correct]) if correct is not None else 0.0
    return np.array([p_blank, p_correct, max(0.0, 1.0 - p_blank - p_correct)])


def collapse_lattice(lat: OutputLattice, tokens: Sequence[int]) -> CollapsedTargetLattice:
    """Apply :func:`collapse_node` at every grid node; the correct slot at
    ``u = U`` is empty because there is no next reference token."""
    y = check_tokens(tokens, lat.K)
    if len(y) != lat.U:
        raise ValueError(f"token sequence length {len(y)} != lattice U {lat.U}")
    p = np.exp(lat.values)
    out = np.zeros((lat.T, lat.U + 1, 3))
    out[:, :, 0] = p[:, :, BLANK_ID]
    if y:
        out[:, : lat.U, 1] = p[:, np.arange(lat.U), list(y)]
    out[:, :, 2] = np.maximum(0.0, 1.0 - out[:, :, 0] - out[:, :, 1])
    return CollapsedTargetLattice(out)


def kd_collapsed(ct: CollapsedTargetLattice, zs: OutputLattice, tokens: Sequence[int]) -> float:
    """Collapse the student with the same rule, then 3-class cross-entropy per node."""
    if ct.values.shape[:2] != zs.values.shape[:2]:
        raise ValueError(f"grid shapes differ: {ct.values.shape[:2]} vs {zs.values.shape[:2]}")
    cs = collapse_lattice(zs, tokens)
    with np.errstate(divide="ignore"):
        log_cs = np.log(cs.values)
    return _cross_entropy(ct.values, log_cs)


def kd_collapsed_grad(ct: CollapsedTargetLattice, zs: OutputLattice, tokens: Sequence[int]) -> np.ndarray:
    """Gradient of :func:`kd_collapsed` w.r.t. student logits.

    For symbol ``k`` in collapsed class ``c``, the chain rule through the
    class sums gives ``p_s[k] * (1 - ct[c] / cs[c])``.
    """
    y = check_tokens(tokens, zs.K)
    cs = collapse_lattice(zs, y).values
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(ct.values > 0, ct.values / cs, 0.0)
    ratio_rest = ratio[:, :, 2]
    p = np.exp(zs.values)
    grad = p * (1.0 - ratio_rest[:, :, None])
    grad[:, :, BLANK_ID] = p[:, :, BLANK_ID] * (1.0 - ratio[:, :, 0])
    if y:
        cols = np.arange(zs.U)
        grad[:, cols, list(y)] = p[:, cols, list(y)] * (1.0 - ratio[:, :-1, 1])
    return grad


def make_target_set(
    utt_id: str, teacher: OutputLattice, alignment: Alignment, tau_applicable: bool = True
) -> KdTargetSet:
    """Slice the teacher's log-distributions along an alignment path."""
    alignment.validate(teacher.T, teacher.U)
    idx_t = [t for t, _, _ in alignment.steps]
    idx_u = [u for _, u, _ in alignment.steps]
    dists = teacher.values[idx_t, idx_u, :].copy()
    return KdTargetSet(utt_id, alignment, dists, tau_applicable=tau_applicable)


def kd_one_best(target: KdTargetSet, zs: OutputLattice, tau: int = 0) -> float:
    """Cross-entropy over the teacher's one-best path, shifted ``tau`` frames.

    Path nodes whose shifted frame ``t + tau`` falls past the last student
    frame are dropped from the sum; ``tau = 0`` is distillation on the
    unshifted path.
    """
    p_t, log_s = _one_best_terms(target, zs, tau)
    if p_t is None:
        return 0.0
    return _cross_entropy(p_t, log_s)


def kd_one_best_grad(target: KdTargetSet, zs: OutputLattice, tau: int = 0) -> np.ndarray:
    """Gradient w.r.t. student logits: ``p_s - p_t`` on shifted path nodes, 0 elsewhere."""
    grad = np.zeros_like(zs.values)
    kept = _kept_steps(target, zs, tau)
    for i, (t, u, _) in kept:
        grad[t + tau, u, :] += np.exp(zs.values[t + tau, u, :]) - np.exp(target.node_dists[i])
    return grad


def _kept_steps(target: KdTargetSet, zs: OutputLattice, tau: int):
    if tau < 0:
        raise ValueError("tau must be non-negative")
    target.alignment.validate(zs.T, zs.U)
    if target.node_dists.shape[1] != zs.K:
        raise ValueError("teacher and student vocabulary sizes differ")
    return [(i, step) for i, step in enumerate(target.alignment.steps) if step[0] + tau < zs.T]


def _one_best_terms(target: KdTargetSet, zs: OutputLattice, tau: int):
    kept = _kept_steps(target, zs, tau)
    if not kept:
        return None, None
    rows = [i for i, _ in kept]
    idx_t = [t + tau for _, (t, _, _) in kept]
    idx_u = [u for _, (_, u, _) in kept]
    return np.exp(target.node_dists[rows]), zs.values[idx_t, idx_u, :]


def fuse_targets(target: KdTargetSet, lm_dists: np.ndarray, beta: float) -> KdTargetSet:
    """Sharpen path-node targets by log-linear interpolation with an LM.

    ``lm_dists`` holds one K-vector of LM log-scores per path node; its blank
    entry is ignored and replaced according to the emission at that node:
    zero (no LM contribution) where the teacher emits blank, the minimum
    non-blank LM log-score where it emits a token.  The interpolated scores
    are renormalized per node.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    lm = np.asarray(lm_dists, dtype=np.float64)
    if lm.shape != target.node_dists.shape:
        raise ValueError(f"lm_dists shape {lm.shape} != targets shape {target.node_dists.shape}")
    fused = np.empty_like(target.node_dists)
    for i, (_, _, k) in enumerate(target.alignment.steps):
        lm_vec = lm[i].copy()
        lm_vec[BLANK_ID] = 0.0 if k == BLANK_ID else float(np.min(lm[i, 1:]))
        z = target.node_dists[i] + beta * lm_vec
        fused[i] = z - _logsumexp(z)
    return replace(target, node_dists=fused, fused=True, beta=beta)


def _logsumexp(z: np.ndarray) -> float:
    m = float(np.max(z))
    return m + float(np.log(np.sum(np.exp(z - m))))


def combined_loss(nll: float, kd: float, lam: float) -> float:
    """Training objective: transducer NLL plus ``lam`` times the KD loss."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    return nll + lam * kd


def lattice_entropy(lat: OutputLattice) -> float:
    """Sum of per-node entropies; KL = cross-entropy minus this."""
    p = np.exp(lat.values)
    with np.errstate(invalid="ignore"):
        terms = np.where(p > 0, p * lat.values, 0.0)
    return float(-np.sum(terms))


def target_entropy(target: KdTargetSet) -> float:
    p = np.exp(target.node_dists)
    with np.errstate(invalid="ignore"):
        terms = np.where(p > 0, p * target.node_dists, 0.0)
    return float(-np.sum(terms))


def save_targets(targets: Iterable[KdTargetSet], path) -> None:
    """KD target cache as JSON Lines; floats round-trip exactly."""
    with open(path, "w", encoding="utf-8") as f:
        for tg in targets:
            rec = {
                "id": tg.utt_id,
                "alignment": alignment_to_json(tg.alignment),
                "dists": tg.node_dists.tolist(),
                "fused": tg.fused,
                "beta": float(tg.beta),
            }
            f.write(json.dumps(rec) + "\n")


def load_targets(path) -> dict[str, KdTargetSet]:
    out: dict[str, KdTargetSet] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            target = KdTargetSet(
                utt_id=rec["id"],
                alignment=alignment_from_json(rec["alignment"]),
                node_dists=np.array(rec["dists"], dtype=np.float64),
                fused=bool(rec["fused"]),
                beta=float(rec["beta"]),
            )
            out[target.utt_id] = target
    return out
