"""Log-domain numerics and the lattice/alignment data model.

A transducer over a ``T``-frame utterance and a ``U``-token target sequence
produces one categorical distribution over ``K`` symbols (blank plus ``K-1``
tokens) at every grid node ``(t, u)``: frame ``t``, ``u`` tokens already
emitted.  The grid therefore has shape ``T x (U+1)`` and every node stores a
``K``-vector of log-probabilities.  Frame indices are 0-based throughout the
code and all on-disk formats.

An alignment is a monotone path through that grid: a blank step at ``(t, u)``
consumes frame ``t`` and moves to ``(t+1, u)``; a label step emits token
``y[u]`` and moves to ``(t, u+1)``.  A complete alignment consumes all ``T``
frames and emits all ``U`` tokens, so it has exactly ``T + U`` steps and its
last step is the blank at ``(T-1, U)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

BLANK_ID = 0

NEG_INF = float("-inf")

# A reference transcription: non-blank token ids.  Validate with check_tokens.
TokenSeq = tuple[int, ...]

_LATTICE_MAGIC = b"LATT"
_LATTICE_VERSION = 1


@dataclass(frozen=True)
class Vocab:
    """Symbol inventory: ``size`` ids with blank pinned at id 0."""

    size: int
    blank_id: int = BLANK_ID

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"vocab size must be >= 2, got {self.size}")
        if self.blank_id != BLANK_ID:
            raise ValueError("blank_id is fixed at 0")

    @property
    def tokens(self) -> range:
        """Non-blank token ids."""
        return range(1, self.size)


def check_tokens(tokens: Sequence[int], vocab_size: int | None = None) -> tuple[int, ...]:
    """Validate a non-blank token sequence and return it as a tuple."""
    out = tuple(int(t) for t in tokens)
    for t in out:
        if t == BLANK_ID:
            raise ValueError("token sequence must not contain the blank id")
        if t < 0 or (vocab_size is not None and t >= vocab_size):
            raise ValueError(f"token id {t} out of range")
    return out


def logsumexp(xs: Iterable[float]) -> float:
    """Stable log(sum(exp(xs))) for a non-empty collection of log-values.

    Uses the usual max-shift; an all ``-inf`` input yields ``-inf``.
    """
    vals = [float(x) for x in xs]
    if not vals:
        raise ValueError("logsumexp of an empty collection")
    m = max(vals)
    if m == NEG_INF:
        return NEG_INF
    return m + math.log(sum(math.exp(v - m) for v in vals))


@dataclass(frozen=True)
class OutputLattice:
    """Per-node log-distributions on the ``T x (U+1)`` grid.

    ``values[t, u, k]`` is ``log p(k | t, u)``; every node normalizes to 1.
    """

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 3:
            raise ValueError(f"lattice values must be 3-d, got shape {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 1 or v.shape[2] < 2:
            raise ValueError(f"degenerate lattice shape {v.shape}")
        if v.dtype != np.float64:
            raise ValueError("lattice values must be float64")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def U(self) -> int:
        return self.values.shape[1] - 1

    @property
    def K(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class LatticeReport:
    """Result of :func:`validate_lattice`."""

    ok: bool
    max_residual: float
    worst_node: tuple[int, int] | None
    non_finite: bool


@dataclass(frozen=True)
class Alignment:
    """A monotone lattice path as an ordered list of ``(t, u, k)`` emissions."""

    steps: tuple[tuple[int, int, int], ...]

    @property
    def nodes(self) -> tuple[tuple[int, int], ...]:
        return tuple((t, u) for t, u, _ in self.steps)

    def validate(self, T: int, U: int, tokens: Sequence[int] | None = None) -> None:
        """Check path shape against a ``T x (U+1)`` grid and, optionally, a token sequence."""
        if len(self.steps) != T + U:
            raise ValueError(f"alignment has {len(self.steps)} steps, expected T+U={T + U}")
        t, u = 0, 0
        blanks = 0
        for st, su, k in self.steps:
            if (st, su) != (t, u):
                raise ValueError(f"alignment step at ({st},{su}), expected ({t},{u})")
            if not (0 <= t < T and 0 <= u <= U):
                raise ValueError(f"alignment node ({t},{u}) outside the {T}x{U + 1} grid")
            if k == BLANK_ID:
                blanks += 1
                t += 1
            else:
                if tokens is not None and k != tokens[u]:
                    raise ValueError(f"label step emits {k}, expected token {tokens[u]}")
                u += 1
        if blanks != T or u != U:
            raise ValueError(f"alignment consumed {blanks}/{T} frames, emitted {u}/{U} tokens")


def lattice_from_logits(logits: np.ndarray) -> OutputLattice:
    """Normalize raw joint-network scores into an :class:`OutputLattice`."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - _logsumexp_lastaxis(z)[..., None]
    return OutputLattice(z)


def uniform_lattice(T: int, U: int, K: int) -> OutputLattice:
    return OutputLattice(np.full((T, U + 1, K), -math.log(K), dtype=np.float64))


def random_lattice(rng: np.random.Generator, T: int, U: int, K: int, scale: float = 2.0) -> OutputLattice:
    """A normalized lattice with i.i.d. Gaussian logits; handy for tests and benchmarks."""
    return lattice_from_logits(rng.normal(0.0, scale, size=(T, U + 1, K)))


def node_logprob(lat: OutputLattice, t: int, u: int, k: int) -> float:
    """Stored ``log p(k | t, u)``; indices must be in range."""
    if not (0 <= t < lat.T and 0 <= u <= lat.U and 0 <= k < lat.K):
        raise IndexError(f"node ({t},{u},{k}) outside lattice {lat.T}x{lat.U + 1}x{lat.K}")
    return float(lat.values[t, u, k])


def validate_lattice(lat: OutputLattice, tol: float = 1e-6) -> LatticeReport:
    """Check normalization of every node; reports the worst residual and its node."""
    v = lat.values
    non_finite = bool(np.isnan(v).any() or np.isposinf(v).any())
    residuals = np.abs(_logsumexp_lastaxis(v))
    worst_flat = int(np.argmax(residuals))
    t, u = divmod(worst_flat, v.shape[1])
    worst = float(residuals[t, u])
    ok = (not non_finite) and worst <= tol
    return LatticeReport(ok=ok, max_residual=worst, worst_node=(t, u), non_finite=non_finite)


def _logsumexp_lastaxis(a: np.ndarray) -> np.ndarray:
    m = np.max(a, axis=-1)
    safe = np.where(np.isneginf(m), 0.0, m)
    out = safe + np.log(np.sum(np.exp(a - safe[..., None]), axis=-1))
    return np.where(np.isneginf(m), NEG_INF, out)


def save_lattice(lat: OutputLattice, path) -> None:
    """Binary dump: ``LATT`` magic, version, T/U/K as u32 LE, then float64 values."""
    with open(path, "wb") as f:
        f.write(_LATTICE_MAGIC)
        f.write(struct.pack("<IIII", _LATTICE_VERSION, lat.T, lat.U, lat.K))
        f.write(lat.values.astype("<f8").tobytes(order="C"))


def load_lattice(path) -> OutputLattice:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _LATTICE_MAGIC:
            raise ValueError(f"bad lattice magic {magic!r}")
        version, T, U, K = struct.unpack("<IIII", f.read(16))
        if version != _LATTICE_VERSION:
            raise ValueError(f"unsupported lattice version {version}")
        raw = f.read(T * (U + 1) * K * 8)
        if len(raw) != T * (U + 1) * K * 8:
            raise ValueError("truncated lattice file")
        values = np.frombuffer(raw, dtype="<f8").reshape(T, U + 1, K).astype(np.float64)
    return OutputLattice(np.ascontiguousarray(values))


def alignment_to_json(a: Alignment) -> list[list[int]]:
    return [[t, u, k] for t, u, k in a.steps]


def alignment_from_json(steps) -> Alignment:
    return Alignment(tuple((int(t), int(u), int(k)) for t, u, k in steps))
