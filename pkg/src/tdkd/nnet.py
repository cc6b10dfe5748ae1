"""Small differentiable transducer models in plain numpy.

Encoder (optional future-frame splice, one or more tanh recurrent layers that
may be bidirectional, an optional ReLU dense layer, and a linear projection),
prediction network (embedding plus a unidirectional tanh recurrent layer over
the start symbol and the reference tokens), and an additive tanh joint that
emits K logits per lattice node.

Parameters live in one flat float64 vector; named weights are views into it.
``forward_with_tape`` records the intermediates reverse mode needs, and
``backward`` turns a lattice-logit gradient into a parameter gradient of the
same flat shape.  Streaming models are strictly causal: no look-ahead splice
and no backward recurrence, so frame ``t`` of the encoder output never
depends on frames after ``t``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericError, StaleTapeError
from .lattice import BLANK_ID, OutputLattice, check_tokens

_CKPT_MAGIC = b"TDKD"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    vocab_size: int
    enc_hidden: int = 16
    enc_layers: int = 1
    bidirectional: bool = False
    lookahead: int = 0
    enc_dense: int = 0
    enc_out: int = 16
    embed_dim: int = 8
    pred_hidden: int = 16
    joint_hidden: int = 16
    streaming: bool = False

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if min(self.input_dim, self.enc_hidden, self.enc_out, self.embed_dim,
               self.pred_hidden, self.joint_hidden) < 1 or self.enc_layers < 1:
            raise ConfigError("all layer sizes must be positive")
        if self.lookahead < 0 or self.enc_dense < 0:
            raise ConfigError("lookahead and enc_dense must be non-negative")
        if self.streaming and (self.lookahead > 0 or self.bidirectional):
            raise ConfigError("a streaming encoder must be causal: lookahead=0, unidirectional")


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes: list[tuple[str, tuple[int, ...]]] = []
    dirs = ("fwd", "bwd") if cfg.bidirectional else ("fwd",)
    din = cfg.input_dim * (cfg.lookahead + 1)
    for layer in range(cfg.enc_layers):
        for d in dirs:
            shapes += [
                (f"enc{layer}.{d}.Wx", (cfg.enc_hidden, din)),
                (f"enc{layer}.{d}.Wh", (cfg.enc_hidden, cfg.enc_hidden)),
                (f"enc{layer}.{d}.b", (cfg.enc_hidden,)),
            ]
        din = cfg.enc_hidden * len(dirs)
    if cfg.enc_dense:
        shapes += [("enc_dense.W", (cfg.enc_dense, din)), ("enc_dense.b", (cfg.enc_dense,))]
        din = cfg.enc_dense
    shapes += [("enc_proj.W", (cfg.enc_out, din)), ("enc_proj.b", (cfg.enc_out,))]
    shapes += [
        ("embed.E", (cfg.vocab_size, cfg.embed_dim)),
        ("pred.Wx", (cfg.pred_hidden, cfg.embed_dim)),
        ("pred.Wh", (cfg.pred_hidden, cfg.pred_hidden)),
        ("pred.b", (cfg.pred_hidden,)),
        ("joint.Wf", (cfg.joint_hidden, cfg.enc_out)),
        ("joint.Wg", (cfg.joint_hidden, cfg.pred_hidden)),
        ("joint.b", (cfg.joint_hidden,)),
        ("joint.Wout", (cfg.vocab_size, cfg.joint_hidden)),
        ("joint.bout", (cfg.vocab_size,)),
    ]
    return shapes


class TransducerModel:
    """Configuration plus a flat parameter vector with named views."""

    def __init__(self, config: ModelConfig, params: np.ndarray | None = None):
        self.config = config
        self._shapes = dict(_param_shapes(config))
        self._slices: dict[str, slice] = {}
        offset = 0
        for name, shape in _param_shapes(config):
            size = int(np.prod(shape))
            self._slices[name] = slice(offset, offset + size)
            offset += size
        self.num_params = offset
        if params is None:
            params = np.zeros(offset, dtype=np.float64)
        if params.shape != (offset,):
            raise ConfigError(f"parameter vector has {params.shape}, expected ({offset},)")
        self.params = params.astype(np.float64)
        self.version = 0

    def w(self, name: str) -> np.ndarray:
        return self.params[self._slices[name]].reshape(self._shapes[name])

    @property
    def streaming(self) -> bool:
        return self.config.streaming

    def zero_grad_like(self) -> np.ndarray:
        return np.zeros_like(self.params)

    def grad_view(self, grad: np.ndarray, name: str) -> np.ndarray:
        return grad[self._slices[name]].reshape(self._shapes[name])

    def clone(self) -> "TransducerModel":
        return TransducerModel(self.config, self.params.copy())


def init_model(config: ModelConfig, seed: int) -> TransducerModel:
    """Uniform(-s, s) weight init with s = 1/sqrt(fan_in); biases start at zero."""
    rng = np.random.default_rng(seed)
    model = TransducerModel(config)
    for name, shape in _param_shapes(config):
        view = model.params[model._slices[name]]
        if name.endswith(".b") or name.endswith(".bout"):
            continue
        fan_in = shape[1] if len(shape) == 2 else shape[0]
        s = 1.0 / np.sqrt(fan_in)
        view[:] = rng.uniform(-s, s, size=view.shape)
    return model


# ----------------------------------------------------------------- forward


@dataclass
class Tape:
    """Forward intermediates recorded for reverse mode."""

    T: int
    tokens: tuple[int, ...]
    version: int
    spliced: np.ndarray
    enc_layers: list[dict] = field(default_factory=list)
    dense_in: np.ndarray | None = None
    dense_out: np.ndarray | None = None
    proj_in: np.ndarray | None = None
    f: np.ndarray | None = None
    emb_in: np.ndarray | None = None
    emb_rows: list[int] | None = None
    g: np.ndarray | None = None
    A: np.ndarray | None = None


def _splice(X: np.ndarray, lookahead: int) -> np.ndarray:
    if lookahead == 0:
        return X
    T, d = X.shape
    cols = [X]
    for w in range(1, lookahead + 1):
        shifted = np.zeros_like(X)
        shifted[: T - w] = X[w:]
        cols.append(shifted)
    return np.concatenate(cols, axis=1)


def _rnn_pass(Wx: np.ndarray, Wh: np.ndarray, b: np.ndarray, Xin: np.ndarray) -> np.ndarray:
    T = Xin.shape[0]
    H = np.empty((T, Wx.shape[0]))
    pre = Xin @ Wx.T + b
    h = np.zeros(Wx.shape[0])
    for t in range(T):
        h = np.tanh(pre[t] + Wh @ h)
        H[t] = h
    return H


def _rnn_backward(Wx, Wh, Xin, H, dH) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    T = Xin.shape[0]
    DZ = np.empty_like(H)
    carry = np.zeros(H.shape[1])
    for t in range(T - 1, -1, -1):
        dz = (dH[t] + carry) * (1.0 - H[t] ** 2)
        DZ[t] = dz
        carry = Wh.T @ dz
    dWx = DZ.T @ Xin
    dWh = DZ[1:].T @ H[:-1] if T > 1 else np.zeros_like(Wh)
    db = DZ.sum(axis=0)
    dXin = DZ @ Wx
    return dWx, dWh, db, dXin


def encode(model: TransducerModel, X: np.ndarray, tape: Tape | None = None) -> np.ndarray:
    """Encoder output f, one row per frame."""
    cfg = model.config
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != cfg.input_dim:
        raise ValueError(f"features must be (T, {cfg.input_dim}), got {X.shape}")
    out = _splice(X, cfg.lookahead)
    if tape is not None:
        tape.spliced = out
    for layer in range(cfg.enc_layers):
        cache: dict = {"in": out}
        fwd = _rnn_pass(model.w(f"enc{layer}.fwd.Wx"), model.w(f"enc{layer}.fwd.Wh"), model.w(f"enc{layer}.fwd.b"), out)
        cache["fwd"] = fwd
        if cfg.bidirectional:
            bwd = _rnn_pass(model.w(f"enc{layer}.bwd.Wx"), model.w(f"enc{layer}.bwd.Wh"), model.w(f"enc{layer}.bwd.b"), out[::-1])[::-1]
            cache["bwd"] = bwd
            out = np.concatenate([fwd, bwd], axis=1)
        else:
            out = fwd
        if tape is not None:
            tape.enc_layers.append(cache)
    if cfg.enc_dense:
        pre = out @ model.w("enc_dense.W").T + model.w("enc_dense.b")
        dense = np.maximum(0.0, pre)
        if tape is not None:
            tape.dense_in, tape.dense_out = out, dense
        out = dense
    if tape is not None:
        tape.proj_in = out
    f = out @ model.w("enc_proj.W").T + model.w("enc_proj.b")
    if tape is not None:
        tape.f = f
    return f


def predict(model: TransducerModel, tokens: Sequence[int], tape: Tape | None = None) -> np.ndarray:
    """Prediction-network outputs g for the start state and each token prefix."""
    y = check_tokens(tokens, model.config.vocab_size)
    rows = [BLANK_ID] + list(y)  # row 0 of the embedding doubles as the start symbol
    emb_in = model.w("embed.E")[rows]
    g = _rnn_pass(model.w("pred.Wx"), model.w("pred.Wh"), model.w("pred.b"), emb_in)
    if tape is not None:
        tape.emb_in, tape.emb_rows, tape.g = emb_in, rows, g
    return g


def _joint(model: TransducerModel, f: np.ndarray, g: np.ndarray, tape: Tape | None = None) -> np.ndarray:
    F1 = f @ model.w("joint.Wf").T
    G1 = g @ model.w("joint.Wg").T
    A = np.tanh(F1[:, None, :] + G1[None, :, :] + model.w("joint.b"))
    logits = A @ model.w("joint.Wout").T + model.w("joint.bout")
    if tape is not None:
        tape.A = A
    return logits


def forward_with_tape(model: TransducerModel, X: np.ndarray, tokens: Sequence[int]) -> tuple[OutputLattice, Tape]:
    y = check_tokens(tokens, model.config.vocab_size)
    tape = Tape(T=np.asarray(X).shape[0], tokens=y, version=model.version, spliced=np.empty(0))
    f = encode(model, X, tape)
    g = predict(model, y, tape)
    logits = _joint(model, f, g, tape)
    lse = _logsumexp_last(logits)
    return OutputLattice(logits - lse[..., None]), tape


def forward_lattice(model: TransducerModel, X: np.ndarray, tokens: Sequence[int]) -> OutputLattice:
    lattice, _ = forward_with_tape(model, X, tokens)
    return lattice


def _logsumexp_last(a: np.ndarray) -> np.ndarray:
    m = np.max(a, axis=-1)
    return m + np.log(np.sum(np.exp(a - m[..., None]), axis=-1))


def backward(
    model: TransducerModel,
    X: np.ndarray,
    tokens: Sequence[int],
    lattice_grad: np.ndarray,
    tape: Tape | None = None,
) -> np.ndarray:
    """Parameter gradient from a loss gradient w.r.t. the pre-softmax joint logits."""
    cfg = model.config
    y = check_tokens(tokens, cfg.vocab_size)
    if tape is None:
        _, tape = forward_with_tape(model, X, y)
    if tape.version != model.version:
        raise StaleTapeError("tape was recorded against an older parameter state")
    if tape.tokens != y or tape.T != np.asarray(X).shape[0]:
        raise StaleTapeError("tape does not match this utterance")

    grad = model.zero_grad_like()
    dlogits = np.asarray(lattice_grad, dtype=np.float64)
    if dlogits.shape != (tape.T, len(y) + 1, cfg.vocab_size):
        raise ValueError(f"lattice gradient shape {dlogits.shape} unexpected")

    A, f, g = tape.A, tape.f, tape.g
    grad_view = model.grad_view
    grad_view(grad, "joint.Wout")[:] = np.einsum("tuk,tuh->kh", dlogits, A)
    grad_view(grad, "joint.bout")[:] = dlogits.sum(axis=(0, 1))
    dA = dlogits @ model.w("joint.Wout")
    dpre = dA * (1.0 - A**2)
    grad_view(grad, "joint.b")[:] = dpre.sum(axis=(0, 1))
    dF1 = dpre.sum(axis=1)
    dG1 = dpre.sum(axis=0)
    grad_view(grad, "joint.Wf")[:] = dF1.T @ f
    grad_view(grad, "joint.Wg")[:] = dG1.T @ g
    df = dF1 @ model.w("joint.Wf")
    dg = dG1 @ model.w("joint.Wg")

    # Prediction network.
    dWx, dWh, db, demb = _rnn_backward(model.w("pred.Wx"), model.w("pred.Wh"), tape.emb_in, tape.g, dg)
    grad_view(grad, "pred.Wx")[:] = dWx
    grad_view(grad, "pred.Wh")[:] = dWh
    grad_view(grad, "pred.b")[:] = db
    np.add.at(grad_view(grad, "embed.E"), tape.emb_rows, demb)

    # Encoder projection (and optional dense layer).
    grad_view(grad, "enc_proj.W")[:] = df.T @ tape.proj_in
    grad_view(grad, "enc_proj.b")[:] = df.sum(axis=0)
    dout = df @ model.w("enc_proj.W")
    if cfg.enc_dense:
        dout = dout * (tape.dense_out > 0)
        grad_view(grad, "enc_dense.W")[:] = dout.T @ tape.dense_in
        grad_view(grad, "enc_dense.b")[:] = dout.sum(axis=0)
        dout = dout @ model.w("enc_dense.W")

    # Encoder recurrent stack, top to bottom.
    for layer in range(cfg.enc_layers - 1, -1, -1):
        cache = tape.enc_layers[layer]
        H = cfg.enc_hidden
        if cfg.bidirectional:
            d_fwd, d_bwd = dout[:, :H], dout[:, H:]
        else:
            d_fwd, d_bwd = dout, None
        dWx, dWh, db, dXin = _rnn_backward(
            model.w(f"enc{layer}.fwd.Wx"), model.w(f"enc{layer}.fwd.Wh"), cache["in"], cache["fwd"], d_fwd
        )
        grad_view(grad, f"enc{layer}.fwd.Wx")[:] = dWx
        grad_view(grad, f"enc{layer}.fwd.Wh")[:] = dWh
        grad_view(grad, f"enc{layer}.fwd.b")[:] = db
        if cfg.bidirectional:
            dWx2, dWh2, db2, dXin2 = _rnn_backward(
                model.w(f"enc{layer}.bwd.Wx"),
                model.w(f"enc{layer}.bwd.Wh"),
                cache["in"][::-1],
                cache["bwd"][::-1],
                d_bwd[::-1],
            )
            grad_view(grad, f"enc{layer}.bwd.Wx")[:] = dWx2
            grad_view(grad, f"enc{layer}.bwd.Wh")[:] = dWh2
            grad_view(grad, f"enc{layer}.bwd.b")[:] = db2
            dXin = dXin + dXin2[::-1]
        dout = dXin
    return grad


def sgd_step(model: TransducerModel, grad: np.ndarray, lr: float, clip: float = 0.0) -> TransducerModel:
    """Global-norm clip followed by a plain gradient step; refuses non-finite grads."""
    if lr <= 0:
        raise ConfigError("learning rate must be positive")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient; step refused")
    if clip:
        norm = float(np.linalg.norm(grad))
        if norm > clip:
            grad = grad * (clip / norm)
    model.params -= lr * grad
    model.version += 1
    return model


# ---------------------------------------------------------------- decoding API


def pred_start(model: TransducerModel) -> tuple[np.ndarray, np.ndarray]:
    """Prediction output and hidden state after consuming the start symbol."""
    e = model.w("embed.E")[BLANK_ID]
    h = np.tanh(model.w("pred.Wx") @ e + model.w("pred.b"))
    return h, h


def pred_step(model: TransducerModel, h: np.ndarray, token: int) -> tuple[np.ndarray, np.ndarray]:
    e = model.w("embed.E")[token]
    h2 = np.tanh(model.w("pred.Wx") @ e + model.w("pred.Wh") @ h + model.w("pred.b"))
    return h2, h2


def joint_logprobs(model: TransducerModel, f_t: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Log-distribution over the K symbols for one (frame, prefix) pair."""
    a = np.tanh(model.w("joint.Wf") @ f_t + model.w("joint.Wg") @ g + model.w("joint.b"))
    logits = model.w("joint.Wout") @ a + model.w("joint.bout")
    return logits - _logsumexp_last(logits)


# ----------------------------------------------------------------- checkpoints


def save_checkpoint(model: TransducerModel, path) -> None:
    blob = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", model.num_params))
        fh.write(model.params.astype("<f8").tobytes())


def load_checkpoint(path) -> TransducerModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        version, hp_len = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        cfg = ModelConfig(**json.loads(fh.read(hp_len).decode("utf-8")))
        (n,) = struct.unpack("<Q", fh.read(8))
        params = np.frombuffer(fh.read(n * 8), dtype="<f8").astype(np.float64)
    return TransducerModel(cfg, params)
