"""Weight-shared convolutional phrase encoder trained with a triplet margin loss.

The encoder is one valid 1-D convolution over the token axis
(``n_filters`` filters of ``kernel_width`` tokens), a ReLU and a global
max-pool, giving a fixed ``n_filters``-length vector.  Distances are plain
L2 and the loss is the hinge ``max(d_pos - d_neg + alpha, 0)``.  Gradients
are derived by hand; all arithmetic is float64.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._io import write_atomic

N_FILTERS = 128
KERNEL_WIDTH = 3

CHECKPOINT_MAGIC = b"MLNK"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIIdI")
FLAG_FINETUNE = 1


@dataclass
class EncoderParams:
    conv_filters: np.ndarray  # (n_filters, kernel_width, in_dim)
    conv_bias: np.ndarray  # (n_filters,)

    @property
    def n_filters(self) -> int:
        return self.conv_filters.shape[0]

    @property
    def kernel_width(self) -> int:
        return self.conv_filters.shape[1]

    @property
    def in_dim(self) -> int:
        return self.conv_filters.shape[2]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"conv_filters": self.conv_filters, "conv_bias": self.conv_bias}

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.conv_filters.copy(), self.conv_bias.copy())

    @classmethod
    def zeros_like(cls, other: "EncoderParams") -> "EncoderParams":
        return cls(np.zeros_like(other.conv_filters), np.zeros_like(other.conv_bias))


def init_params(
    in_dim: int, n_filters: int = N_FILTERS, kernel_width: int = KERNEL_WIDTH, seed: int = 0
) -> EncoderParams:
    """Glorot-uniform filters, zero bias."""
    rng = np.random.default_rng(seed)
    fan_in = kernel_width * in_dim
    fan_out = kernel_width * n_filters
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(n_filters, kernel_width, in_dim))
    return EncoderParams(w, np.zeros(n_filters))


def token_matrix(rows: np.ndarray, kernel_width: int = KERNEL_WIDTH) -> np.ndarray:
    """Zero-pad a ``(n_tokens, dim)`` array to at least ``kernel_width`` rows."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise ValueError("token matrix must be 2-D")
    if len(rows) >= kernel_width:
        return rows
    out = np.zeros((kernel_width, rows.shape[1]))
    out[: len(rows)] = rows
    return out


@dataclass
class _Trace:
    windows: np.ndarray  # (positions, kernel_width * dim)
    pre: np.ndarray  # (positions, n_filters)
    argmax: np.ndarray  # (n_filters,)
    out: np.ndarray  # (n_filters,)


def _forward(p: EncoderParams, x: np.ndarray) -> _Trace:
    k, d = p.kernel_width, p.in_dim
    if x.shape[1] != d or len(x) < k:
        raise ValueError(f"token matrix {x.shape} incompatible with encoder ({k}, {d})")
    windows = sliding_window_view(x, (k, d))[:, 0].reshape(len(x) - k + 1, k * d)
    pre = windows @ p.conv_filters.reshape(p.n_filters, k * d).T + p.conv_bias
    act = np.maximum(pre, 0.0)
    argmax = np.argmax(act, axis=0)
    out = act[argmax, np.arange(p.n_filters)]
    return _Trace(windows, pre, argmax, out)


def encode(p: EncoderParams, x: np.ndarray) -> np.ndarray:
    """Conv -> ReLU -> max over positions; returns an ``n_filters`` vector."""
    return _forward(p, x).out


def _encode_backward(p: EncoderParams, x: np.ndarray, tr: _Trace, g_out: np.ndarray, grads: EncoderParams, with_input: bool):
    f_idx = np.arange(p.n_filters)
    # only the arg-max position of a filter with positive pre-activation carries gradient
    g = np.where(tr.pre[tr.argmax, f_idx] > 0.0, g_out, 0.0)
    k, d = p.kernel_width, p.in_dim
    grads.conv_filters += (g[:, None] * tr.windows[tr.argmax]).reshape(p.n_filters, k, d)
    grads.conv_bias += g
    if not with_input:
        return None
    dx = np.zeros_like(x)
    contrib = g[:, None, None] * p.conv_filters
    for j in range(k):
        np.add.at(dx, tr.argmax + j, contrib[:, j, :])
    return dx


def l2_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def triplet_loss(d_p: float, d_n: float, alpha: float) -> float:
    return max(d_p - d_n + alpha, 0.0)


def triplet_forward(p: EncoderParams, m: np.ndarray, qp: np.ndarray, qn: np.ndarray, alpha: float):
    """Return ``(loss, d_p, d_n)`` for mention ``m``, positive ``qp``, negative ``qn``."""
    em, ep, en = encode(p, m), encode(p, qp), encode(p, qn)
    d_p = l2_distance(em, ep)
    d_n = l2_distance(em, en)
    return triplet_loss(d_p, d_n, alpha), d_p, d_n


@dataclass
class TripletGrads:
    params: EncoderParams
    mention: Optional[np.ndarray] = None
    positive: Optional[np.ndarray] = None
    negative: Optional[np.ndarray] = None
    loss: float = 0.0


def _unit(diff: np.ndarray, dist: float) -> np.ndarray:
    # subgradient 0 where the distance is exactly 0
    return diff / dist if dist > 0.0 else np.zeros_like(diff)


def triplet_backward(
    p: EncoderParams,
    m: np.ndarray,
    qp: np.ndarray,
    qn: np.ndarray,
    alpha: float,
    with_inputs: bool = False,
    grads: Optional[EncoderParams] = None,
) -> TripletGrads:
    """Exact gradient of the triplet loss w.r.t. the shared parameters.

    The three branch contributions are summed into ``grads`` (a fresh zero
    tensor set unless one is passed in for accumulation).  With
    ``with_inputs`` the gradients w.r.t. the three (padded) token matrices
    are returned as well.  An inactive hinge, including the tie at exactly
    zero, contributes nothing.
    """
    if grads is None:
        grads = EncoderParams.zeros_like(p)
    tm, tp, tn = _forward(p, m), _forward(p, qp), _forward(p, qn)
    d_p = l2_distance(tm.out, tp.out)
    d_n = l2_distance(tm.out, tn.out)
    z = d_p - d_n + alpha
    out = TripletGrads(grads, loss=max(z, 0.0))
    if not z > 0.0:
        if with_inputs:
            out.mention, out.positive, out.negative = np.zeros_like(m), np.zeros_like(qp), np.zeros_like(qn)
        return out

    u_p = _unit(tm.out - tp.out, d_p)
    u_n = _unit(tm.out - tn.out, d_n)
    out.mention = _encode_backward(p, m, tm, u_p - u_n, grads, with_inputs)
    out.positive = _encode_backward(p, qp, tp, -u_p, grads, with_inputs)
    out.negative = _encode_backward(p, qn, tn, u_n, grads, with_inputs)
    return out


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], s: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    s.step_count += 1
    t = s.step_count
    bc1 = 1.0 - s.beta1**t
    bc2 = 1.0 - s.beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if name not in s.m:
            s.m[name] = np.zeros_like(p)
            s.v[name] = np.zeros_like(p)
        m, v = s.m[name], s.v[name]
        m *= s.beta1
        m += (1.0 - s.beta1) * g
        v *= s.beta2
        v += (1.0 - s.beta2) * (g * g)
        p -= s.lr * (m / bc1) / (np.sqrt(v / bc2) + s.epsilon)
    return params, s


@dataclass
class Model:
    """Encoder parameters plus everything needed to reuse them.

    ``vocab``/``embeddings`` hold fine-tuned input vectors when the model was
    trained with ``finetune_embeddings``; other tokens use the loaded tables.
    """

    params: EncoderParams
    alpha: float = 1.0
    finetune_embeddings: bool = False
    vocab: list[str] = field(default_factory=list)
    embeddings: Optional[np.ndarray] = None

    def copy(self) -> "Model":
        emb = None if self.embeddings is None else self.embeddings.copy()
        return Model(self.params.copy(), self.alpha, self.finetune_embeddings, list(self.vocab), emb)


def write_checkpoint(model: Model, f: BinaryIO) -> None:
    """Serialize ``model``; tensors are stored as little-endian float32.

    Layout: header (magic ``MLNK``, version u32, dim u32, n_filters u32,
    kernel_width u32, alpha f64, flags u32), conv filters
    ``[n_filters, kernel_width, dim]``, conv bias ``[n_filters]``, then when
    flag bit 0 is set: n_tokens u32 and per token (byte_len u32, UTF-8,
    dim x f32).
    """
    p = model.params
    flags = FLAG_FINETUNE if model.finetune_embeddings else 0
    f.write(
        _CKPT_HEADER.pack(
            CHECKPOINT_MAGIC, CHECKPOINT_VERSION, p.in_dim, p.n_filters, p.kernel_width, float(model.alpha), flags
        )
    )
    f.write(np.ascontiguousarray(p.conv_filters, dtype="<f4").tobytes())
    f.write(np.ascontiguousarray(p.conv_bias, dtype="<f4").tobytes())
    if flags & FLAG_FINETUNE:
        emb = model.embeddings if model.embeddings is not None else np.zeros((0, p.in_dim))
        f.write(struct.pack("<I", len(model.vocab)))
        for token, row in zip(model.vocab, emb):
            raw = token.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(np.asarray(row, dtype="<f4").tobytes())


class CheckpointError(ValueError):
    pass


def _take(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def read_checkpoint(f: BinaryIO) -> Model:
    magic, version, dim, n_filters, width, alpha, flags = _CKPT_HEADER.unpack(_take(f, _CKPT_HEADER.size))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    w = np.frombuffer(_take(f, 4 * n_filters * width * dim), dtype="<f4").reshape(n_filters, width, dim)
    b = np.frombuffer(_take(f, 4 * n_filters), dtype="<f4")
    model = Model(EncoderParams(w.astype(np.float64), b.astype(np.float64)), alpha, bool(flags & FLAG_FINETUNE))
    if model.finetune_embeddings:
        (n,) = struct.unpack("<I", _take(f, 4))
        rows = np.zeros((n, dim))
        for i in range(n):
            (length,) = struct.unpack("<I", _take(f, 4))
            model.vocab.append(_take(f, length).decode("utf-8"))
            rows[i] = np.frombuffer(_take(f, 4 * dim), dtype="<f4")
        model.embeddings = rows
    if f.read(1):
        raise CheckpointError("trailing bytes after checkpoint body")
    return model


def save_checkpoint(model: Model, path) -> None:
    buf = io.BytesIO()
    write_checkpoint(model, buf)
    write_atomic(path, buf.getvalue())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        return read_checkpoint(f)
