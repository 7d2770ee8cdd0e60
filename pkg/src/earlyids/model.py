"""Minimal Transformer-encoder flow classifier in plain numpy.

Forward and reverse passes are written out by hand and run on batches of
shape ``(B, N, d)``. Everything is float64 so gradients can be checked
against central finite differences.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import Batch, PreparedSample
from .encoding import EncodingKind, additive_pe, fourier_init, fourier_pe_grad, positions_for, rope_angles, rope_apply
from .errors import ContractError, FormatError, IntegrityError, TrainingDivergedError

Params = dict[str, np.ndarray]

MODEL_MAGIC = b"EIDM"
MODEL_VERSION = 1
PE_FREQS = "pe.freqs"


@dataclass(frozen=True)
class ModelConfig:
    C: int
    d: int = 448
    N: int = 30
    d_m: int = 8
    L: int = 1
    h: int = 4
    d_h: int = 8
    d_ff: int = 16
    p_drop: float = 0.1
    encoding: EncodingKind = EncodingKind.TA_SINUSOIDAL
    attn_dropout: bool = True
    time_scale: float = 1.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "encoding", EncodingKind.parse(self.encoding))
        for name in ("C", "d", "N", "d_m", "L", "h", "d_h", "d_ff"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if self.d_m % 2 or self.d_h % 2:
            raise ContractError("d_m and d_h must be even")
        if not 0.0 <= self.p_drop < 1.0:
            raise ContractError("p_drop must lie in [0, 1)")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["encoding"] = self.encoding.value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


def param_count(cfg: ModelConfig) -> int:
    """Trainable parameters of the base model, positional encoding excluded."""
    d_m, L, h, d_h, d_ff, d, C = cfg.d_m, cfg.L, cfg.h, cfg.d_h, cfg.d_ff, cfg.d, cfg.C
    return d_m * (2 * L * (2 * h * d_h + d_ff + 3) + d + C + 1) + L * (3 * h * d_h + d_ff) + C


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    hd = cfg.h * cfg.d_h
    shapes = {"in.W": (cfg.d, cfg.d_m), "in.b": (cfg.d_m,)}
    for l in range(cfg.L):
        p = f"l{l}."
        shapes.update({
            p + "Wq": (cfg.d_m, hd), p + "bq": (hd,),
            p + "Wk": (cfg.d_m, hd), p + "bk": (hd,),
            p + "Wv": (cfg.d_m, hd), p + "bv": (hd,),
            p + "Wo": (hd, cfg.d_m), p + "bo": (cfg.d_m,),
            p + "ln1.g": (cfg.d_m,), p + "ln1.b": (cfg.d_m,),
            p + "W1": (cfg.d_m, cfg.d_ff), p + "b1": (cfg.d_ff,),
            p + "W2": (cfg.d_ff, cfg.d_m), p + "b2": (cfg.d_m,),
            p + "ln2.g": (cfg.d_m,), p + "ln2.b": (cfg.d_m,),
        })
    shapes.update({"head.W": (cfg.d_m, cfg.C), "head.b": (cfg.C,)})
    if cfg.encoding.fourier:
        shapes[PE_FREQS] = (cfg.d_m // 2,)
    return shapes


def census(params: Params) -> dict[str, int]:
    """Sizes per array, with ``base`` (encoding excluded) and ``encoding`` totals."""
    sizes = {k: int(v.size) for k, v in params.items()}
    enc = sizes.get(PE_FREQS, 0)
    return {**sizes, "base": sum(sizes.values()) - enc, "encoding": enc}


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    """Glorot-uniform matrices, zero biases, unit norm scales."""
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == PE_FREQS:
            params[name] = fourier_init(cfg.d_m)
        elif len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
        elif leaf == "g":
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


# ---------------------------------------------------------------------------
# forward / backward

def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _layer_norm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_back(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _dropout_mask(rng, shape, p):
    keep = 1.0 - p
    return (rng.random(shape) < keep) / keep


@dataclass
class LayerTrace:
    H_in: np.ndarray
    Qr: np.ndarray
    Kr: np.ndarray
    V: np.ndarray
    A: np.ndarray
    Ad: np.ndarray
    O: np.ndarray
    ln1: tuple
    H1: np.ndarray
    F1: np.ndarray
    G: np.ndarray
    ln2: tuple
    drop_attn: Optional[np.ndarray] = None
    drop_attn_out: Optional[np.ndarray] = None
    drop_ffn_out: Optional[np.ndarray] = None


@dataclass
class ForwardTrace:
    X: np.ndarray
    positions: np.ndarray
    mask: np.ndarray
    n: np.ndarray
    H0: np.ndarray
    layers: list[LayerTrace] = field(default_factory=list)
    rope: Optional[tuple] = None
    pooled: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None
    param_keys: tuple = ()


def _as_batch(x) -> tuple[Batch, bool]:
    if isinstance(x, PreparedSample):
        return Batch.from_samples([x]), True
    return x, False


def forward(params: Params, cfg: ModelConfig, data, training: bool = False,
            rng: Optional[np.random.Generator] = None):
    """Class probabilities for a :class:`Batch` (``(B, C)``) or one sample (``(C,)``).

    Returns ``(probs, trace)``; ``trace`` is ``None`` unless ``training``.
    Dropout is active only when training and needs ``rng``.
    """
    batch, single = _as_batch(data)
    X, M = batch.F, batch.mask
    if X.ndim != 3 or X.shape[1:] != (cfg.N, cfg.d) or M.shape != X.shape[:2]:
        raise ContractError(f"batch shape {X.shape} does not match N={cfg.N}, d={cfg.d}")
    B, N, _ = X.shape
    n = M.sum(axis=1)
    if np.any(n < 1):
        raise ContractError("every sample needs at least one valid position")
    drop = training and cfg.p_drop > 0.0
    if drop and rng is None:
        raise ContractError("training forward with dropout needs an rng")

    enc = cfg.encoding
    pos = positions_for(enc, batch.T, cfg.time_scale)
    H0 = X @ params["in.W"] + params["in.b"]
    H = H0
    if enc.additive:
        H = H0 + additive_pe(enc, pos, cfg.d_m, params.get(PE_FREQS))
    rope = None
    if enc.rotary:
        cos, sin = rope_angles(pos, cfg.d_h)
        rope = (cos[:, None], sin[:, None])          # (B, 1, N, d_h/2)

    key_invalid = (M == 0)[:, None, None, :]          # (B, 1, 1, N)
    scale = 1.0 / np.sqrt(cfg.d_h)
    trace = ForwardTrace(X, pos, M, n, H0, rope=rope, param_keys=tuple(sorted(params))) if training else None

    for l in range(cfg.L):
        p = f"l{l}."

        def heads(W, b):
            return (H @ params[p + W] + params[p + b]).reshape(B, N, cfg.h, cfg.d_h).transpose(0, 2, 1, 3)

        Q, K, V = heads("Wq", "bq"), heads("Wk", "bk"), heads("Wv", "bv")
        if rope is not None:
            Q = rope_apply(Q, *rope)
            K = rope_apply(K, *rope)
        S = np.where(key_invalid, -np.inf, (Q @ K.transpose(0, 1, 3, 2)) * scale)
        A = _softmax(S)
        Da = _dropout_mask(rng, A.shape, cfg.p_drop) if drop and cfg.attn_dropout else None
        Ad = A * Da if Da is not None else A
        O = (Ad @ V).transpose(0, 2, 1, 3).reshape(B, N, cfg.h * cfg.d_h)
        Z = O @ params[p + "Wo"] + params[p + "bo"]
        D1 = _dropout_mask(rng, Z.shape, cfg.p_drop) if drop else None
        if D1 is not None:
            Z = Z * D1
        H1, ln1 = _layer_norm(H + Z, params[p + "ln1.g"], params[p + "ln1.b"], cfg.ln_eps)
        F1 = H1 @ params[p + "W1"] + params[p + "b1"]
        G = np.maximum(F1, 0.0)
        F2 = G @ params[p + "W2"] + params[p + "b2"]
        D2 = _dropout_mask(rng, F2.shape, cfg.p_drop) if drop else None
        if D2 is not None:
            F2 = F2 * D2
        H2, ln2 = _layer_norm(H1 + F2, params[p + "ln2.g"], params[p + "ln2.b"], cfg.ln_eps)
        if training:
            trace.layers.append(LayerTrace(H, Q, K, V, A, Ad, O, ln1, H1, F1, G, ln2, Da, D1, D2))
        H = H2

    pooled = (H * M[..., None]).sum(axis=1) / n[:, None]
    logits = pooled @ params["head.W"] + params["head.b"]
    probs = _softmax(logits)
    if training:
        trace.pooled, trace.logits = pooled, logits
    return (probs[0] if single else probs), trace


def predict_proba(params: Params, cfg: ModelConfig, data) -> np.ndarray:
    return forward(params, cfg, data, training=False)[0]


def backward(trace: ForwardTrace, params: Params, cfg: ModelConfig, dlogits: np.ndarray) -> Params:
    """Gradients of the loss for every array in ``params`` given dL/dlogits ``(B, C)``."""
    if trace is None or trace.param_keys != tuple(sorted(params)) or len(trace.layers) != cfg.L:
        raise ContractError("trace was not produced by a training forward of these params")
    dlogits = np.asarray(dlogits, dtype=np.float64).reshape(trace.logits.shape)
    M, n = trace.mask, trace.n
    B, N = M.shape
    grads: Params = {}
    grads["head.W"] = trace.pooled.T @ dlogits
    grads["head.b"] = dlogits.sum(axis=0)
    dpooled = dlogits @ params["head.W"].T
    dH = M[..., None] * (dpooled / n[:, None])[:, None, :]
    scale = 1.0 / np.sqrt(cfg.d_h)

    def flat(x):
        return x.reshape(-1, x.shape[-1])

    for l in reversed(range(cfg.L)):
        p = f"l{l}."
        t = trace.layers[l]
        dR2, grads[p + "ln2.g"], grads[p + "ln2.b"] = _layer_norm_back(dH, params[p + "ln2.g"], t.ln2)
        dF2 = dR2 * t.drop_ffn_out if t.drop_ffn_out is not None else dR2
        grads[p + "W2"] = flat(t.G).T @ flat(dF2)
        grads[p + "b2"] = flat(dF2).sum(axis=0)
        dF1 = (dF2 @ params[p + "W2"].T) * (t.F1 > 0)
        grads[p + "W1"] = flat(t.H1).T @ flat(dF1)
        grads[p + "b1"] = flat(dF1).sum(axis=0)
        dH1 = dR2 + dF1 @ params[p + "W1"].T

        dR1, grads[p + "ln1.g"], grads[p + "ln1.b"] = _layer_norm_back(dH1, params[p + "ln1.g"], t.ln1)
        dZ = dR1 * t.drop_attn_out if t.drop_attn_out is not None else dR1
        grads[p + "Wo"] = flat(t.O).T @ flat(dZ)
        grads[p + "bo"] = flat(dZ).sum(axis=0)
        dO = (dZ @ params[p + "Wo"].T).reshape(B, N, cfg.h, cfg.d_h).transpose(0, 2, 1, 3)
        dAd = dO @ t.V.transpose(0, 1, 3, 2)
        dV = t.Ad.transpose(0, 1, 3, 2) @ dO
        dA = dAd * t.drop_attn if t.drop_attn is not None else dAd
        dS = t.A * (dA - (dA * t.A).sum(axis=-1, keepdims=True)) * scale
        dQ = dS @ t.Kr
        dK = dS.transpose(0, 1, 3, 2) @ t.Qr
        if trace.rope is not None:
            dQ = rope_apply(dQ, *trace.rope, inverse=True)
            dK = rope_apply(dK, *trace.rope, inverse=True)

        dH = dR1
        Hin = flat(t.H_in)
        for W, b, dX in (("Wq", "bq", dQ), ("Wk", "bk", dK), ("Wv", "bv", dV)):
            dX = dX.transpose(0, 2, 1, 3).reshape(B, N, cfg.h * cfg.d_h)
            grads[p + W] = Hin.T @ flat(dX)
            grads[p + b] = flat(dX).sum(axis=0)
            dH = dH + dX @ params[p + W].T

    grads["in.W"] = flat(trace.X).T @ flat(dH)
    grads["in.b"] = flat(dH).sum(axis=0)
    if PE_FREQS in params:
        grads[PE_FREQS] = fourier_pe_grad(trace.positions, params[PE_FREQS], dH)
    return grads


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Params, grads: Params, state: AdamState, lr: float):
    """Bias-corrected Adam, updating ``params`` and ``state`` in place."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for {k}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# serialization
#
#   "EIDM" | u16 version | u32 header length | JSON header | f64 arrays | u32 crc32
# The header records config, class names and the (name, shape) of each array
# in storage order.

def save_model(params: Params, cfg: ModelConfig, class_names, path) -> None:
    if len(class_names) != cfg.C:
        raise IntegrityError(f"{len(class_names)} class names for C={cfg.C}")
    names = sorted(params)
    header = {
        "config": cfg.to_dict(),
        "class_names": list(class_names),
        "arrays": [{"name": k, "shape": list(params[k].shape)} for k in names],
    }
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(params[k], dtype="<f8").tobytes() for k in names)
    blob = MODEL_MAGIC + struct.pack("<HI", MODEL_VERSION, len(hjson)) + hjson + body
    Path(path).write_bytes(blob + struct.pack("<I", zlib.crc32(blob)))


def load_model(path):
    """Return ``(params, cfg, class_names)``; raises on any inconsistency."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if buf[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: not a model file")
    if len(buf) < 14:
        raise IntegrityError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    start = 10 + hlen
    if start + 4 > len(buf):
        raise IntegrityError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(buf[10:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupted header") from exc
    sizes = [int(np.prod(a["shape"], dtype=np.int64)) for a in header["arrays"]]
    expected = start + 8 * sum(sizes) + 4
    if len(buf) != expected:
        raise IntegrityError(f"{path}: expected {expected} bytes, found {len(buf)}")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise IntegrityError(f"{path}: checksum mismatch")
    cfg = ModelConfig.from_dict(header["config"])
    class_names = header["class_names"]
    if len(class_names) != cfg.C:
        raise IntegrityError(f"{path}: config C={cfg.C} but {len(class_names)} class names")
    params: Params = {}
    pos = start
    for a, size in zip(header["arrays"], sizes):
        params[a["name"]] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(a["shape"]).copy()
        pos += 8 * size
    want = param_shapes(cfg)
    got = {k: tuple(v.shape) for k, v in params.items()}
    if got != want:
        raise IntegrityError(f"{path}: array table does not match config")
    return params, cfg, class_names
