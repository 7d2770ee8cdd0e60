"""Index-based and time-aware positional encodings.

Additive kinds (sinusoidal, Fourier) are added to the projected input.
Rotary kinds rotate query/key pairs inside attention. A time-aware kind
uses each packet's arrival time (seconds since the first packet) where the
index kind uses its integer position.
"""

from __future__ import annotations

import enum

import numpy as np

from .errors import ContractError

BASE = 10000.0


class EncodingKind(str, enum.Enum):
    NONE = "none"
    SINUSOIDAL = "sinusoidal"
    FOURIER = "fourier"
    ROPE = "rope"
    TA_SINUSOIDAL = "ta-sinusoidal"
    TA_FOURIER = "ta-fourier"
    TA_ROPE = "ta-rope"

    @property
    def time_aware(self) -> bool:
        return self.value.startswith("ta-")

    @property
    def rotary(self) -> bool:
        return self in (EncodingKind.ROPE, EncodingKind.TA_ROPE)

    @property
    def fourier(self) -> bool:
        return self in (EncodingKind.FOURIER, EncodingKind.TA_FOURIER)

    @property
    def additive(self) -> bool:
        return self not in (EncodingKind.NONE, EncodingKind.ROPE, EncodingKind.TA_ROPE)

    @classmethod
    def parse(cls, text) -> "EncodingKind":
        if isinstance(text, cls):
            return text
        key = str(text).strip().lower().replace("_", "-")
        aliases = {"tasinusoidal": "ta-sinusoidal", "tafourier": "ta-fourier", "tarope": "ta-rope",
                   "sin": "sinusoidal", "ta-sin": "ta-sinusoidal"}
        try:
            return cls(aliases.get(key, key))
        except ValueError as exc:
            raise ContractError(f"unknown encoding {text!r}; choose from {[k.value for k in cls]}") from exc


TIME_AWARE = (EncodingKind.TA_SINUSOIDAL, EncodingKind.TA_FOURIER, EncodingKind.TA_ROPE)


def positions_for(kind: EncodingKind, T: np.ndarray, time_scale: float = 1.0) -> np.ndarray:
    """Position argument per row: timestamps for TA kinds, 0..N-1 otherwise.

    ``T`` may be ``(N,)`` or batched ``(B, N)``.
    """
    if kind.time_aware:
        return np.asarray(T, dtype=np.float64) * time_scale
    T = np.asarray(T)
    return np.broadcast_to(np.arange(T.shape[-1], dtype=np.float64), T.shape)


def sinusoidal_frequencies(d_m: int) -> np.ndarray:
    i = np.arange(d_m // 2)
    return BASE ** (-2.0 * i / d_m)


def _interleave(angles: np.ndarray) -> np.ndarray:
    out = np.empty(angles.shape[:-1] + (2 * angles.shape[-1],))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def sinusoidal_pe(positions, d_m: int) -> np.ndarray:
    if d_m % 2:
        raise ContractError("d_m must be even")
    positions = np.asarray(positions, dtype=np.float64)
    return _interleave(positions[..., None] * sinusoidal_frequencies(d_m))


def fourier_init(d_m: int) -> np.ndarray:
    """Frequencies that make the Fourier encoding equal the sinusoidal one."""
    return sinusoidal_frequencies(d_m) / (2.0 * np.pi)


def fourier_pe(positions, freqs: np.ndarray, d_m: int) -> np.ndarray:
    freqs = np.asarray(freqs, dtype=np.float64)
    if d_m % 2 or freqs.shape != (d_m // 2,):
        raise ContractError(f"need d_m even and {d_m // 2} frequencies, got {freqs.shape}")
    positions = np.asarray(positions, dtype=np.float64)
    return _interleave(2.0 * np.pi * positions[..., None] * freqs)


def fourier_pe_grad(positions, freqs: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(grad_out * fourier_pe(positions, freqs))`` w.r.t. ``freqs``."""
    positions = np.asarray(positions, dtype=np.float64)[..., None]
    angles = 2.0 * np.pi * positions * freqs
    dang = 2.0 * np.pi * positions
    g = grad_out[..., 0::2] * np.cos(angles) * dang - grad_out[..., 1::2] * np.sin(angles) * dang
    return g.reshape(-1, len(freqs)).sum(axis=0)


def rope_frequencies(d_h: int) -> np.ndarray:
    i = np.arange(d_h // 2)
    return BASE ** (-2.0 * i / d_h)


def rope_angles(positions, d_h: int):
    """cos/sin tables with shape ``positions.shape + (d_h/2,)``."""
    ang = np.asarray(positions, dtype=np.float64)[..., None] * rope_frequencies(d_h)
    return np.cos(ang), np.sin(ang)


def rope_apply(x: np.ndarray, cos: np.ndarray, sin: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Rotate consecutive pairs of the last axis. ``inverse`` applies the transpose."""
    if inverse:
        sin = -sin
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def rope_rotate(vectors, positions, d_h: int) -> np.ndarray:
    if d_h % 2:
        raise ContractError("d_h must be even")
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.shape[-1] != d_h:
        raise ContractError(f"last axis {vectors.shape[-1]} != d_h={d_h}")
    cos, sin = rope_angles(positions, d_h)
    return rope_apply(vectors, cos, sin)


def additive_pe(kind: EncodingKind, positions, d_m: int, freqs=None) -> np.ndarray:
    if kind.fourier:
        return fourier_pe(positions, freqs, d_m)
    return sinusoidal_pe(positions, d_m)


def apply_input_encoding(kind, H: np.ndarray, T, freqs=None, time_scale: float = 1.0) -> np.ndarray:
    """``H`` plus the additive encoding for ``kind``; unchanged for ``none``.

    Rotary kinds act inside attention and are rejected here.
    """
    kind = EncodingKind.parse(kind)
    if kind.rotary:
        raise ContractError(f"{kind.value} is applied inside attention, not to the input")
    if kind is EncodingKind.NONE:
        return H
    pos = positions_for(kind, T, time_scale)
    return H + additive_pe(kind, pos, H.shape[-1], freqs)
