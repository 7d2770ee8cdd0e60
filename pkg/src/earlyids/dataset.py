"""Prepared samples, datasets, batches and the on-disk prepared-dataset container."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError, FormatError, IntegrityError

UNLABELED = 0xFFFF
DATASET_MAGIC = b"EIDS"
DATASET_VERSION = 1


@dataclass(frozen=True, eq=False)
class PreparedSample:
    """A flow in model-ready form.

    Packet bytes are kept as ``uint8`` with shape ``(n, d)``; the normalized,
    zero-padded views ``F``, ``T`` and ``mask`` are built on request so that
    subflows and oversampled duplicates can share storage with their source.
    ``origin`` identifies the captured flow a sample descends from.
    """

    packets: np.ndarray
    times: np.ndarray
    label: int
    N: int = 30
    origin: int = -1

    def __post_init__(self):
        n = len(self.times)
        if n < 1 or self.packets.ndim != 2 or self.packets.shape[0] != n:
            raise DataError(f"sample needs 1..N packets with matching timestamps, got {self.packets.shape}")
        if n > self.N:
            raise DataError(f"sample length {n} exceeds N={self.N}")
        if self.times[0] != 0.0 or np.any(np.diff(self.times) < 0):
            raise DataError("timestamps must start at 0 and be non-decreasing")

    @property
    def n(self) -> int:
        return len(self.times)

    @property
    def d(self) -> int:
        return self.packets.shape[1]

    @property
    def F(self) -> np.ndarray:
        out = np.zeros((self.N, self.d))
        out[: self.n] = self.packets / 255.0
        return out

    @property
    def T(self) -> np.ndarray:
        out = np.zeros(self.N)
        out[: self.n] = self.times
        return out

    @property
    def mask(self) -> np.ndarray:
        out = np.zeros(self.N)
        out[: self.n] = 1.0
        return out

    def prefix(self, k: int) -> "PreparedSample":
        """First ``k`` packets; shares memory with ``self``."""
        if not 1 <= k <= self.n:
            raise DataError(f"prefix length {k} outside [1, {self.n}]")
        return PreparedSample(self.packets[:k], self.times[:k], self.label, self.N, self.origin)


@dataclass
class Batch:
    """Stacked float arrays for a group of samples."""

    F: np.ndarray       # (B, N, d)
    T: np.ndarray       # (B, N)
    mask: np.ndarray    # (B, N)
    n: np.ndarray       # (B,)
    labels: np.ndarray  # (B,)

    def __len__(self) -> int:
        return len(self.n)

    @classmethod
    def from_samples(cls, samples: Sequence[PreparedSample]) -> "Batch":
        if not samples:
            raise DataError("empty batch")
        N, d = samples[0].N, samples[0].d
        B = len(samples)
        F = np.zeros((B, N, d))
        T = np.zeros((B, N))
        mask = np.zeros((B, N))
        n = np.zeros(B, dtype=np.int64)
        labels = np.zeros(B, dtype=np.int64)
        for b, s in enumerate(samples):
            k = s.n
            F[b, :k] = s.packets
            T[b, :k] = s.times
            mask[b, :k] = 1.0
            n[b] = k
            labels[b] = s.label
        F /= 255.0
        return cls(F, T, mask, n, labels)

    def copy(self) -> "Batch":
        return Batch(self.F.copy(), self.T.copy(), self.mask.copy(), self.n.copy(), self.labels.copy())

    def take(self, idx) -> "Batch":
        return Batch(self.F[idx], self.T[idx], self.mask[idx], self.n[idx], self.labels[idx])


@dataclass
class Dataset:
    class_names: list[str]
    samples: list[PreparedSample] = field(default_factory=list)
    d: int = 448
    N: int = 30

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def C(self) -> int:
        return len(self.class_names)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.C) if self.samples else np.zeros(self.C, dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(list(self.class_names), [self.samples[i] for i in indices], self.d, self.N)

    def with_samples(self, samples: list[PreparedSample]) -> "Dataset":
        return Dataset(list(self.class_names), samples, self.d, self.N)

    def batch(self, indices: Optional[Sequence[int]] = None) -> Batch:
        if indices is None:
            return Batch.from_samples(self.samples)
        return Batch.from_samples([self.samples[i] for i in indices])


# ---------------------------------------------------------------------------
# binary container
#
#   magic "EIDS" | u16 version | u16 C | u16 d | u16 N
#   C x (u16 len, utf-8 name)
#   u32 flow count
#   per flow: u16 label | u16 n | n x f64 timestamps | n*d bytes
# all integers little-endian


def save_dataset(ds: Dataset, path) -> None:
    parts = [DATASET_MAGIC, struct.pack("<HHHH", DATASET_VERSION, ds.C, ds.d, ds.N)]
    for name in ds.class_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    parts.append(struct.pack("<I", len(ds)))
    for s in ds.samples:
        if s.d != ds.d:
            raise DataError(f"sample packet length {s.d} != dataset d={ds.d}")
        parts.append(struct.pack("<HH", s.label, s.n))
        parts.append(np.ascontiguousarray(s.times, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(s.packets, dtype=np.uint8).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path) -> Dataset:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if buf[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a prepared dataset")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise IntegrityError(f"{path}: truncated at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    version, C, d, N = struct.unpack("<HHHH", take(8))
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    names = []
    for _ in range(C):
        (length,) = struct.unpack("<H", take(2))
        names.append(take(length).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    samples = []
    for i in range(count):
        label, n = struct.unpack("<HH", take(4))
        if n < 1 or n > N:
            raise IntegrityError(f"{path}: flow {i} has length {n} outside [1, {N}]")
        if label != UNLABELED and label >= C:
            raise IntegrityError(f"{path}: flow {i} label {label} >= C={C}")
        times = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64)
        packets = np.frombuffer(take(n * d), dtype=np.uint8).reshape(n, d).copy()
        samples.append(PreparedSample(packets, times, label, N, origin=i))
    if pos != len(buf):
        raise IntegrityError(f"{path}: {len(buf) - pos} trailing bytes")
    return Dataset(names, samples, d, N)


def export_jsonl(ds: Dataset, path) -> None:
    """Human-inspectable dump: one JSON object per flow, packets hex-encoded."""
    with Path(path).open("w") as fh:
        for i, s in enumerate(ds.samples):
            label = None if s.label == UNLABELED else ds.class_names[s.label]
            rec = {
                "index": i,
                "label": label,
                "n": s.n,
                "timestamps": [float(t) for t in s.times],
                "packets": [bytes(row).hex() for row in s.packets],
            }
            fh.write(json.dumps(rec) + "\n")
