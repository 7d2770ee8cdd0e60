"""Offline (subflows, hybrid oversampling) and online (per-batch) augmentation."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import Batch, Dataset, PreparedSample
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)


@dataclass
class AugmentConfig:
    jitter_fraction: float = 0.7
    scales: tuple = (0.5, 0.75, 1.0, 1.25, 1.5)
    drop_coef: float = 0.25
    insert_coef: float = 0.15
    noise_packet_div: int = 3
    noise_byte_div: int = 100
    noise_sigma: float = 0.1
    majority_factor: float = 0.2
    majority_max_k: int = 5
    jitter: bool = True
    scale: bool = True
    drop: bool = True
    insert: bool = True
    noise: bool = True

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        for name in ("jitter_fraction", "drop_coef", "insert_coef", "majority_factor"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.noise_sigma <= 0:
            raise ConfigError("noise_sigma must be positive")
        if not self.scales or min(self.scales) <= 0:
            raise ConfigError("scales must be positive")


def target_density(P: int, C: int) -> int:
    """Per-class target count, 2P/C rounded half up."""
    return int(math.floor(2 * P / C + 0.5))


@dataclass
class ClassStats:
    name: str
    m_c: int
    n_c: float
    m_d: int
    a_c: float
    majority: bool
    m1_c: int = 0
    z_c: float = 0.0
    m2_c: int = 0


# ---------------------------------------------------------------------------
# offline


def log_uniform_cutoff(n: int, rng: np.random.Generator) -> int:
    """Cut-off in [1, n-1], dense near the start of the flow."""
    hi = n - 1
    if hi <= 1:
        return 1
    k = int(round(math.exp(rng.uniform(0.0, math.log(hi)))))
    return min(max(k, 1), hi)


def generate_subflows(ds: Dataset, cfg: AugmentConfig, P: int, rng: np.random.Generator,
                      factors: Optional[Sequence[ClassStats]] = None):
    """Append prefix subflows per class; returns ``(dataset, stats)``.

    With ``factors`` (statistics from a training split) each class reuses the
    given ``a_c`` and majority/minority treatment instead of deriving its own.
    """
    if not len(ds):
        raise DataError("cannot augment an empty dataset")
    labels = ds.labels
    m_d = target_density(P, ds.C)
    out = list(ds.samples)
    stats = []
    for c, name in enumerate(ds.class_names):
        idx = np.flatnonzero(labels == c)
        m_c = len(idx)
        n_c = float(np.mean([ds.samples[i].n for i in idx])) if m_c else 0.0
        if factors is not None:
            a_c, majority = factors[c].a_c, factors[c].majority
        elif m_c and m_c < m_d:
            a_c, majority = min((m_d - m_c) / m_c, n_c - 1.0), False
        else:
            a_c, majority = cfg.majority_factor, True
        a_c = max(a_c, 0.0)
        eligible = [i for i in idx if ds.samples[i].n >= 2]
        if m_c and not eligible:
            log.warning("class %s has only single-packet flows; no subflows generated", name)
        new: list[PreparedSample] = []
        if majority:
            count = min(int(math.floor(a_c * len(eligible) + 0.5)), len(eligible))
            chosen = rng.choice(len(eligible), size=count, replace=False) if count else []
            for j in sorted(chosen):
                s = ds.samples[eligible[j]]
                k = int(rng.integers(1, min(cfg.majority_max_k, s.n - 1) + 1))
                new.append(s.prefix(k))
        else:
            whole, frac = int(math.floor(a_c)), a_c - math.floor(a_c)
            for i in eligible:
                s = ds.samples[i]
                reps = whole + int(rng.random() < frac)
                new.extend(s.prefix(log_uniform_cutoff(s.n, rng)) for _ in range(reps))
        out.extend(new)
        stats.append(ClassStats(name, m_c, n_c, m_d, a_c, majority, m1_c=m_c + len(new)))
    return ds.with_samples(out), stats


def hybrid_oversample(ds: Dataset, stats: Sequence[ClassStats], rng: np.random.Generator) -> Dataset:
    """Duplicate each class up to the largest class size.

    Every sample is copied ``floor(z_c)`` times, then the remaining deficit is
    filled with one extra copy of distinct randomly chosen samples.
    Duplicates share storage with their source.
    """
    labels = ds.labels
    counts = np.bincount(labels, minlength=ds.C)
    if np.any(counts == 0):
        empty = [ds.class_names[c] for c in np.flatnonzero(counts == 0)]
        raise DataError(f"cannot oversample: empty classes {empty}")
    m_max = int(counts.max())
    out: list[PreparedSample] = []
    for c in range(ds.C):
        members = [ds.samples[i] for i in np.flatnonzero(labels == c)]
        m1 = len(members)
        deficit = m_max - m1
        z = deficit / m1
        r = deficit // m1
        extra = deficit - r * m1          # == round((z - r) * m1), exactly
        picks = rng.choice(m1, size=extra, replace=False) if extra else []
        out.extend(members)
        for _ in range(r):
            out.extend(members)
        out.extend(members[j] for j in sorted(picks))
        st = stats[c]
        st.m1_c, st.z_c, st.m2_c = m1, z, m1 * (1 + r) + extra
    return ds.with_samples(out)


def write_stats(stats: Sequence[ClassStats], path) -> None:
    """Audit table: CSV when ``path`` ends in .csv, JSON otherwise."""
    path = Path(path)
    rows = [asdict(s) | {"deficit": s.m_d - s.m_c} for s in stats]
    if path.suffix == ".csv":
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["name", "m_c", "n_c", "m_d", "deficit", "a_c", "majority",
                                               "m1_c", "z_c", "m2_c"])
            w.writeheader()
            w.writerows(rows)
    else:
        path.write_text(json.dumps(rows, indent=2))


# ---------------------------------------------------------------------------
# online


def jitter_times(t: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Perturb each timestamp within ``fraction`` of its smallest neighbour gap.

    Applied left to right against the already-perturbed predecessor so
    neighbours can never cross. The result is re-zeroed.
    """
    t = t.copy()
    n = len(t)
    for i in range(n):
        gaps = []
        if i > 0:
            gaps.append(t[i] - t[i - 1])
        if i < n - 1:
            gaps.append(t[i + 1] - t[i])
        if not gaps:
            continue
        bound = fraction * min(gaps)
        if bound > 0:
            t[i] += rng.uniform(-bound, bound)
    return t - t[0]


def _augment_flow(rows: np.ndarray, t: np.ndarray, N: int, cfg: AugmentConfig, rng):
    n0 = len(t)
    if cfg.jitter:
        t = jitter_times(t, cfg.jitter_fraction, rng)
    if cfg.scale:
        t = t * cfg.scales[int(rng.integers(len(cfg.scales)))]
    if cfg.drop:
        k = int(rng.integers(0, max(0, math.floor(cfg.drop_coef * n0 - 0.5)) + 1))
        if k:
            keep = np.setdiff1d(np.arange(len(t)), rng.choice(len(t), size=k, replace=False))
            rows, t = rows[keep], t[keep]
            t = t - t[0]
    if cfg.insert:
        k = int(rng.integers(0, max(0, math.floor(cfg.insert_coef * n0 - 0.5)) + 1))
        k = min(k, N - len(t))
        for _ in range(k):
            n = len(t)
            slot = int(rng.integers(0, n + 1))
            if slot == 0:
                ts = t[0]
            elif slot == n:
                ts = t[-1]
            else:
                ts = 0.5 * (t[slot - 1] + t[slot])
            t = np.insert(t, slot, ts)
            rows = np.insert(rows, slot, 0.0, axis=0)
    if cfg.noise:
        d = rows.shape[1]
        kp = min(int(rng.integers(0, n0 // cfg.noise_packet_div + 1)), len(t))
        if kp:
            rows = rows.copy()
            for p in rng.choice(len(t), size=kp, replace=False):
                kb = int(rng.integers(0, d // cfg.noise_byte_div + 1))
                if kb:
                    cols = rng.choice(d, size=kb, replace=False)
                    rows[p, cols] = np.clip(rows[p, cols] + rng.normal(0.0, cfg.noise_sigma, kb), 0.0, 1.0)
    return rows, t


def augment_batch(batch: Batch, cfg: AugmentConfig, rng: np.random.Generator) -> Batch:
    """Jitter, scale, drop, insert, noise, in that order, independently per flow."""
    out = batch.copy()
    N = out.F.shape[1]
    for b in range(len(out)):
        n = int(out.n[b])
        rows, t = _augment_flow(out.F[b, :n].copy(), out.T[b, :n].copy(), N, cfg, rng)
        k = len(t)
        out.F[b] = 0.0
        out.F[b, :k] = rows
        out.T[b] = 0.0
        out.T[b, :k] = t
        out.mask[b] = 0.0
        out.mask[b, :k] = 1.0
        out.n[b] = k
    return out
