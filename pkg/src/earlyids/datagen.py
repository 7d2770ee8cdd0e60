"""Synthetic labeled flows with controllable timing and payload statistics."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .dataset import Dataset, PreparedSample
from .errors import ConfigError
from .rng import substream

HEADER_LEN = 40
MIN_GAP = 1e-6
ARRIVAL_KINDS = ("constant", "exponential", "bursty", "periodic")


@dataclass
class TrafficProfile:
    """How one class of flows looks.

    ``arrival`` selects the gap model: ``constant`` (``dt``), ``exponential``
    (mean ``dt``), ``bursty`` (gaps of ``dt`` with probability
    ``1 - long_prob``, otherwise ``long_dt``) or ``periodic`` (``dt`` plus
    uniform jitter of ``+-jitter``). Payloads are a 40-byte header drawn from
    ``template`` followed by ``payload_len`` fill bytes, each random with
    probability ``entropy`` and otherwise taken from the template.
    """

    name: str
    count: int = 100
    min_len: int = 5
    max_len: int = 30
    arrival: str = "exponential"
    dt: float = 1.0
    long_dt: float = 5.0
    long_prob: float = 0.1
    jitter: float = 0.0
    template: int = 0
    entropy: float = 1.0
    payload_min: int = 60
    payload_max: int = 448

    def validate(self, N: int) -> None:
        if self.arrival not in ARRIVAL_KINDS:
            raise ConfigError(f"{self.name}: arrival must be one of {ARRIVAL_KINDS}")
        if self.dt <= 0 or self.long_dt <= 0 or self.jitter < 0:
            raise ConfigError(f"{self.name}: gap parameters must be positive")
        if not 1 <= self.min_len <= self.max_len <= N:
            raise ConfigError(f"{self.name}: lengths must satisfy 1 <= min <= max <= N={N}")
        if self.arrival == "periodic" and self.jitter >= self.dt:
            raise ConfigError(f"{self.name}: periodic jitter must be smaller than the period")
        if not 0.0 <= self.entropy <= 1.0 or not 0.0 <= self.long_prob <= 1.0:
            raise ConfigError(f"{self.name}: entropy and long_prob must lie in [0, 1]")
        if self.count < 1 or not 0 <= self.payload_min <= self.payload_max:
            raise ConfigError(f"{self.name}: bad count or payload bounds")


def _gaps(p: TrafficProfile, k: int, rng: np.random.Generator) -> np.ndarray:
    if p.arrival == "constant":
        return np.full(k, p.dt)
    if p.arrival == "exponential":
        return np.maximum(rng.exponential(p.dt, k), MIN_GAP)
    if p.arrival == "bursty":
        return np.where(rng.random(k) < p.long_prob, p.long_dt, p.dt)
    return p.dt + rng.uniform(-p.jitter, p.jitter, k)


def template_bytes(template: int, d: int) -> np.ndarray:
    return substream(template, "payload-template").integers(0, 256, d, dtype=np.uint8)


def _payloads(p: TrafficProfile, n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    tpl = template_bytes(p.template, d)
    rows = np.zeros((n, d), dtype=np.uint8)
    for i in range(n):
        length = min(HEADER_LEN + int(rng.integers(p.payload_min, p.payload_max + 1)), d)
        row = tpl[:length].copy()
        fill = slice(min(HEADER_LEN, length), length)
        noisy = rng.random(length - fill.start) < p.entropy
        row[fill][noisy] = rng.integers(0, 256, int(noisy.sum()), dtype=np.uint8)
        rows[i, :length] = row
    return rows


def generate_class(p: TrafficProfile, label: int, seed: int, d: int = 448, N: int = 30,
                   origin_base: int = 0) -> list[PreparedSample]:
    p.validate(N)
    rng = substream(seed, "datagen", p.name)
    out = []
    for j in range(p.count):
        n = int(rng.integers(p.min_len, p.max_len + 1))
        times = np.concatenate([[0.0], np.cumsum(_gaps(p, n - 1, rng))])
        out.append(PreparedSample(_payloads(p, n, d, rng), times, label, N, origin_base + j))
    return out


def generate(profiles: Sequence[TrafficProfile], seed: int, d: int = 448, N: int = 30) -> Dataset:
    """Deterministic labeled dataset, one class per profile."""
    if len(profiles) < 2:
        raise ConfigError("need at least two profiles")
    names = [p.name for p in profiles]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate class names in {names}")
    samples: list[PreparedSample] = []
    for label, p in enumerate(profiles):
        samples.extend(generate_class(p, label, seed, d, N, origin_base=len(samples)))
    return Dataset(names, samples, d, N)


def timing_only_pair(seed: int, flows_per_class: int = 200, d: int = 448, N: int = 30,
                     fast_dt: float = 0.01, slow_dt: float = 2.0, payload_max: int = 16) -> Dataset:
    """Two classes with identical payload statistics that differ only in timing.

    Class 0 is a fast, brute-force-like sender; class 1 is slow benign traffic.
    """
    if flows_per_class < 50:
        raise ConfigError("timing_only_pair needs at least 50 flows per class")
    common = dict(count=flows_per_class, min_len=5, max_len=min(30, N), arrival="exponential",
                  template=7, entropy=1.0, payload_min=0, payload_max=payload_max)
    return generate([TrafficProfile("bruteforce", dt=fast_dt, **common),
                     TrafficProfile("benign", dt=slow_dt, **common)], seed, d, N)


def load_profiles(path) -> list[TrafficProfile]:
    """Read a YAML document ``{profiles: [{name: ..., ...}, ...]}``."""
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read profile file {path}: {exc}") from exc
    items = doc.get("profiles") if isinstance(doc, dict) else doc
    if not isinstance(items, list):
        raise ConfigError(f"{path}: expected a list of profiles")
    try:
        return [TrafficProfile(**item) for item in items]
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
