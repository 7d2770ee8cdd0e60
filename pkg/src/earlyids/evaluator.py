"""Confidence-threshold early-detection evaluation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import Batch, Dataset, PreparedSample
from .model import ModelConfig, Params, forward

DEFAULT_TAU_GRID = tuple(round(0.5 + 0.05 * i, 2) for i in range(10)) + (0.98, 0.99)
BENIGN_NAMES = ("benign", "normal", "background")


@dataclass(frozen=True)
class EarlyDecision:
    flow_id: int
    true_label: int
    predicted: int
    packets_used: int
    confidence: float
    threshold_met: bool


def prefix_probabilities(params: Params, cfg: ModelConfig, sample: PreparedSample) -> np.ndarray:
    """Softmax output for every prefix length 1..min(n, N); shape ``(k_max, C)``.

    Each prefix is an independent forward pass; they are stacked into one
    batch only for speed.
    """
    k_max = min(sample.n, cfg.N)
    prefixes = [sample.prefix(k) for k in range(1, k_max + 1)]
    return forward(params, cfg, Batch.from_samples(prefixes))[0]


def decide_from_probs(probs: np.ndarray, tau: float, flow_id: int = -1, true_label: int = -1) -> EarlyDecision:
    conf = probs.max(axis=1)
    hit = np.flatnonzero(conf >= tau)
    k = int(hit[0]) if len(hit) else len(probs) - 1
    return EarlyDecision(flow_id, true_label, int(np.argmax(probs[k])), k + 1, float(conf[k]), bool(len(hit)))


def decide_early(params: Params, cfg: ModelConfig, sample: PreparedSample, tau: float,
                 flow_id: int = -1) -> EarlyDecision:
    """Add packets until the top-1 confidence reaches ``tau`` (or the flow ends)."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    return decide_from_probs(prefix_probabilities(params, cfg, sample), tau, flow_id, sample.label)


def erde_contribution(kind: str, packets_used: int, o: float, tp_count: int, size: int) -> float:
    if kind == "fp":
        return tp_count / size
    if kind == "fn":
        return 1.0
    if kind == "tp":
        return 1.0 - 1.0 / (1.0 + math.exp(packets_used - o))
    return 0.0


def outcome(true_label: int, predicted: int, benign: Optional[int]) -> str:
    """Benign-vs-attack outcome of one decision: tp, fp, fn or tn."""
    attack_true = true_label != benign
    attack_pred = predicted != benign
    if attack_true:
        return "tp" if attack_pred else "fn"
    return "fp" if attack_pred else "tn"


def erde(decisions: Sequence[EarlyDecision], o: float = 5, benign: Optional[int] = None) -> float:
    """Mean per-flow early risk detection error."""
    if not decisions:
        return 0.0
    kinds = [outcome(d.true_label, d.predicted, benign) for d in decisions]
    tp = kinds.count("tp")
    return float(np.mean([erde_contribution(k, d.packets_used, o, tp, len(decisions))
                          for k, d in zip(kinds, decisions)]))


@dataclass
class EarlyEvalReport:
    tau: float
    accuracy: float
    earliness: int
    earliness_defined: bool
    far: Optional[float]
    fnr: Optional[float]
    erde: dict
    unreached_pct: float
    confusion: list
    class_names: list
    flows: int
    decisions: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {
            "tau": self.tau,
            "accuracy": self.accuracy,
            "earliness": self.earliness,
            "earliness_defined": self.earliness_defined,
            "far": self.far,
            "fnr": self.fnr,
            "erde5": self.erde.get("5"),
            "unreached_pct": self.unreached_pct,
        }

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "decisions"}
        out["decisions"] = [asdict(d) for d in self.decisions]
        return out


def benign_index(class_names: Sequence[str]) -> Optional[int]:
    for i, name in enumerate(class_names):
        if name.lower() in BENIGN_NAMES:
            return i
    return None


def report_from_decisions(decisions: Sequence[EarlyDecision], tau: float, class_names: Sequence[str],
                          N: int, o_values=(5,), benign: Optional[int] = None,
                          include_unreached: bool = True) -> EarlyEvalReport:
    C = len(class_names)
    conf = np.zeros((C, C), dtype=np.int64)
    for d in decisions:
        conf[d.true_label, d.predicted] += 1
    total = len(decisions)
    correct = [d for d in decisions if d.predicted == d.true_label]
    ks = [d.packets_used for d in correct if include_unreached or d.threshold_met]
    accuracy = 100.0 * len(correct) / total if total else 0.0
    far = fnr = None
    if benign is not None:
        n_benign = conf[benign].sum()
        n_attack = conf.sum() - n_benign
        if n_benign:
            far = 100.0 * (n_benign - conf[benign, benign]) / n_benign
        if n_attack:
            fnr = 100.0 * (conf[:, benign].sum() - conf[benign, benign]) / n_attack
    return EarlyEvalReport(
        tau=tau,
        accuracy=accuracy,
        earliness=max(ks) if ks else N,
        earliness_defined=bool(ks),
        far=far,
        fnr=fnr,
        erde={str(o): erde(decisions, o, benign) for o in o_values},
        unreached_pct=100.0 * sum(not d.threshold_met for d in decisions) / total if total else 0.0,
        confusion=conf.tolist(),
        class_names=list(class_names),
        flows=total,
        decisions=list(decisions),
    )


def _all_prefix_probs(params, cfg, ds: Dataset) -> list[np.ndarray]:
    return [prefix_probabilities(params, cfg, s) for s in ds.samples]


def evaluate(params: Params, cfg: ModelConfig, ds: Dataset, tau: float = 0.95, o_values=(5,),
             benign: Optional[int] = None, include_unreached: bool = True,
             _probs: Optional[list] = None) -> EarlyEvalReport:
    if benign is None:
        benign = benign_index(ds.class_names)
    probs = _probs if _probs is not None else _all_prefix_probs(params, cfg, ds)
    decisions = [decide_from_probs(p, tau, i, s.label) for i, (p, s) in enumerate(zip(probs, ds.samples))]
    return report_from_decisions(decisions, tau, ds.class_names, cfg.N, o_values, benign, include_unreached)


def tau_sweep(params: Params, cfg: ModelConfig, ds: Dataset, taus: Sequence[float] = DEFAULT_TAU_GRID,
              o_values=(5,), benign: Optional[int] = None) -> list[EarlyEvalReport]:
    """One report per threshold. Prefix probabilities are computed once and reused."""
    if not taus:
        raise ValueError("empty tau grid")
    probs = _all_prefix_probs(params, cfg, ds)
    return [evaluate(params, cfg, ds, t, o_values, benign, _probs=probs) for t in taus]


SWEEP_COLUMNS = ["tau", "accuracy", "earliness", "far", "fnr", "erde5", "unreached_pct"]


def write_sweep_csv(reports: Sequence[EarlyEvalReport], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in reports:
            s = r.summary()
            w.writerow(["" if s[c] is None else s[c] for c in SWEEP_COLUMNS])


def write_report(report: EarlyEvalReport, json_path, csv_path=None) -> None:
    Path(json_path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    if csv_path:
        write_sweep_csv([report], csv_path)
