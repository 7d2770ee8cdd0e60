"""Early-detection loss, training with early stopping, cross-validated encoding selection."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .augment import AugmentConfig, augment_batch, generate_subflows, hybrid_oversample
from .dataset import Batch, Dataset
from .encoding import TIME_AWARE, EncodingKind
from .errors import ConfigError, DataError, StratificationError, TrainingDivergedError
from .model import AdamState, ModelConfig, Params, adam_step, backward, forward, init_params, param_count
from .rng import DEFAULT_SEED, substream

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 2e-4
    max_epochs: int = 200
    patience: int = 7
    folds: int = 5
    test_fraction: float = 0.10
    final_val_fraction: float = 0.10
    seed: int = DEFAULT_SEED
    decay: float = 0.1
    encodings: tuple = TIME_AWARE
    online_augment: bool = True
    eval_batch: int = 256
    jobs: int = 1
    tau: float = 0.95

    def __post_init__(self):
        self.encodings = tuple(EncodingKind.parse(e) for e in self.encodings)
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.decay <= 0:
            raise ConfigError("decay must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if not self.encodings:
            raise ConfigError("at least one candidate encoding is required")


def edl_weights(lengths, decay: float = 0.1) -> np.ndarray:
    return np.exp(-decay * np.asarray(lengths, dtype=np.float64))


def edl_loss(probs: np.ndarray, labels, lengths, decay: float = 0.1):
    """Length-weighted cross-entropy summed over the batch.

    Returns ``(loss, dloss/dlogits)`` where ``probs`` is the softmax of the logits.
    """
    probs = np.atleast_2d(probs)
    labels = np.asarray(labels, dtype=np.int64)
    w = edl_weights(lengths, decay)
    rows = np.arange(len(labels))
    ce = -np.log(np.maximum(probs[rows, labels], PROB_FLOOR))
    loss = float(np.sum(w * ce))
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    return loss, grad * w[:, None]


# ---------------------------------------------------------------------------
# splitting


def stratified_split(labels, fraction: float, rng: np.random.Generator):
    """``(keep, held_out)`` index arrays with ``round(fraction * m_c)`` held out per class."""
    labels = np.asarray(labels)
    keep, held = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = int(math.floor(fraction * len(idx) + 0.5))
        held.extend(idx[:k])
        keep.extend(idx[k:])
    return np.sort(np.array(keep, dtype=np.int64)), np.sort(np.array(held, dtype=np.int64))


def stratified_kfold(labels, folds: int, rng: np.random.Generator, n_classes: Optional[int] = None):
    """List of ``(train_idx, val_idx)``; every class must appear in every fold."""
    labels = np.asarray(labels)
    n_classes = n_classes if n_classes is not None else int(labels.max()) + 1
    counts = np.bincount(labels, minlength=n_classes)
    if np.any(counts < folds):
        short = {int(c): int(counts[c]) for c in np.flatnonzero(counts < folds)}
        raise StratificationError(f"classes {short} have fewer samples than folds={folds}; use fewer folds")
    assign = np.empty(len(labels), dtype=np.int64)
    for c in range(n_classes):
        idx = rng.permutation(np.flatnonzero(labels == c))
        assign[idx] = np.arange(len(idx)) % folds
    return [(np.flatnonzero(assign != f), np.flatnonzero(assign == f)) for f in range(folds)]


def split_test(ds: Dataset, fraction: float, seed: int):
    """Hold out a stratified test partition; returns ``(dev, test)``."""
    if not len(ds):
        raise DataError("empty dataset")
    dev_idx, test_idx = stratified_split(ds.labels, fraction, substream(seed, "test-split"))
    return ds.subset(dev_idx), ds.subset(test_idx)


def offline_augment(train: Dataset, val: Optional[Dataset], P: int, aug: AugmentConfig, rng):
    """Subflows and oversampling for ``train``; subflows only, with train factors, for ``val``."""
    train_sub, stats = generate_subflows(train, aug, P, rng)
    train_bal = hybrid_oversample(train_sub, stats, rng)
    val_sub = generate_subflows(val, aug, P, rng, factors=stats)[0] if val is not None else None
    return train_bal, val_sub, stats


# ---------------------------------------------------------------------------
# training


class EarlyStopper:
    """Tracks the best (lowest) validation loss; strict improvement resets patience."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value``; returns True if it is a new best."""
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class TrainResult:
    params: Params
    cfg: ModelConfig
    best_val_edl: float
    best_epoch: int
    epochs_run: int
    log: list = field(default_factory=list)


def dataset_edl(params: Params, cfg: ModelConfig, ds: Dataset, decay: float, chunk: int = 256) -> float:
    """EDL summed over ``ds`` in inference mode, divided by its size."""
    total = 0.0
    for start in range(0, len(ds), chunk):
        batch = ds.batch(range(start, min(start + chunk, len(ds))))
        probs, _ = forward(params, cfg, batch)
        total += edl_loss(probs, batch.labels, batch.n, decay)[0]
    return total / len(ds)


def train_one(train: Dataset, val: Dataset, cfg: ModelConfig, tcfg: TrainConfig, aug: AugmentConfig,
              init_rng: np.random.Generator, epoch_rng: np.random.Generator,
              log_path=None) -> TrainResult:
    """Train from a fresh init; keep the weights with the lowest validation EDL."""
    if not len(train) or not len(val):
        raise DataError("training and validation sets must be non-empty")
    params = init_params(cfg, init_rng)
    state = AdamState()
    stopper = EarlyStopper(tcfg.patience)
    best = {k: v.copy() for k, v in params.items()}
    history = []
    fh = Path(log_path).open("w") if log_path else None
    try:
        for epoch in range(1, tcfg.max_epochs + 1):
            t0 = time.perf_counter()
            order = epoch_rng.permutation(len(train))
            train_total = 0.0
            for start in range(0, len(order), tcfg.batch_size):
                batch = train.batch(order[start:start + tcfg.batch_size])
                if tcfg.online_augment:
                    batch = augment_batch(batch, aug, epoch_rng)
                probs, trace = forward(params, cfg, batch, training=True, rng=epoch_rng)
                loss, dlogits = edl_loss(probs, batch.labels, batch.n, tcfg.decay)
                if not math.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}")
                train_total += loss
                adam_step(params, backward(trace, params, cfg, dlogits), state, tcfg.lr)
            val_edl = dataset_edl(params, cfg, val, tcfg.decay, tcfg.eval_batch)
            if not math.isfinite(val_edl):
                raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
            if stopper.update(epoch, val_edl):
                best = {k: v.copy() for k, v in params.items()}
            rec = {"epoch": epoch, "train_edl": train_total / len(train), "val_edl": val_edl,
                   "wall_time": time.perf_counter() - t0}
            history.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            log.debug("epoch %d train %.6g val %.6g", epoch, rec["train_edl"], val_edl)
            if stopper.should_stop:
                break
    finally:
        if fh:
            fh.close()
    return TrainResult(best, cfg, stopper.best, stopper.best_epoch, len(history), history)


def model_config_for(ds: Dataset, encoding, base: Optional[ModelConfig] = None) -> ModelConfig:
    base = base or ModelConfig(C=max(ds.C, 1))
    return replace(base, C=ds.C, d=ds.d, N=ds.N, encoding=EncodingKind.parse(encoding))


# ---------------------------------------------------------------------------
# encoding selection


@dataclass
class FoldResult:
    encoding: EncodingKind
    fold_edl: list
    fold_metrics: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_edl))

    @property
    def std(self) -> float:
        return float(np.std(self.fold_edl))


def _fold_task(args):
    fold, enc, train, val, val_orig, base, tcfg, aug = args
    from .evaluator import evaluate

    cfg = model_config_for(train, enc, base)
    res = train_one(train, val, cfg, tcfg, aug,
                    substream(tcfg.seed, "init", fold), substream(tcfg.seed, "epochs", fold))
    report = evaluate(res.params, cfg, val_orig, tcfg.tau)
    return fold, enc, res.best_val_edl, report.summary()


def pick_best(results: Sequence[FoldResult]) -> EncodingKind:
    """Lowest mean validation EDL; ties at machine precision go to the earliest candidate."""
    means = np.array([r.mean for r in results])
    lo = means.min()
    tol = 4 * np.finfo(float).eps * max(abs(lo), np.finfo(float).tiny)
    tied = [r for r, m in zip(results, means) if m - lo <= tol]
    if len(tied) > 1:
        log.info("tie between %s; taking %s", [r.encoding.value for r in tied], tied[0].encoding.value)
    return tied[0].encoding


def the_select(dev: Dataset, tcfg: TrainConfig, aug: Optional[AugmentConfig] = None,
               base: Optional[ModelConfig] = None):
    """Cross-validate every candidate encoding; returns ``(chosen, [FoldResult])``."""
    aug = aug or AugmentConfig()
    if not len(dev):
        raise DataError("empty development set")
    candidates = list(tcfg.encodings)
    if len(candidates) == 1:
        return candidates[0], []
    folds = stratified_kfold(dev.labels, tcfg.folds, substream(tcfg.seed, "folds"), dev.C)
    P = param_count(model_config_for(dev, EncodingKind.NONE, base))
    tasks = []
    for f, (tr, va) in enumerate(folds):
        train, val = dev.subset(tr), dev.subset(va)
        train_aug, val_aug, _ = offline_augment(train, val, P, aug, substream(tcfg.seed, "offline", f))
        tasks.extend((f, enc, train_aug, val_aug, val, base, tcfg, aug) for enc in candidates)
    if tcfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=tcfg.jobs) as pool:
            done = list(pool.map(_fold_task, tasks))
    else:
        done = [_fold_task(t) for t in tasks]
    results = {enc: FoldResult(enc, [None] * len(folds), [None] * len(folds)) for enc in candidates}
    for f, enc, edl, metrics in done:
        results[enc].fold_edl[f] = edl
        results[enc].fold_metrics[f] = metrics
    table = [results[enc] for enc in candidates]
    return pick_best(table), table


def write_fold_table(results: Sequence[FoldResult], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["encoding", "fold", "val_edl", "accuracy", "earliness", "far", "fnr", "erde5"])
        for r in results:
            for f, (edl, m) in enumerate(zip(r.fold_edl, r.fold_metrics)):
                m = m or {}
                w.writerow([r.encoding.value, f, repr(edl), m.get("accuracy"), m.get("earliness"),
                            m.get("far"), m.get("fnr"), m.get("erde5")])
        for r in results:
            w.writerow([r.encoding.value, "mean", repr(r.mean), "", "", "", "", ""])
            w.writerow([r.encoding.value, "std", repr(r.std), "", "", "", "", ""])


def train_final(dev: Dataset, encoding, tcfg: TrainConfig, aug: Optional[AugmentConfig] = None,
                base: Optional[ModelConfig] = None, log_path=None) -> TrainResult:
    """Retrain the chosen encoding on the whole development set (internal 90/10 split)."""
    aug = aug or AugmentConfig()
    if not len(dev):
        raise DataError("empty development set")
    tr, va = stratified_split(dev.labels, tcfg.final_val_fraction, substream(tcfg.seed, "final-split"))
    if not len(va):
        raise DataError("development set too small for a validation split")
    cfg = model_config_for(dev, encoding, base)
    train_aug, val_aug, _ = offline_augment(dev.subset(tr), dev.subset(va), param_count(cfg), aug,
                                            substream(tcfg.seed, "offline", "final"))
    return train_one(train_aug, val_aug, cfg, tcfg, aug, substream(tcfg.seed, "init", "final"),
                     substream(tcfg.seed, "epochs", "final"), log_path=log_path)
