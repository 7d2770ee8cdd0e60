import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from earlyids.augment import AugmentConfig
from earlyids.datagen import timing_only_pair
from earlyids.dataset import Dataset
from earlyids.encoding import EncodingKind
from earlyids.errors import ConfigError, DataError, StratificationError
from earlyids.model import ModelConfig, param_count
from earlyids.rng import substream
from earlyids.trainer import (
    EarlyStopper, FoldResult, TrainConfig, edl_loss, edl_weights, offline_augment, pick_best,
    split_test, stratified_kfold, stratified_split, the_select, train_final, write_fold_table,
)


def test_edl_perfect_prediction_is_zero():
    loss, grad = edl_loss(np.array([[1.0, 0.0]]), [0], [4])
    assert loss == 0.0 and not grad.any()


def test_edl_single_sample_value():
    p = math.exp(-1)
    loss, _ = edl_loss(np.array([[p, 1 - p]]), [0], [1])
    assert loss == pytest.approx(math.exp(-0.1), rel=1e-12)


def test_edl_weight_ratio():
    w = edl_weights([1, 30])
    assert w[0] / w[1] == pytest.approx(math.exp(2.9), rel=1e-12)
    assert w[0] / w[1] == pytest.approx(18.17, abs=0.01)


def test_edl_floor_never_nan():
    loss, grad = edl_loss(np.array([[0.0, 1.0]]), [0], [1])
    assert loss == pytest.approx(math.exp(-0.1) * -math.log(1e-12)) and np.all(np.isfinite(grad))


def test_edl_gradient_matches_softmax_derivative():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(3, 4))
    labels, lengths = [0, 3, 1], [2, 7, 30]

    def loss_of(z):
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return edl_loss(e / e.sum(axis=1, keepdims=True), labels, lengths)

    _, g = loss_of(z)
    num = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        dz = np.zeros_like(z)
        dz[idx] = 1e-6
        num[idx] = (loss_of(z + dz)[0] - loss_of(z - dz)[0]) / 2e-6
    assert np.allclose(g, num, rtol=1e-6, atol=1e-9)


@given(st.lists(st.integers(1, 30), min_size=2, max_size=10, unique=True))
def test_edl_weights_strictly_decreasing(lengths):
    lengths = sorted(lengths)
    assert np.all(np.diff(edl_weights(lengths)) < 0)


def test_edl_equal_lengths_is_scaled_ce():
    p = np.array([[0.7, 0.3], [0.2, 0.8], [0.5, 0.5]])
    loss, _ = edl_loss(p, [0, 1, 0], [6, 6, 6])
    ce = -np.log([0.7, 0.8, 0.5]).sum()
    assert loss == pytest.approx(math.exp(-0.6) * ce, rel=1e-12)


# --- early stopping -------------------------------------------------------

def _walk(values, patience=7):
    stopper = EarlyStopper(patience)
    for epoch, v in enumerate(values, start=1):
        stopper.update(epoch, v)
        if stopper.should_stop:
            return epoch, stopper.best_epoch
    return len(values), stopper.best_epoch


def test_stopping_rule_walk():
    assert _walk([5, 4, 4, 4, 4, 4, 4, 4, 4, 3]) == (9, 2)
    assert _walk(list(range(20, 0, -1))) == (20, 20)


# --- splitting ------------------------------------------------------------

def test_stratified_split_counts():
    labels = np.repeat([0, 1, 2], [100, 35, 5])
    keep, held = stratified_split(labels, 0.1, np.random.default_rng(0))
    assert np.bincount(labels[held]).tolist() == [10, 4, 1]
    assert len(np.intersect1d(keep, held)) == 0 and len(keep) + len(held) == 140


def test_kfold_refuses_thin_class():
    with pytest.raises(StratificationError, match="fewer folds"):
        stratified_kfold(np.repeat([0, 1], [20, 3]), 5, np.random.default_rng(0))


def test_kfold_covers_everything_once():
    labels = np.repeat([0, 1], [23, 11])
    folds = stratified_kfold(labels, 5, np.random.default_rng(1))
    seen = np.concatenate([va for _, va in folds])
    assert sorted(seen.tolist()) == list(range(34))
    assert all(set(labels[va]) == {0, 1} for _, va in folds)


def test_no_test_leakage_into_folds():
    ds = timing_only_pair(3, 60, d=8, N=12)
    dev, test = split_test(ds, 0.1, seed=5)
    test_origins = {s.origin for s in test.samples}
    P = param_count(ModelConfig(C=2, d=8, N=12))
    for f, (tr, va) in enumerate(stratified_kfold(dev.labels, 5, substream(5, "folds"))):
        train_aug, val_aug, _ = offline_augment(dev.subset(tr), dev.subset(va), P, AugmentConfig(),
                                                substream(5, "offline", f))
        used = {s.origin for s in train_aug.samples} | {s.origin for s in val_aug.samples}
        assert not used & test_origins


def test_validation_never_oversampled():
    ds = timing_only_pair(3, 60, d=8, N=12)
    tr, va = ds.subset(range(0, 100)), ds.subset(range(100, 120))
    _, val_aug, stats = offline_augment(tr, va, 200, AugmentConfig(), np.random.default_rng(0))
    assert len({id(s) for s in val_aug.samples}) == len(val_aug)


# --- selection ------------------------------------------------------------

def _fr(kind, edl):
    return FoldResult(EncodingKind.parse(kind), [edl] * 5)


def test_pick_lowest_mean():
    table = [_fr("ta-sinusoidal", 2.2e-7), _fr("ta-fourier", 3.9e-7), _fr("ta-rope", 3.7e-6)]
    assert pick_best(table) is EncodingKind.TA_SINUSOIDAL
    assert pick_best(table[::-1]) is EncodingKind.TA_SINUSOIDAL


def test_pick_tie_goes_to_first(caplog):
    caplog.set_level("INFO")
    table = [_fr("ta-rope", 0.1), _fr("ta-fourier", 0.1)]
    assert pick_best(table) is EncodingKind.TA_ROPE
    assert pick_best(table[::-1]) is EncodingKind.TA_FOURIER
    assert "tie" in caplog.text


def test_single_candidate_returned_directly():
    ds = timing_only_pair(3, 50, d=8, N=12)
    chosen, table = the_select(ds, TrainConfig(encodings=("ta-rope",)))
    assert chosen is EncodingKind.TA_ROPE and table == []


def test_empty_dev_rejected():
    with pytest.raises(DataError):
        train_final(Dataset(["a", "b"], [], 8, 12), "ta-rope", TrainConfig())


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(encodings=("bogus",))


# --- small end-to-end runs ------------------------------------------------

FAST = dict(max_epochs=2, batch_size=32, lr=1e-3, seed=11, folds=2)
BASE = ModelConfig(C=2, d=8, N=12, time_scale=100.0)


def test_train_final_deterministic(tmp_path):
    ds = timing_only_pair(3, 50, d=8, N=12)
    runs = [train_final(ds, "ta-fourier", TrainConfig(**FAST), base=BASE, log_path=tmp_path / f"log{i}.jsonl")
            for i in range(2)]
    assert all(np.array_equal(runs[0].params[k], runs[1].params[k]) for k in runs[0].params)
    assert runs[0].best_val_edl == runs[1].best_val_edl
    rec = json.loads((tmp_path / "log0.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"epoch", "train_edl", "val_edl", "wall_time"}
    assert runs[0].best_val_edl == min(r["val_edl"] for r in runs[0].log)


def test_select_table_shape_and_order_invariance(tmp_path):
    ds = timing_only_pair(3, 50, d=8, N=12)
    cands = ("ta-sinusoidal", "ta-fourier", "ta-rope")
    chosen, table = the_select(ds, TrainConfig(encodings=cands, **FAST), base=BASE)
    assert [r.encoding.value for r in table] == list(cands)
    assert all(len(r.fold_edl) == 2 and all(np.isfinite(r.fold_edl)) for r in table)
    chosen2, table2 = the_select(ds, TrainConfig(encodings=cands[::-1], **FAST), base=BASE)
    assert chosen2 is chosen
    assert {r.encoding: r.fold_edl for r in table} == {r.encoding: r.fold_edl for r in table2}
    write_fold_table(table, tmp_path / "folds.csv")
    assert len((tmp_path / "folds.csv").read_text().splitlines()) == 1 + 3 * 2 + 3 * 2


def test_parallel_matches_serial():
    ds = timing_only_pair(3, 50, d=8, N=12)
    cands = ("ta-sinusoidal", "sinusoidal")
    serial = the_select(ds, TrainConfig(encodings=cands, **FAST), base=BASE)[1]
    parallel = the_select(ds, TrainConfig(encodings=cands, jobs=2, **FAST), base=BASE)[1]
    assert [r.fold_edl for r in serial] == [r.fold_edl for r in parallel]
