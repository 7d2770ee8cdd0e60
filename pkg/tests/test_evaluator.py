import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from earlyids.datagen import timing_only_pair
from earlyids.evaluator import (
    DEFAULT_TAU_GRID, EarlyDecision, benign_index, decide_from_probs, decide_early, erde, evaluate,
    prefix_probabilities, report_from_decisions, tau_sweep, write_sweep_csv,
)
from earlyids.model import ModelConfig, forward, init_params

from helpers import erde_bruteforce

ATTACK, BENIGN = 0, 1


def test_decision_first_confident_prefix():
    probs = np.array([[0.6, 0.4], [0.3, 0.7], [0.02, 0.98], [0.01, 0.99]])
    d = decide_from_probs(probs, 0.95)
    assert (d.packets_used, d.predicted, d.threshold_met) == (3, 1, True)
    assert d.confidence == pytest.approx(0.98)


def test_decision_falls_back_to_full_flow():
    probs = np.array([[0.6, 0.4], [0.3, 0.7], [0.45, 0.55]])
    d = decide_from_probs(probs, 0.95)
    assert (d.packets_used, d.predicted, d.threshold_met) == (3, 1, False)


def test_decision_at_first_packet():
    d = decide_from_probs(np.array([[0.97, 0.03], [0.99, 0.01]]), 0.95)
    assert d.packets_used == 1 and d.predicted == 0


def test_tau_out_of_range():
    cfg = ModelConfig(C=2, d=8, N=12)
    ds = timing_only_pair(1, 50, d=8, N=12)
    with pytest.raises(ValueError):
        decide_early(init_params(cfg, np.random.default_rng(0)), cfg, ds.samples[0], 0.0)


def _four_flows():
    return [EarlyDecision(0, ATTACK, ATTACK, 1, 0.99, True),    # tp, k=1
            EarlyDecision(1, BENIGN, BENIGN, 3, 0.99, True),    # tn
            EarlyDecision(2, ATTACK, BENIGN, 4, 0.99, True),    # fn
            EarlyDecision(3, BENIGN, ATTACK, 2, 0.99, True)]    # fp


def test_erde_four_flow_example():
    value = erde(_four_flows(), o=5, benign=BENIGN)
    expected = (1 - 1 / (1 + math.exp(-4)) + 0 + 1 + 1 / 4) / 4
    assert value == pytest.approx(expected, abs=1e-12)
    assert value == pytest.approx(0.31700, abs=1e-5)


@given(st.lists(st.tuples(st.booleans(), st.booleans(), st.integers(1, 30)), min_size=1, max_size=40),
       st.sampled_from([5, 10, 20]))
def test_erde_matches_bruteforce(rows, o):
    decisions = [EarlyDecision(i, ATTACK if t else BENIGN, ATTACK if p else BENIGN, k, 1.0, True)
                 for i, (t, p, k) in enumerate(rows)]
    assert erde(decisions, o, BENIGN) == pytest.approx(erde_bruteforce(rows, o), abs=1e-12)


@given(st.integers(1, 30), st.integers(1, 30))
def test_erde_tp_cost_grows_with_delay(k1, k2):
    a = erde([EarlyDecision(0, ATTACK, ATTACK, min(k1, k2), 1.0, True)], 5, BENIGN)
    b = erde([EarlyDecision(0, ATTACK, ATTACK, max(k1, k2), 1.0, True)], 5, BENIGN)
    assert a <= b


def test_report_metrics():
    r = report_from_decisions(_four_flows(), 0.95, ["bruteforce", "benign"], N=30, benign=BENIGN)
    assert r.accuracy == 50.0
    assert r.earliness == 3 and r.earliness_defined
    assert r.far == 50.0 and r.fnr == 50.0
    assert r.confusion == [[1, 1], [1, 1]]


def test_report_nothing_correct():
    bad = [EarlyDecision(0, ATTACK, BENIGN, 4, 0.99, True)]
    r = report_from_decisions(bad, 0.95, ["a", "benign"], N=30, benign=BENIGN)
    assert r.earliness == 30 and not r.earliness_defined and r.far is None


def test_unreached_flows_in_earliness_flag():
    ds = [EarlyDecision(0, ATTACK, ATTACK, 20, 0.7, False), EarlyDecision(1, ATTACK, ATTACK, 3, 0.99, True)]
    assert report_from_decisions(ds, 0.95, ["a", "benign"], 30, benign=1).earliness == 20
    assert report_from_decisions(ds, 0.95, ["a", "benign"], 30, benign=1, include_unreached=False).earliness == 3
    assert report_from_decisions(ds, 0.95, ["a", "benign"], 30).unreached_pct == 50.0


def test_benign_detection():
    assert benign_index(["DoS", "Benign"]) == 1
    assert benign_index(["a", "b"]) is None


def _model_and_data():
    cfg = ModelConfig(C=2, d=8, N=12, encoding="ta-rope")
    ds = timing_only_pair(4, 50, d=8, N=12)
    return init_params(cfg, np.random.default_rng(2)), cfg, ds.subset(range(0, 100, 10))


def test_prefix_batch_equals_single_passes():
    params, cfg, ds = _model_and_data()
    s = ds.samples[0]
    stacked = prefix_probabilities(params, cfg, s)
    single = np.stack([forward(params, cfg, s.prefix(k))[0] for k in range(1, s.n + 1)])
    assert np.allclose(stacked, single, rtol=1e-12, atol=0)


def test_sweep_grid_and_monotone_earliness(tmp_path):
    params, cfg, ds = _model_and_data()
    assert len(DEFAULT_TAU_GRID) == 12
    reports = tau_sweep(params, cfg, ds)
    write_sweep_csv(reports, tmp_path / "sweep.csv")
    rows = list(csv.reader((tmp_path / "sweep.csv").open()))
    assert len(rows) == 13 and rows[0][0] == "tau"
    used = np.array([[d.packets_used for d in r.decisions] for r in reports])
    assert np.all(np.diff(used, axis=0) >= 0)
    single = evaluate(params, cfg, ds, DEFAULT_TAU_GRID[3])
    assert single.summary() == reports[3].summary()
