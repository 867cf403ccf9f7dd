import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from objqa import evalgate
from objqa.dataio import DegradationSpec, LabeledSample
from objqa.errors import ContractError, UndefinedCorrelationError

from _oracles import all_small_tied_lists, oracle_pearson, oracle_spearman


# ---------------------------------------------------------------- metric examples

def test_srocc_examples():
    assert evalgate.srocc([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0, abs=1e-15)
    assert evalgate.srocc([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0, abs=1e-15)
    assert evalgate.srocc([1, 3, 2, 4], [1, 2, 3, 4]) == pytest.approx(0.8, abs=1e-15)


def test_lcc_examples():
    x = np.array([0.3, 1.7, -2.0, 5.5])
    assert evalgate.lcc(x, 2 * x + 1) == pytest.approx(1.0, abs=1e-15)
    assert evalgate.lcc(x, -x) == pytest.approx(-1.0, abs=1e-15)


@pytest.mark.parametrize("seed", range(100))
def test_metrics_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=100), rng.normal(size=100) + 0.3 * rng.normal(size=100)
    assert abs(evalgate.lcc(x, y) - oracle_pearson(list(x), list(y))) < 1e-9
    assert abs(evalgate.srocc(x, y) - oracle_spearman(list(x), list(y))) < 1e-9


def test_srocc_ties_exhaustive():
    lists = list(all_small_tied_lists())
    rng = np.random.default_rng(0)
    checked = 0
    for a in lists:
        # pair every list with a fixed reference of the same length and with one random partner
        partners = [tuple(range(len(a))), tuple(rng.integers(0, 3, len(a)))]
        for b in partners:
            if len(set(a)) == 1 or len(set(b)) == 1:
                with pytest.raises(UndefinedCorrelationError):
                    evalgate.srocc(a, b)
                continue
            assert abs(evalgate.srocc(a, b) - oracle_spearman(a, b)) < 1e-12
            checked += 1
    assert checked > 1000


def test_srocc_ties_exhaustive_pairs_short():
    # every pair of lists of length <= 4 over {0, 1, 2}
    for n in range(2, 5):
        lists = list(itertools.product((0, 1, 2), repeat=n))
        for a in lists:
            for b in lists:
                if len(set(a)) > 1 and len(set(b)) > 1:
                    assert abs(evalgate.srocc(a, b) - oracle_spearman(a, b)) < 1e-12


def test_metric_errors():
    with pytest.raises(UndefinedCorrelationError):
        evalgate.srocc([1, 1, 1], [1, 2, 3])
    with pytest.raises(UndefinedCorrelationError):
        evalgate.lcc([1, 2, 3], [5, 5, 5])
    with pytest.raises(ContractError):
        evalgate.srocc([1, 2], [1, 2, 3])
    with pytest.raises(ContractError):
        evalgate.lcc([1], [1])


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(finite, finite), min_size=3, max_size=30))
def test_metric_symmetry_and_transforms(pairs):
    x = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    if np.ptp(x) < 1e-6 or np.ptp(y) < 1e-6:
        return
    s, l_ = evalgate.srocc(x, y), evalgate.lcc(x, y)
    assert -1 <= s <= 1 and -1 <= l_ <= 1
    assert abs(evalgate.srocc(y, x) - s) < 1e-12
    assert abs(evalgate.lcc(y, x) - l_) < 1e-12
    assert abs(evalgate.srocc(4.0 * x, y) - s) < 1e-12
    assert abs(evalgate.lcc(3.0 * x + 11.0, y) - l_) < 1e-9


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(-500, 500), st.integers(-500, 500)), min_size=3, max_size=30))
def test_srocc_invariant_under_monotone_maps(pairs):
    x = np.array([p[0] for p in pairs], float)
    y = np.array([p[1] for p in pairs], float)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return
    s = evalgate.srocc(x, y)
    assert abs(evalgate.srocc(np.exp(x / 100.0), y) - s) < 1e-12
    assert abs(evalgate.srocc(x, y ** 3 - 5.0) - s) < 1e-12
    assert abs(evalgate.srocc(-x, y) + s) < 1e-12


# ---------------------------------------------------------------- groups and reports

def _sample(i, label, gt):
    return LabeledSample(i, None, label, i, DegradationSpec("Blur", kernel=3), gt)


def test_evaluate_groups_drops_constant():
    g1 = [_sample(0, 1, 0.1), _sample(1, 1, 0.5), _sample(2, 1, 0.9)]
    g2 = [_sample(3, 2, 0.2), _sample(4, 2, 0.4), _sample(5, 2, 0.3)]
    g3 = [_sample(6, 3, 0.5), _sample(7, 3, 0.5), _sample(8, 3, 0.5)]
    pred = np.array([1, 2, 3, 1, 3, 2, 0, 1, 2], float)
    m = evalgate.evaluate_groups([g1, g2, g3], lambda ms: pred[[x.sample_id for x in ms]])
    assert (m.used, m.dropped) == (2, 1)
    assert m.srocc == pytest.approx(1.0)
    assert m.lcc == pytest.approx((1.0 + 1.0) / 2)


def test_evaluate_groups_needs_gt():
    with pytest.raises(ContractError):
        evalgate.evaluate_groups([[_sample(0, 1, None)] * 3], lambda ms: [1, 2, 3])


def test_report_csv_and_text(tmp_path):
    r = evalgate.MetricReport()
    r.add("Mixed", "Intra", "RQA", evalgate.GroupMetrics(0.9, 0.8, 10, 1))
    r.add("Mixed", "Inter", "AQA", evalgate.GroupMetrics(0.7, 0.6, 9, 0))
    assert r.get("Intra", "RQA") == 0.9
    assert r.get("Inter", "AQA", "LCC", "Mixed") == 0.6
    with pytest.raises(KeyError):
        r.get("Intra", "GT")
    csv_path, txt_path = evalgate.emit_report(r, tmp_path / "rep")
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "condition,set,scorer,metric,value,groups_used,groups_dropped"
    assert lines[1] == "Mixed,Intra,RQA,SROCC,0.900000,10,1"
    assert len(lines) == 5
    assert "[Mixed]" in txt_path.read_text()
    back = evalgate.MetricReport.from_csv(csv_path)
    assert back.get("Inter", "AQA", "LCC") == 0.6 and back.rows[0]["groups_dropped"] == 1
    before = csv_path.read_bytes()
    evalgate.emit_report(r, tmp_path / "rep")
    assert csv_path.read_bytes() == before


# ---------------------------------------------------------------- sequences

def _seq(gts, preds, confs=None, label=0):
    frames = [_sample(i, label, g) for i, g in enumerate(gts)]
    confs = np.ones(len(gts)) if confs is None else np.asarray(confs, float)
    return evalgate.SequenceSample(frames, label, np.asarray(preds), confs)


def _gt_scorer(seq):
    return np.array([f.gt_score for f in seq.frames])


def test_sequence_needs_three_frames():
    with pytest.raises(ContractError):
        _seq([0.1, 0.2], [0, 0])


def test_qshr_examples():
    rng = np.random.default_rng(0)
    seqs = [_seq(list(rng.permutation(5) / 5), [0] * 5) for _ in range(20)]
    assert evalgate.qshr(seqs, _gt_scorer) == 1.0
    assert evalgate.qshr(seqs, lambda s: -_gt_scorer(s)) == 0.0


def test_qshr_ties_count_as_hits():
    s = _seq([0.9, 0.9, 0.1], [0, 0, 0])
    assert evalgate.qshr([s], lambda seq: np.array([0.0, 1.0, 0.5])) == 1.0


def test_qshr_random_scorer_monte_carlo():
    rng = np.random.default_rng(1)
    seqs = [_seq(list(rng.permutation(3) / 3), [0] * 3) for _ in range(30)]
    vals = [evalgate.qshr(seqs, lambda s: rng.random(3)) for _ in range(400)]
    assert abs(np.mean(vals) - 1 / 3) < 0.01


def _plain_majority(preds, confs):
    votes = Counter(preds)
    top = max(votes.values())
    tied = [lab for lab, n in votes.items() if n == top]
    return min(tied, key=lambda lab: (-np.mean([c for p, c in zip(preds, confs) if p == lab]), lab))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.floats(0.01, 1.0), st.floats(0.0, 1.0)), min_size=3, max_size=9))
def test_gated_vote_th_zero_is_majority(frames):
    preds = [f[0] for f in frames]
    confs = [f[1] for f in frames]
    scores = np.array([f[2] for f in frames])
    s = _seq([0.5] * len(frames), preds, confs)
    assert evalgate.gated_vote(s, lambda _: scores, 0.0) == _plain_majority(preds, confs)


def test_gated_vote_discards_low_frames():
    s = _seq([0.5] * 5, [1, 1, 1, 2, 2])
    scores = np.array([0.1, 0.2, 0.3, 0.8, 0.9])
    assert evalgate.gated_vote(s, lambda _: scores, 0.0) == 1
    assert evalgate.gated_vote(s, lambda _: scores, 0.5) == 2


def test_gated_vote_tie_breaks():
    s = _seq([0.5] * 4, [3, 3, 1, 1], confs=[0.6, 0.6, 0.9, 0.9])
    assert evalgate.gated_vote(s, lambda _: np.ones(4), 0.5) == 1
    s = _seq([0.5] * 4, [3, 3, 1, 1], confs=[0.9, 0.9, 0.9, 0.9])
    assert evalgate.gated_vote(s, lambda _: np.ones(4), 0.5) == 1


def test_gated_vote_fallback():
    s = _seq([0.5] * 3, [4, 7, 5])
    assert evalgate.gated_vote(s, lambda _: np.array([0.1, 0.3, 0.2]), 0.9) == 7


def test_sra():
    seqs = [_seq([0.5] * 3, [0, 0, 1]), _seq([0.5] * 3, [1, 1, 0]), _seq([0.5] * 3, [2, 0, 0])]
    scores = lambda s: np.array([0.9, 0.1, 0.8])
    assert evalgate.sra(seqs, scores, 0.0) == pytest.approx(2 / 3)
    # gating keeps frames 0 and 2: every sequence becomes a one-one tie broken toward label 0
    assert evalgate.sra(seqs, scores, 0.5) == pytest.approx(1.0)
