import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from procc.dataio import Dataset, SplitManifest
from procc.evaluation import (
    BiasSweepResult,
    MetricsSummary,
    SweepPoint,
    accuracy_from_scores,
    auc_from_points,
    conditional_confusion,
    evaluate_at_bias,
    export_report,
    harmonic_mean,
    open_closed_comparison,
    primitive_accuracy,
    read_metrics_csv,
    read_sweep_csv,
    summarize_sweep,
    sweep_metrics,
    sweep_scores,
)
from procc.model import ModelConfig, init_model
from procc.train import StageConfig, TrainReport, run_progressive


def test_harmonic_mean_examples():
    assert harmonic_mean(0.37, 0.37) == pytest.approx(0.37)
    assert harmonic_mean(0.0, 0.8) == 0.0
    assert harmonic_mean(0.0, 0.0) == 0.0
    assert harmonic_mean(0.30, 0.10) == pytest.approx(0.15)
    with pytest.raises(ValueError):
        harmonic_mean(-0.1, 0.5)


def _two_record_table():
    # record 0: true seen pair (0, 0); record 1: true unseen pair (1, 1)
    scores = np.array([
        [[0.5, 0.0], [0.0, 0.4]],
        [[0.5, 0.0], [0.0, 0.4]],
    ])
    seen = {(0, 0), (0, 1), (1, 0)}
    return scores, np.array([0, 1]), np.array([0, 1]), seen


def test_hand_built_bias_threshold():
    scores, ts, to, seen = _two_record_table()
    assert accuracy_from_scores(scores, ts, to, seen, 0.0) == (1.0, 0.0)
    assert accuracy_from_scores(scores, ts, to, seen, 0.2) == (0.0, 1.0)
    assert accuracy_from_scores(scores, ts, to, seen, -1e9) == (1.0, 0.0)


def test_tie_goes_to_lower_pair_index():
    scores, ts, to, seen = _two_record_table()
    # at bias 0.1 both cells score 0.5; (0, 0) comes first
    assert accuracy_from_scores(scores, ts, to, seen, 0.1) == (1.0, 0.0)


def _tiny(n_per=3):
    """Two perfectly separated compositions, one seen and one unseen."""
    feats = np.repeat(np.array([[5.0, 0.0], [0.0, 5.0]]), n_per, axis=0)
    ds = Dataset(tuple(map(str, range(2 * n_per))), feats, np.repeat([0, 1], n_per), np.repeat([0, 1], n_per),
                 np.array(["test"] * (2 * n_per)), 2)
    man = SplitManifest(("s0", "s1"), ("o0", "o1"), frozenset({(0, 0)}), frozenset(), frozenset({(1, 1)}))
    return ds, man


def _memorizing_model():
    m = init_model(ModelConfig(raw_dim=2, n_states=2, n_objects=2, d=2, n_layers=1, backbone="identity"), 0)
    for head in ("phi_o", "phi_s"):
        m.params.values[f"{head}.layer1.weight"] = np.eye(2) * 5
        m.params.values[f"{head}.layer1.bias"][:] = 0
    for unit in ("cpc_o_to_s", "cpc_s_to_o"):
        m.params.values[f"{unit}.proj"][:] = 0
    return m


def test_evaluate_at_bias_model_level():
    ds, man = _tiny()
    m = _memorizing_model()
    mask = man.space_mask("open")
    assert evaluate_at_bias(m, ds, "test", mask, man.seen_pairs, 0.0) == (1.0, 1.0)
    assert evaluate_at_bias(m, ds, "test", mask, man.seen_pairs, -1e9)[1] == 0.0
    one = ds.subset([0])
    assert evaluate_at_bias(m, one, "test", mask, man.seen_pairs, 0.0) == (1.0, None)


def test_primitive_accuracy_perfect():
    ds, _ = _tiny()
    acc = primitive_accuracy(_memorizing_model(), ds, "test")
    assert (acc.state, acc.object, acc.state_uncond, acc.object_uncond) == (1.0, 1.0, 1.0, 1.0)


def test_sweep_single_record_always_correct():
    ds, man = _tiny()
    s = sweep_metrics(_memorizing_model(), ds.subset([0]), "test", man.space_mask("open"), man.seen_pairs)
    assert s.best_seen == 1.0 and s.best_unseen is None and s.auc is None and s.best_hm is None


def test_auc_rectangle():
    pts = [SweepPoint(-1.0, 0.6, 0.0), SweepPoint(0.0, 0.6, 0.25), SweepPoint(1.0, 0.6, 0.5)]
    assert auc_from_points(pts) == pytest.approx(0.6 * 0.5, abs=1e-15)


def test_auc_duplicate_unseen_values_are_averaged():
    pts = [SweepPoint(0.0, 0.8, 0.0), SweepPoint(1.0, 0.4, 0.0), SweepPoint(2.0, 0.2, 1.0)]
    assert auc_from_points(pts) == pytest.approx((0.6 + 0.2) / 2)


def test_best_hm_at_interior_point():
    pts = [SweepPoint(-1.0, 0.9, 0.1), SweepPoint(0.0, 0.6, 0.5), SweepPoint(1.0, 0.2, 0.7)]
    hms = [harmonic_mean(p.seen, p.unseen) for p in pts]
    assert hms == pytest.approx([0.18, 0.5454545, 0.3111111], abs=1e-6)
    s = summarize_sweep(pts)
    assert s.best_hm == pytest.approx(0.545, abs=1e-3)
    assert s.best_seen == 0.9 and s.best_unseen == 0.7


def test_bias_values_must_increase():
    with pytest.raises(ValueError):
        BiasSweepResult((SweepPoint(0.0, 1.0, 0.0), SweepPoint(0.0, 1.0, 0.0)))


def _random_table(rng, n=30, S=4, O=5):
    scores = rng.random((n, S, O))
    seen = rng.random((S, O)) < 0.5
    seen[0, 0], seen[-1, -1] = True, False
    ts, to = rng.integers(0, S, n), rng.integers(0, O, n)
    return scores, ts, to, seen


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sweep_monotone_in_bias(seed):
    scores, ts, to, seen = _random_table(np.random.default_rng(seed))
    pts = sweep_scores(scores, ts, to, seen, n_biases=41).sweep.points
    assert all(a.seen >= b.seen for a, b in zip(pts, pts[1:]))
    assert all(a.unseen <= b.unseen for a, b in zip(pts, pts[1:]))
    # endpoints flip every record
    assert pts[0].unseen == 0.0 and pts[-1].seen == 0.0


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=30), st.floats(0, 0.5))
def test_auc_reversal_and_dominance(pairs, lift):
    pts = [SweepPoint(float(i), s, u) for i, (s, u) in enumerate(pairs)]
    a = auc_from_points(pts)
    assert auc_from_points(pts[::-1]) == pytest.approx(a, abs=1e-12)
    higher = [SweepPoint(p.bias, min(1.0, p.seen + lift), p.unseen) for p in pts]
    assert auc_from_points(higher) >= a - 1e-12


def test_grid_contains_zero_and_spans_gap(rng):
    scores, ts, to, seen = _random_table(rng)
    grid = sweep_scores(scores, ts, to, seen, n_biases=11).sweep.biases
    assert 0.0 in grid and len(grid) in (11, 12)
    assert grid[0] == -grid[-1]


@pytest.fixture(scope="module")
def trained(small_world):
    ds, man, feas = small_world
    m = init_model(ModelConfig(raw_dim=8, n_states=man.n_states, n_objects=man.n_objects, d=8), 1)
    run_progressive(m, ds, man, [StageConfig(k, lr=0.01, max_epochs=8, batch_size=8) for k in (1, 2, 3)],
                    timing=False)
    return m, ds, man, feas


def test_open_never_beats_closed_on_shared_grid(trained):
    m, ds, man, _ = trained
    for split in ("val", "test"):
        o, c = open_closed_comparison(m, ds, man, split)
        assert o.best_hm <= c.best_hm
        for po, pc in zip(o.sweep.points, c.sweep.points):
            assert po.seen <= pc.seen and po.unseen <= pc.unseen


def test_conditional_confusion_rows(trained):
    m, ds, man, _ = trained
    for direction in ("o->s", "s->o"):
        for cpc in (True, False):
            c = conditional_confusion(m, ds, "test", direction, cpc, man.n_states, man.n_objects)
            np.testing.assert_allclose(c.matrix.sum(axis=1), 1.0, atol=1e-6)


def test_conditional_confusion_zero_model_and_empty_rows(small_world):
    ds, man, _ = small_world
    m = init_model(ModelConfig(raw_dim=8, n_states=man.n_states, n_objects=man.n_objects, d=8), 1)
    for n in m.params.names():
        if not n.startswith("backbone"):
            m.params.values[n][:] = 0
    c = conditional_confusion(m, ds, "test", "o->s", True, man.n_states, man.n_objects)
    np.testing.assert_allclose(c.matrix, 1 / man.n_states)
    only = ds.subset(ds.indices("test")[ds.objects[ds.indices("test")] == 0])
    c = conditional_confusion(m, only, "test", "o->s", True, man.n_states, man.n_objects)
    assert c.empty_rows == tuple(range(1, man.n_objects))
    with pytest.raises(ValueError):
        conditional_confusion(m, ds, "nope", "o->s", True, man.n_states, man.n_objects)


def test_export_report_files_and_round_trip(trained, tmp_path):
    m, ds, man, _ = trained
    summary = sweep_metrics(m, ds, "test", man.space_mask("open"), man.seen_pairs)
    confs = [conditional_confusion(m, ds, "test", d, c, man.n_states, man.n_objects)
             for d in ("o->s", "s->o") for c in (True, False)]
    export_report(summary, confs, TrainReport(stage="stage1"), tmp_path)
    names = set(os.listdir(tmp_path))
    assert {"metrics.csv", "sweep.csv", "sweep.svg", "summary.md", "confusion_o2s_cpc.csv",
            "confusion_s2o_nocpc.csv"} <= names
    assert read_sweep_csv(tmp_path / "sweep.csv") == summary.sweep
    metrics = read_metrics_csv(tmp_path / "metrics.csv")
    assert len(metrics) == 6 and metrics["best_hm"] == summary.best_hm
    assert (tmp_path / "sweep.svg").read_text().startswith("<svg")


def test_export_report_rejects_empty_sweep(tmp_path):
    empty = MetricsSummary(None, None, None, None, None, None, BiasSweepResult(()))
    with pytest.raises(ValueError):
        export_report(empty, [], None, tmp_path / "out")
    assert not (tmp_path / "out").exists()
