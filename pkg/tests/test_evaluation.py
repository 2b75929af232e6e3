from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from osbp import evaluation as ev
from osbp.data import Dataset, SynthConfig, synth_openset
from osbp.errors import UsageError, ValidationError
from osbp.model import TrainConfig, build_model, features, train


def test_macro_example_k2():
    # class 0: 2/2, class 1: 1/2, unknown: 0/2
    truth = [0, 0, 1, 1, 2, 2]
    pred = [0, 0, 1, 0, 0, 1]
    r = ev.report_from_predictions(pred, truth, K=2)
    assert r.per_class_acc == [1.0, 0.5, 0.0]
    assert r.OS_star == 0.75
    assert r.OS == pytest.approx(0.5, abs=1e-15)
    assert r.OS == pytest.approx((2 * 0.75 + 0.0) / 3, abs=1e-15)


def test_perfect_predictor():
    truth = [0, 1, 2, 3, 3]
    r = ev.report_from_predictions(truth, truth, K=3)
    assert (r.OS, r.OS_star, r.ALL, r.UNK) == (1.0, 1.0, 1.0, 1.0)


def test_macro_versus_micro():
    truth = [0] * 10 + [1] * 90
    pred = [0] * 10 + [0] * 90
    r = ev.report_from_predictions(pred, truth, K=2)
    assert r.OS_star == 0.5
    assert r.ALL == pytest.approx(0.1)
    assert r.UNK is None
    assert r.per_class_acc[2] is None


def test_empty_target_rejected():
    with pytest.raises(ValidationError):
        ev.evaluate(lambda x: np.zeros(0, dtype=int), Dataset(np.zeros((0, 2)), []), K=2)


def test_out_of_range_prediction_rejected():
    with pytest.raises(ValidationError):
        ev.report_from_predictions([3], [0], K=2)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5).flatmap(lambda K: st.tuples(
    st.just(K),
    st.lists(st.tuples(st.integers(0, K), st.integers(0, K)), min_size=1, max_size=60))))
def test_report_identities(case):
    K, pairs = case
    truth = np.array([t for t, _ in pairs])
    pred = np.array([p for _, p in pairs])
    r = ev.report_from_predictions(pred, truth, K, p_unknown=np.linspace(0, 1, len(pairs)))
    conf = np.array(r.confusion)
    assert r.ALL == pytest.approx(np.trace(conf) / r.n, abs=1e-15)
    assert sum(r.histogram["known"]) == int((truth != K).sum())
    assert sum(r.histogram["unknown"]) == int((truth == K).sum())
    for acc in r.per_class_acc:
        assert acc is None or 0.0 <= acc <= 1.0
    if all(a is not None for a in r.per_class_acc):
        # exact rational oracle for the OS identity
        exact = [Fraction(int(conf[k, k]), int(conf[k].sum())) for k in range(K + 1)]
        os_star = sum(exact[:K]) / K
        assert sum(exact) / (K + 1) == (K * os_star + exact[K]) / (K + 1)
        assert abs(r.OS - (K * r.OS_star + r.UNK) / (K + 1)) <= 1e-12
    assert ev.report_from_predictions(pred, truth, K) == ev.report_from_predictions(pred, truth, K)


# -- histograms ------------------------------------------------------------


def test_histogram_zero_goes_to_first_bin():
    assert ev.histogram_counts(np.zeros(7), 20)[0] == 7


def test_histogram_one_goes_to_last_bin():
    counts = ev.histogram_counts([1.0, 1.0], 20)
    assert len(counts) == 20 and counts[-1] == 2


def test_histogram_needs_two_bins():
    with pytest.raises(ValidationError):
        ev.histogram_counts([0.5], 1)


@given(st.lists(st.floats(0.0, 1.0), max_size=50), st.integers(2, 30))
def test_histogram_conserves_count(p, bins):
    assert sum(ev.histogram_counts(p, bins)) == len(p)


@pytest.fixture(scope="module")
def small_model():
    sc = synth_openset(SynthConfig(source_per_class=10, target_per_class=10), seed=0)
    cfg = TrainConfig(epochs=3, hidden=(8, 2), seed=0)
    model = build_model(sc.source.width, sc.K, cfg)
    train(model, sc, cfg)
    return model, sc


def test_model_histogram_groups(small_model):
    model, sc = small_model
    h = ev.p_unknown_histogram(model, sc.target, bins=10)
    assert sum(h["known"]) == int((sc.target.labels < sc.K).sum())
    assert sum(h["unknown"]) == int((sc.target.labels == sc.K).sum())


# -- sweeps ----------------------------------------------------------------


def fake_runner(value, seed):
    truth = np.array([0, 1, 2, 2])
    pred = np.array([0, 1, 2, 0]) if value < 0.6 else np.array([0, 0, 0, 0])
    return ev.report_from_predictions(pred, truth, K=2)


def test_sweep_rows_in_grid_order():
    rows = ev.sweep("t", [0.3, 0.5, 0.7, 0.9], fake_runner, base_seed=10)
    assert [r.value for r in rows] == [0.3, 0.5, 0.7, 0.9]
    assert [r.seed for r in rows] == [10, 11, 12, 13]


def test_sweep_parallel_matches_serial():
    serial = ev.sweep("t", [0.3, 0.5, 0.7, 0.9], fake_runner)
    parallel = ev.sweep("t", [0.3, 0.5, 0.7, 0.9], fake_runner, workers=3)
    assert serial == parallel


def test_sweep_records_failures():
    def runner(value, seed):
        if value == 2:
            raise RuntimeError("boom")
        return fake_runner(value, seed)

    rows = ev.sweep("x", [1, 2, 3], runner)
    assert rows[1].report is None and "boom" in rows[1].error
    assert rows[0].report is not None and rows[2].report is not None


def test_single_point_sweep_equals_direct_run():
    rows = ev.sweep("t", [0.5], fake_runner, base_seed=4)
    assert rows[0].report == fake_runner(0.5, 4)


def test_empty_grid_rejected():
    with pytest.raises(ValidationError):
        ev.sweep("t", [], fake_runner)


# -- report files ----------------------------------------------------------


def odd_report():
    rng = np.random.default_rng(0)
    truth = rng.integers(0, 4, 37)
    pred = rng.integers(0, 4, 37)
    return ev.report_from_predictions(pred, truth, K=3, p_unknown=rng.random(37))


@pytest.mark.parametrize("fmt", ["json", "csv"])
def test_report_round_trip(tmp_path, fmt):
    r = odd_report()
    path = tmp_path / f"r.{fmt}"
    ev.write_report(r, path, fmt)
    assert ev.read_report(path) == r


def test_sweep_csv_layout(tmp_path):
    rows = ev.sweep("t", [0.3, 0.5, 0.7, 0.9], fake_runner)
    ev.write_report(rows, tmp_path / "s.csv", "csv", param="t")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert len(lines) == 5
    header = lines[0].split(",")
    for col in ("param", "OS", "OS_star", "ALL", "UNK"):
        assert col in header
    back = ev.read_report(tmp_path / "s.csv")
    for row, parsed in zip(rows, back):
        assert parsed["OS"] == row.report.OS and parsed["UNK"] == row.report.UNK


def test_sweep_json_round_trip(tmp_path):
    rows = ev.sweep("t", [0.3, 0.9], fake_runner)
    ev.write_report(rows, tmp_path / "s.json", "json", param="t")
    assert ev.read_report(tmp_path / "s.json") == rows


def test_invalid_format_is_usage_error(tmp_path):
    with pytest.raises(UsageError):
        ev.write_report(odd_report(), tmp_path / "r.xml", "xml")


def test_write_error_names_path(tmp_path):
    path = tmp_path / "missing" / "r.json"
    with pytest.raises(OSError, match="missing"):
        ev.write_report(odd_report(), path)


# -- feature dumps ---------------------------------------------------------


def test_dump_features_layout(tmp_path, small_model):
    model, sc = small_model
    ev.dump_features(model, sc.target, tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert len(lines) == len(sc.target)
    assert all(len(line.split(",")) == 3 for line in lines)
    table = np.array([line.split(",") for line in lines], dtype=float)
    np.testing.assert_array_equal(table[:, 0], sc.target.labels)
    np.testing.assert_array_equal(table[:, 1:], features(model, sc.target.features))


def test_dump_features_deterministic(tmp_path, small_model):
    model, sc = small_model
    ev.dump_features(model, sc.target, tmp_path / "a.csv")
    ev.dump_features(model, sc.target, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
