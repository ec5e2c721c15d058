import csv
import io
import json

import pytest

from borderwatch.errors import ConfigurationError
from borderwatch.harness import (COUNTRY_ORS, CSV_COLUMNS, REALWORLD_ORS, ExperimentPreset,
                                 ResultTable, SweepPoint, benchmark, calibrate, churn_actions,
                                 circuits_per_user, derive_seed, get_preset, kept_precision,
                                 realworld, realworld_weights, run_iteration, run_preset,
                                 scaled_template, score_params_for, smallest_threshold,
                                 sweep_churn, sweep_jurisdictions)
from borderwatch.simulator import ActionDistribution, SizeMode


def test_derive_seed():
    assert derive_seed(7, 0) == derive_seed(7, 0)
    seeds = {derive_seed(7, i) for i in range(100)}
    assert len(seeds) == 100
    assert derive_seed(8, 0) not in seeds


def test_scaled_template():
    t = scaled_template(0.1)
    assert (t.or_count, t.server_count, t.duration) == (600, 2000, 180.0)
    full = scaled_template(1.0)
    assert (full.or_count, full.server_count, full.duration) == (6000, 20000, 1800.0)
    with pytest.raises(ConfigurationError):
        scaled_template(0)


def test_benchmark_preset():
    pre = benchmark()
    assert pre.iterations == 50
    assert [p.value for p in pre.points] == ["6:fixed", "10:fixed", "15:fixed",
                                             "6:variable", "10:variable", "15:variable"]
    for p in pre.points:
        n = int(p.value.split(":")[0])
        assert p.config.jurisdiction_weights == (1.0,) * n
        assert p.config.actions == ActionDistribution(0.1, 0.1, 0.1, 0.7)
        assert p.config.sizes.mode.value == p.value.split(":")[1]
        assert p.coalition is None


def test_sweep_jurisdictions_preset():
    pre = sweep_jurisdictions()
    assert pre.iterations == 5
    assert [p.value for p in pre.points] == list(range(5, 55, 5))
    assert all(len(p.config.jurisdiction_weights) == p.value for p in pre.points)
    with pytest.raises(ConfigurationError):
        sweep_jurisdictions(step=0)


def test_sweep_churn_preset():
    pre = sweep_churn()
    assert pre.iterations == 5
    assert [p.value for p in pre.points] == [float(k) for k in range(1, 10)]
    for k, p in enumerate(pre.points):
        a = p.config.actions
        assert a.p_new_circuit == pytest.approx(0.1 * k)
        assert a.p_send_traffic == pytest.approx(0.8 - 0.1 * k)
        assert (a.p_add_user, a.p_remove_user) == (0.1, 0.1)
        assert len(p.config.jurisdiction_weights) == 20
    with pytest.raises(ConfigurationError):
        churn_actions(9, 0.1)
    assert circuits_per_user(ActionDistribution(0.3, 0.1, 0.1, 0.5)) == pytest.approx(4.0)


def test_realworld_preset():
    pre = realworld()
    assert len(pre.points) == 15
    sizes = [p.value.split(":")[0] for p in pre.points]
    assert sizes == ["Size5"] * 5 + ["Size9"] * 5 + ["Size14"] * 5
    for p in pre.points:
        size = int(p.value.split(":")[0][4:])
        assert p.coalition == tuple(range(size))
        assert p.config.exact_or_counts
        assert p.config.user_weights == p.config.server_weights == p.config.jurisdiction_weights
    news = [p.config.actions.p_new_circuit for p in pre.points[:5]]
    assert news == pytest.approx([0.0, 0.2, 0.4, 0.6, 0.8])


def test_realworld_counts_at_full_scale():
    for size in (5, 9, 14):
        counts, labels = realworld_weights(size, 1.0)
        assert counts[:-1] == tuple(c for _, c in COUNTRY_ORS[:size])
        assert sum(counts) == REALWORLD_ORS
        assert labels[-1] == "Rest of world"
    counts, _ = realworld_weights(14, 1.0, rest_of_world_ors=0)
    assert counts[-1] == 0 and sum(counts) == 4859
    assert dict(COUNTRY_ORS)["Germany"] == 1331
    with pytest.raises(ConfigurationError):
        realworld_weights(6)


def test_preset_validation():
    cfg = scaled_template(0.02)
    with pytest.raises(ConfigurationError):
        ExperimentPreset("x", 0, "v", (SweepPoint(1, cfg),))
    with pytest.raises(ConfigurationError):
        ExperimentPreset("x", 1, "v", ())
    with pytest.raises(ConfigurationError):
        ExperimentPreset("x", 1, "v", (SweepPoint(1, cfg), SweepPoint(1, cfg)))
    with pytest.raises(ConfigurationError):
        get_preset("nope")
    assert get_preset("benchmark", iterations=3, scale=None).iterations == 3


def test_run_preset_tables(tmp_path):
    pre = sweep_jurisdictions(0.02, iterations=2, start=3, step=3, count=2)
    table = run_preset(pre, 5)
    rows = list(csv.reader(io.StringIO(table.csv_text())))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) == 1 + 2 * 7
    assert table.metadata["seeds"] == [derive_seed(5, 0), derive_seed(5, 1)]
    assert len(table.iterations) == 4
    assert all(it["containment_violations"] == 0 for it in table.iterations)
    csv_path, json_path = table.write(tmp_path)
    doc = json.loads(json_path.read_text())
    assert doc["metadata"]["preset"] == "sweep-jurisdictions"
    again = run_preset(pre, 5)
    assert again.csv_text() == table.csv_text()
    assert table.median(3, "expected_max_pct") >= table.median(3, "relationship_revealing_pct")
    with pytest.raises(KeyError):
        table.median(99, "imagined_pct")


def test_result_table_formats_floats():
    t = ResultTable({}, [(1, "m", 0.1, 0.0, 1.0)])
    assert t.csv_text().splitlines()[1] == "1,m,0.1,0.0,1.0"


def test_run_iteration_counts_pairs():
    cfg = scaled_template(0.02, seed=1)
    res = run_iteration(cfg, None, score_params_for(cfg))
    assert res.score_pairs > 0
    assert res.revealed <= res.oracle


def test_smallest_threshold():
    scored = [(0.1, False), (0.2, False), (0.5, True), (0.6, False), (0.9, True), (1.0, True)]
    # isotonic fit pools 0.5 and 0.6 to 0.5; first level reaching 0.95 is 0.9
    assert smallest_threshold(scored, 0.95) == 0.9
    assert smallest_threshold(scored, 0.5) == 0.5
    assert smallest_threshold([(1.0, False)], 0.95) is None
    assert smallest_threshold([], 0.95) is None


def test_calibrate_small():
    cfg = scaled_template(0.02)
    res = calibrate(cfg, [1, 2])
    assert 0 < res.case4_threshold <= res.case5_threshold
    assert res.samples["case4"] > 0
    p = score_params_for(cfg).with_thresholds(res.case4_threshold, res.case5_threshold)
    counts = kept_precision(cfg, [3], p)
    real, kept = counts["case4"]
    assert kept > 0 and real / kept > 0.9
    assert set(res.to_json()) == {"case4_threshold", "case5_threshold", "samples", "precision"}


def test_variable_mode_params():
    cfg = scaled_template(0.02).replace(sizes=benchmark().points[3].config.sizes)
    assert cfg.sizes.mode is SizeMode.VARIABLE
    assert score_params_for(cfg).size_mode_aware
    assert score_params_for(cfg, {"window": 0.5}).window == 0.5
