import csv
import random

import pytest
from hypothesis import given, strategies as st

from conftest import tiny_config
from feddah import metrics
from feddah.federation import run_experiment


def _traj(*series):
    return {(0, f"t{i}"): [(r + 1, v) for r, v in enumerate(s)] for i, s in enumerate(series)}


def test_monotone_series_has_no_forgetting():
    assert metrics.forgetting(_traj([1.0, 0.5, 0.1])) == {"t0": 0.0}


def test_forgetting_example():
    assert metrics.forgetting(_traj([1.0, 0.2, 0.9]))["t0"] == pytest.approx(0.7, abs=1e-15)


def test_forgetting_averages_over_clients():
    traj = {(0, "a"): [(1, 1.0), (2, 0.2), (3, 0.9)], (1, "a"): [(1, 0.5), (2, 0.5)]}
    assert metrics.forgetting(traj)["a"] == pytest.approx(0.35)


def test_final_average_examples():
    assert metrics.final_average(_traj([0.9, 0.3])) == 0.3
    assert metrics.final_average(_traj([0.2], [1.0, 0.4])) == pytest.approx(0.3)


def test_trajectories_require_increasing_rounds():
    with pytest.raises(ValueError):
        metrics.trajectories([(2, 0, "a", 1.0, None), (2, 0, "a", 0.5, None)])


series = st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=12)


@given(st.lists(series, min_size=1, max_size=6))
def test_forgetting_non_negative_and_final_average_order_free(all_series):
    traj = _traj(*all_series)
    assert all(v >= 0 for v in metrics.forgetting(traj).values())
    items = list(traj.items())
    random.Random(0).shuffle(items)
    assert metrics.final_average(dict(items)) == pytest.approx(metrics.final_average(traj), rel=1e-12)


@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=12))
def test_forgetting_zero_for_sorted_descending(vals):
    assert metrics.series_forgetting(sorted(vals, reverse=True)) == 0.0


def test_summary_matches_spreadsheet_recomputation(tmp_path):
    run_experiment(tiny_config(), tmp_path)
    with open(tmp_path / "metrics.csv", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    last, best = {}, {}
    for rnd, cid, task, loss, _ in rows:
        key = (cid, task)
        last[key] = float(loss)
        best[key] = min(best.get(key, float("inf")), float(loss))
    final = sum(last.values()) / len(last)
    per_task = {}
    for (cid, task), v in last.items():
        per_task.setdefault(task, []).append(max(0.0, v - best[(cid, task)]))
    forget = sum(sum(v) / len(v) for v in per_task.values()) / len(per_task)
    s = metrics.summarize(metrics.read_metrics(tmp_path / "metrics.csv"))
    assert s["final_average"] == pytest.approx(final, rel=1e-12)
    assert s["mean_forgetting"] == pytest.approx(forget, rel=1e-12, abs=1e-15)
    assert s["lower_is_better"] is True


def test_write_trajectories(tmp_path):
    traj = {(0, "a"): [(1, 0.5), (2, 0.25)], (1, "a"): [(2, 1.0)]}
    (path,) = metrics.write_trajectories(traj, tmp_path)
    assert path.read_text().splitlines() == ["round,client_id,test_loss", "1,0,0.5", "2,0,0.25", "2,1,1.0"]
