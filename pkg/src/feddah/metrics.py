"""Post-hoc analysis of a metrics log. All values are losses: lower is better."""

from __future__ import annotations

import csv
import os
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

TrajectorySet = dict[tuple[int, str], list[tuple[int, float]]]


def trajectories(rows: Iterable[Sequence]) -> TrajectorySet:
    """Group ``(round, client_id, task_id, test_loss, ...)`` rows into per-pair series."""
    out: TrajectorySet = defaultdict(list)
    for row in rows:
        rnd, cid, task, loss = int(row[0]), int(row[1]), str(row[2]), float(row[3])
        series = out[(cid, task)]
        if series and series[-1][0] >= rnd:
            raise ValueError(f"rounds not increasing for client {cid}, task {task}")
        series.append((rnd, loss))
    return dict(out)


def read_metrics(path: str | os.PathLike) -> list[tuple]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            acc = rec.get("test_accuracy") or None
            rows.append((int(rec["round"]), int(rec["client_id"]), rec["eval_task_id"],
                         float(rec["test_loss"]), None if acc is None else float(acc)))
    return rows


def series_forgetting(losses: Sequence[float]) -> float:
    """Final loss minus the best loss seen at any point, floored at zero."""
    return max(0.0, losses[-1] - min(losses))


def forgetting(traj: Mapping[tuple[int, str], Sequence[tuple[int, float]]]) -> dict[str, float]:
    """Per-task forgetting, averaged over the clients evaluating that task."""
    per_task: dict[str, list[float]] = defaultdict(list)
    for (_, task), series in traj.items():
        if series:
            per_task[task].append(series_forgetting([l for _, l in series]))
    return {t: sum(v) / len(v) for t, v in per_task.items()}


def mean_forgetting(traj) -> float:
    f = forgetting(traj)
    return sum(f.values()) / len(f) if f else 0.0


def final_average(traj) -> float:
    finals = [series[-1][1] for series in traj.values() if series]
    if not finals:
        raise ValueError("no trajectories to average")
    return sum(finals) / len(finals)


def summarize(rows: Sequence[Sequence]) -> dict:
    traj = trajectories(rows)
    if not traj:
        return {"final_average": None, "mean_forgetting": None, "forgetting": {},
                "final": {}, "lower_is_better": True}
    final = {f"{c}/{t}": s[-1][1] for (c, t), s in sorted(traj.items())}
    return {
        "final_average": final_average(traj),
        "mean_forgetting": mean_forgetting(traj),
        "forgetting": dict(sorted(forgetting(traj).items())),
        "final": final,
        "lower_is_better": True,
    }


def write_trajectories(traj: TrajectorySet, out_dir: str | os.PathLike) -> list[Path]:
    """One CSV per task with columns round, client_id, test_loss."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_task: dict[str, list[tuple[int, int, float]]] = defaultdict(list)
    for (cid, task), series in traj.items():
        by_task[task].extend((r, cid, l) for r, l in series)
    paths = []
    for task, rows in sorted(by_task.items()):
        p = out_dir / f"{task}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("round", "client_id", "test_loss"))
            for r, cid, l in sorted(rows):
                w.writerow((r, cid, repr(l)))
        paths.append(p)
    return paths
