"""Command-line entry point: ``feddah run | ablate | report``."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import metrics
from .config import ABLATION_MODES, MODES, parse_config
from .errors import FedDAHError
from .federation import run_experiment

# flag name -> config key; every value is parsed by the config layer
OVERRIDES = {
    "seed": "seed", "mode": "mode", "E": "E", "T": "T", "n_z": "n_z", "d": "d",
    "mu_spacing": "mu_spacing", "sigma": "sigma", "beta": "beta", "beta1": "beta1",
    "beta2": "beta2", "n_inner": "n_inner", "n_server": "n_server", "lr_client": "lr_client",
    "lr_server": "lr_server", "bins": "bins", "smoothing": "smoothing", "out": "output_dir",
    "samples_per_task": "samples_per_task", "noise": "noise",
}


def _fail(exc: Exception) -> None:
    record = {"error": type(exc).__name__, "message": str(exc)}
    click.echo(json.dumps(record), err=True)
    sys.exit(2)


def _override_options(f):
    opts = [
        click.option("--seed", type=int), click.option("--mode", type=str),
        click.option("--E", "E", type=int), click.option("--T", "T", type=int),
        click.option("--n-z", "n_z", type=int), click.option("--d", "d", type=int),
        click.option("--mu-spacing", type=float), click.option("--sigma", type=float),
        click.option("--beta", type=float), click.option("--beta1", type=float),
        click.option("--beta2", type=float), click.option("--n-inner", type=int),
        click.option("--n-server", type=int), click.option("--lr-client", type=float),
        click.option("--lr-server", type=float), click.option("--bins", type=int),
        click.option("--smoothing", type=float), click.option("--samples-per-task", type=int),
        click.option("--noise", type=float), click.option("--out", type=str),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def _collect(kwargs) -> dict:
    return {OVERRIDES[k]: v for k, v in kwargs.items() if k in OVERRIDES and v is not None}


@click.group()
def main():
    """Federated continual learning with a task-conditioned hypernetwork server."""


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@_override_options
def run(config_path, **kwargs):
    """Run one experiment."""
    try:
        cfg = parse_config(config_path, _collect(kwargs))
        result = run_experiment(cfg)
        summary = json.loads((result.out_dir / "summary.json").read_text())
        click.echo(json.dumps({"out": str(result.out_dir), "mode": cfg.mode,
                               "final_average": summary["final_average"],
                               "mean_forgetting": summary["mean_forgetting"]}))
    except (FedDAHError, OSError) as exc:
        _fail(exc)


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seeds", type=str, default="0,1,2,3,4", show_default=True)
@click.option("--modes", type=str, default=",".join(ABLATION_MODES), show_default=True)
@_override_options
def ablate(config_path, seeds, modes, **kwargs):
    """Run every ablation mode on every seed: <out>/<mode>/seed<N>/."""
    try:
        base = _collect(kwargs)
        base.pop("mode", None)
        seed_list = [int(s) for s in seeds.split(",") if s.strip()]
        mode_list = [m.strip() for m in modes.split(",") if m.strip()]
        for m in mode_list:
            if m not in MODES:
                raise click.BadParameter(f"unknown mode {m!r}; choose from {', '.join(MODES)}")
        root = Path(parse_config(config_path, base).output_dir)
        for mode in mode_list:
            for seed in seed_list:
                cfg = parse_config(config_path, dict(base, mode=mode, seed=seed))
                out = root / mode / f"seed{seed}"
                run_experiment(cfg, out)
                click.echo(f"{mode} seed={seed} -> {out}")
    except (FedDAHError, OSError, ValueError) as exc:
        _fail(exc)


@main.command()
@click.option("--dir", "directory", type=click.Path(exists=True, file_okay=False), required=True)
def report(directory):
    """Summarize every metrics.csv under a directory into summary.json."""
    try:
        summary = build_report(Path(directory))
        (Path(directory) / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        click.echo(json.dumps(summary["table"], indent=2))
    except (FedDAHError, OSError, ValueError) as exc:
        _fail(exc)


def build_report(root: Path) -> dict:
    """Per-run metrics plus a mode-ordered table of mean final_average / forgetting."""
    runs = {}
    for csv_path in sorted(root.rglob("metrics.csv")):
        rel = csv_path.parent.relative_to(root)
        rows = metrics.read_metrics(csv_path)
        s = metrics.summarize(rows)
        runs[str(rel)] = {"final_average": s["final_average"], "mean_forgetting": s["mean_forgetting"]}
        traj = metrics.trajectories(rows)
        if traj:
            metrics.write_trajectories(traj, csv_path.parent / "trajectories")
    table = []
    order = {m: i for i, m in enumerate(MODES)}
    by_mode: dict[str, list[dict]] = {}
    for rel, s in runs.items():
        by_mode.setdefault(Path(rel).parts[0] if Path(rel).parts else ".", []).append(s)
    for mode in sorted(by_mode, key=lambda m: (order.get(m, len(order)), m)):
        vals = [s for s in by_mode[mode] if s["final_average"] is not None]
        if not vals:
            continue
        table.append({"mode": mode, "runs": len(vals),
                      "final_average": sum(v["final_average"] for v in vals) / len(vals),
                      "mean_forgetting": sum(v["mean_forgetting"] for v in vals) / len(vals)})
    return {"runs": runs, "table": table, "lower_is_better": True}


if __name__ == "__main__":
    main()
