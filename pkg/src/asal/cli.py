"""Command-line entry point: train, deploy, bench, sample-tasks, gradcheck, report.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .config import (
    ConfigError,
    config_hash,
    deploy_config,
    file_digest,
    load_config,
    parse_value,
    section,
    train_config,
)

EXIT_OK, EXIT_INVALID, EXIT_FAILURE = 0, 1, 2
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
SAFE_METHODS = ["safe_gp_al", "minunsafe_gp_al", "safe_random"]
PLAIN_METHODS = ["gp_al", "random"]


class CheckFailed(RuntimeError):
    pass


def _overrides(pairs) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = parse_value(value.strip())
    return out


def _append_records(path: Path, records: list):
    # single appender: workers return records, only this process writes
    with open(path, "a") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False), help="TOML file of dotted keys.")
set_option = click.option("--set", "sets", multiple=True, metavar="KEY=VALUE", help="Override a config key.")


@click.group()
def cli():
    """Amortized safe active learning toolkit."""


# -- train ---------------------------------------------------------------------------


@cli.command()
@config_option
@set_option
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")
@click.option("--force", is_flag=True, help="Overwrite an existing checkpoint.")
@click.option("--resume", is_flag=True, help="Continue from the saved training state.")
@click.option("--no-monitor", is_flag=True, help="Skip per-epoch held-out deployment.")
def train(config_path, sets, seed, out, force, resume, no_monitor):
    """Train a query policy on simulated GP tasks."""
    from .policy import save_checkpoint
    from .report import plot_training
    from .trainer import train as run_training

    flat = load_config(config_path, _overrides(sets))
    cfg = train_config(flat, seed)
    out = Path(out or flat.get("out") or "runs/train")
    checkpoint = out / "policy.npz"
    if checkpoint.exists() and not (force or resume):
        raise ConfigError(f"{checkpoint} exists; pass --force to overwrite or --resume to continue")
    out.mkdir(parents=True, exist_ok=True)
    result = run_training(cfg, out_dir=out, resume=resume, monitor=not no_monitor)
    save_checkpoint(result.policy, checkpoint, extra_header={"train_config": cfg.to_dict()})
    plot_training(result.log if not resume else _read_jsonl(out / "train_log.jsonl"), out / "training.png")
    summary = {
        "command": "train",
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
        "steps": len(result.losses),
        "final_loss": result.losses[-1] if result.losses else None,
        "best_epoch": result.best_epoch,
        "skipped_steps": result.skipped,
        "epoch_rmse": result.epoch_rmse,
        "checkpoint": str(checkpoint),
        "n_parameters": result.policy.n_parameters,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    click.echo(json.dumps({k: summary[k] for k in ("config_hash", "steps", "final_loss", "best_epoch")}))


def _read_jsonl(path):
    from .report import read_records

    return read_records(path) if Path(path).exists() else []


# -- deploy / bench ------------------------------------------------------------------


def _jobs(flat, methods, problems, seeds, checkpoint):
    from .baselines import SAFE_MODES, Job
    from .benchmarks import get_problem

    pool_kwargs = section(flat, "pool")
    jobs, hashes = [], []
    ckpt_digest = file_digest(checkpoint) if checkpoint else None
    for problem in problems:
        try:
            has_safety = get_problem(problem, **pool_kwargs).has_safety
        except (TypeError, ValueError, OSError) as exc:
            raise ConfigError(f"cannot load problem {problem!r}: {exc}") from exc
        chosen = list(methods) if methods else (SAFE_METHODS if has_safety else PLAIN_METHODS) + (
            ["policy"] if checkpoint else []
        )
        for method in chosen:
            if method in SAFE_MODES and not has_safety:
                raise ConfigError(f"method {method} needs a constrained problem, {problem} has none")
            if method == "policy" and not checkpoint:
                raise ConfigError("method 'policy' needs --checkpoint")
            for seed in seeds:
                cfg = deploy_config(flat, method, seed)
                payload = {
                    "problem": problem,
                    "pool": pool_kwargs,
                    "deploy": {k: v for k, v in cfg.__dict__.items() if k != "seed"},
                    "checkpoint": ckpt_digest if method == "policy" else None,
                }
                jobs.append(Job(problem, cfg, str(checkpoint) if method == "policy" else None, pool_kwargs))
                hashes.append(config_hash(payload))
    return jobs, hashes


def _resolve_run_options(flat, method, problem, seed, gamma, budget, checkpoint):
    if gamma is not None:
        flat["deploy.gamma"] = gamma
    if budget is not None:
        flat["deploy.T"] = budget
    methods = list(method) or flat.get("deploy.methods") or []
    problems = list(problem) or flat.get("deploy.problems") or []
    if not problems:
        raise ConfigError("no problem selected (use --problem or deploy.problems)")
    seeds = list(seed) or flat.get("seeds") or ([flat["seed"]] if "seed" in flat else list(DEFAULT_SEEDS))
    checkpoint = checkpoint or flat.get("deploy.checkpoint")
    if checkpoint and not Path(checkpoint).exists():
        raise ConfigError(f"checkpoint {checkpoint} not found")
    return methods, problems, seeds, checkpoint


def _run(flat, methods, problems, seeds, checkpoint):
    from .baselines import run_jobs

    jobs, hashes = _jobs(flat, methods, problems, seeds, checkpoint)
    records = run_jobs(jobs)
    for rec, h in zip(records, hashes):
        rec["config_hash"] = h
    return records


run_options = [
    config_option,
    set_option,
    click.option("--method", multiple=True, help="Method (repeatable)."),
    click.option("--problem", multiple=True, help="Problem name or CSV pool path (repeatable)."),
    click.option("--seed", multiple=True, type=int, help="Seed (repeatable)."),
    click.option("--gamma", type=float, default=None),
    click.option("--budget", type=int, default=None, help="Number of queries T."),
    click.option("--checkpoint", type=click.Path(dir_okay=False), default=None),
    click.option("--out", type=click.Path(), default=None),
]


def _with_run_options(fn):
    for option in reversed(run_options):
        fn = option(fn)
    return fn


@cli.command()
@_with_run_options
def deploy(config_path, sets, method, problem, seed, gamma, budget, checkpoint, out):
    """Run methods on problems and append one record per run."""
    from .report import aggregate, format_table

    flat = load_config(config_path, _overrides(sets))
    methods, problems, seeds, checkpoint = _resolve_run_options(flat, method, problem, seed, gamma, budget, checkpoint)
    out = Path(out or flat.get("out") or "runs/deploy.jsonl")
    records = _run(flat, methods, problems, seeds, checkpoint)
    out.parent.mkdir(parents=True, exist_ok=True)
    _append_records(out, records)
    click.echo(format_table(aggregate(records)))
    click.echo(f"wrote {len(records)} records to {out}")


@cli.command()
@_with_run_options
@click.option("--reference", default=None, help="Method used as the timing-ratio denominator.")
def bench(config_path, sets, method, problem, seed, gamma, budget, checkpoint, out, reference):
    """Compare methods across seeds: records, summary and a text table."""
    from .report import aggregate, format_table, write_csv

    flat = load_config(config_path, _overrides(sets))
    methods, problems, seeds, checkpoint = _resolve_run_options(flat, method, problem, seed, gamma, budget, checkpoint)
    out = Path(out or flat.get("out") or "runs/bench")
    records = _run(flat, methods, problems, seeds, checkpoint)
    out.mkdir(parents=True, exist_ok=True)
    (out / "records.jsonl").unlink(missing_ok=True)
    _append_records(out / "records.jsonl", records)
    rows = aggregate(records, reference=reference)
    (out / "summary.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    write_csv(rows, out / "summary.csv")
    table = format_table(rows)
    (out / "table.txt").write_text(table + "\n")
    click.echo(table)


# -- sample-tasks ----------------------------------------------------------------------


@cli.command("sample-tasks")
@config_option
@set_option
@click.option("--dim", type=int, default=1)
@click.option("--count", type=int, default=10)
@click.option("--n-init", type=int, default=1)
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(dir_okay=False), default="tasks.npz")
def sample_tasks(config_path, sets, dim, count, n_init, seed, out):
    """Draw safe-AL tasks from the training prior and dump them to .npz."""
    from .sampling import dump_tasks, sample_hyperparams, sample_task

    load_config(config_path, _overrides(sets))
    if dim < 1 or count < 1 or n_init < 1:
        raise ConfigError("dim, count and n-init must be >= 1")
    rng = np.random.default_rng(seed)
    tasks = [sample_task(sample_hyperparams(dim, rng), n_init, rng=rng) for _ in range(count)]
    path = dump_tasks(tasks, out)
    n_fallback = sum(not t.safe_seeded for t in tasks)
    click.echo(f"wrote {count} tasks to {path} ({n_fallback} without a fully safe initial set)")


# -- gradcheck -----------------------------------------------------------------------


@cli.command()
@click.option("--dim", "dims", multiple=True, type=int, help="Input dimension (repeatable; default 1 and 2).")
@click.option("--objective", "objectives", multiple=True, help="Objective (repeatable; default all).")
@click.option("--seed", type=int, default=0)
@click.option("--tolerance", type=float, default=1e-3)
@click.option("--flip-sign", is_flag=True, hidden=True, help="Negate autograd gradients (self-test).")
def gradcheck(dims, objectives, seed, tolerance, flip_sign):
    """Finite-difference check of policy gradients for every objective."""
    from .gradcheck import run_suite
    from .objectives import OBJECTIVES

    for o in objectives:
        if o not in OBJECTIVES:
            raise ConfigError(f"unknown objective {o!r}; choose from {OBJECTIVES}")
    results = run_suite(dims or (1, 2), objectives or OBJECTIVES, seed, flip_sign)
    failed = 0
    for r in results:
        ok = r.passed(tolerance)
        failed += not ok
        click.echo(f"{'PASS' if ok else 'FAIL'} {r.objective:<13} D={r.dim} rel_err={r.error:.2e} |grad|={r.grad_norm:.3e}")
    if failed:
        raise CheckFailed(f"{failed} gradient checks failed")


# -- report ------------------------------------------------------------------------------


@cli.command()
@click.option("--results", type=click.Path(exists=True, dir_okay=False), default=None, help="Run records (.jsonl).")
@click.option("--train-log", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--gamma", type=float, default=None, help="Draw the 1-gamma line on safety panels.")
@click.option("--reference", default=None)
@click.option("--out", type=click.Path(file_okay=False), default="report")
def report(results, train_log, gamma, reference, out):
    """Render summary figures (PNG) and a CSV table from recorded runs."""
    from .report import aggregate, format_table, plot_results, plot_training, read_records, write_csv

    if results is None and train_log is None:
        raise ConfigError("nothing to report: pass --results and/or --train-log")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if results is not None:
        records = read_records(results)
        if not records:
            raise ConfigError(f"{results} holds no records")
        rows = aggregate(records, reference=reference)
        write_csv(rows, out / "summary.csv")
        for path in plot_results(rows, out, gamma):
            click.echo(f"figure {path}")
        click.echo(format_table(rows))
    if train_log is not None:
        click.echo(f"figure {plot_training(read_records(train_log), out / 'training.png')}")


def main(argv=None):
    """Console entry point with the documented exit codes."""
    from .benchmarks import SchemaError
    from .policy import CheckpointError

    try:
        cli.main(args=argv, prog_name="asal", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_FAILURE
    except click.ClickException as exc:
        exc.show()
        return EXIT_INVALID
    except (ConfigError, SchemaError, CheckpointError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_INVALID
    except CheckFailed as exc:
        click.echo(f"failed: {exc}", err=True)
        return EXIT_FAILURE
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        click.echo(f"runtime failure: {type(exc).__name__}: {exc}", err=True)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
