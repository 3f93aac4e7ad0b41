"""Command-line interface.

Exit status: 0 on success, 1 on numerical failure, 2 on configuration or
IO failure.  The log level is read from ``HBMODAL_LOG_LEVEL``.
"""
from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click

from .config import load_config
from .errors import ConfigError, HBMError

LOG_ENV = "HBMODAL_LOG_LEVEL"


def _setup_logging():
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _guard(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    except HBMError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.exit_status)


def _config(path, tol, seed, output_dir):
    return load_config(path).with_overrides(tol=tol, seed=seed, output_dir=output_dir)


_overrides = [
    click.option("--tol", type=float, default=None, help="Convergence tolerance."),
    click.option("--seed", type=int, default=None, help="Sampler seed."),
    click.option("--output-dir", "-o", type=click.Path(file_okay=False), default=None, help="Output directory."),
]


def overrides(f):
    for opt in reversed(_overrides):
        f = opt(f)
    return f


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Hierarchical Bayesian model updating from multiple modal datasets."""
    _setup_logging()


@main.command()
@click.argument("config", type=click.Path(dir_okay=False))
@overrides
def run(config, tol, seed, output_dir):
    """Full pipeline: identification, ECM, Laplace + EM and optional sampling."""
    from .pipeline import run_pipeline

    def go():
        cfg = _config(config, tol, seed, output_dir)
        rep = run_pipeline(cfg)
        echo_summary(rep)
        return rep

    _guard(go)


@main.command()
@click.argument("config", type=click.Path(dir_okay=False))
@overrides
def identify(config, tol, seed, output_dir):
    """Identification only: write one modal dataset JSON per record."""
    from .pipeline import identify_only

    def go():
        cfg = _config(config, tol, seed, output_dir)
        for ds in identify_only(cfg):
            f = ", ".join(f"{v:.6g}" for v in (ds.omega_sq_hat ** 0.5) / (2 * 3.141592653589793))
            click.echo(f"{ds.dataset_id}: f = [{f}] Hz")

    _guard(go)


@main.command()
@click.argument("config", type=click.Path(dir_okay=False))
@overrides
def sample(config, tol, seed, output_dir):
    """Sampler only (both stages and, if configured, model comparison)."""
    from .pipeline import run_pipeline

    def go():
        rep = run_pipeline(_config(config, tol, seed, output_dir), sample_only=True)
        echo_summary(rep)

    _guard(go)


@main.command("synth-5-1")
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--config-only", is_flag=True, help="Write the data and a config file without running.")
def synth(out_dir, config_only):
    """Write the two-story synthetic datasets, model and a config, then run the pipeline."""
    from .fem import save_model
    from .pipeline import run_pipeline
    from .config import PipelineConfig
    from .report import write_datasets
    from .synthetic import synthetic_case_5_1

    def go():
        out = Path(out_dir)
        model, datasets = synthetic_case_5_1()
        paths = write_datasets(datasets, out)
        try:
            save_model(model, out / "model.json")
        except OSError as exc:
            raise ConfigError(f"cannot write model: {exc}", path=str(out)) from None
        cfg = {"model": "model.json", "datasets": {"modal": [str(p.relative_to(out)) for p in paths]},
               "output_dir": "report", "tol": 1e-6, "max_iter": 500, "isotropic": True}
        (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
        click.echo(f"wrote {len(paths)} datasets, model.json and config.json to {out}")
        if not config_only:
            rep = run_pipeline(PipelineConfig.from_dict(cfg, base_dir=out))
            echo_summary(rep)

    _guard(go)


def echo_summary(rep):
    for p in rep.posteriors:
        click.echo(f"{p.dataset_id}: theta = {[round(float(v), 6) for v in p.theta_hat]}")
    if rep.hyper is not None:
        click.echo(f"mu0 = {rep.hyper.mu0.tolist()}  sigma0 = {rep.hyper.sigma0.tolist()}")
    if rep.discrepancy is not None:
        click.echo(f"tau_sq = {rep.discrepancy.tau_sq.tolist()}  "
                   f"sigma_phi_sq = {rep.discrepancy.sigma_phi_scalar.tolist()}")
    if rep.sampling is not None:
        s2 = rep.sampling.stage2
        click.echo("stage 2 means: " + ", ".join(f"{n}={v:.6g}" for n, v in zip(s2.names, s2.mean())))
        if rep.sampling.comparison is not None:
            for k, v in rep.sampling.comparison.to_dict().items():
                click.echo(f"model {k}: evidence_log={v['evidence_log']:.4f} bic={v['bic']:.4f} "
                           f"P={v['probability']:.3g}")
    click.echo("status: " + ", ".join(f"{k}={v}" for k, v in sorted(rep.status.items())))
    click.echo(f"output: {rep.config.output_dir}")


if __name__ == "__main__":
    main()
