"""Report and plot-data emission.

All files are written deterministically (sorted keys, ``repr`` floats, no
timestamps) so identical inputs and seeds give byte-identical outputs.
"""
from __future__ import annotations

import csv
import io
import json
import math
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .errors import ConfigError
from .pipeline import RunReport, analytical_modal_stats, pairwise_gaussian

REPORT_SCHEMA = "hbmodal.report/1"
TWO_PI = 2 * math.pi


def load_schema() -> dict:
    return json.loads(resources.files("hbmodal").joinpath("schema/report.schema.json").read_text())


def _num(x):
    if isinstance(x, (list, tuple)):
        return [_num(v) for v in x]
    if isinstance(x, np.ndarray):
        return _num(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


def _hz(omega_sq, sd_omega_sq):
    """Frequency (Hz) and its first-order S.D. from ``omega_sq`` statistics."""
    w = np.sqrt(np.asarray(omega_sq, float))
    return w / TWO_PI, np.asarray(sd_omega_sq, float) / (2 * TWO_PI * w)


def modal_rows(report: RunReport) -> list:
    """One row per dataset and mode: experimental and analytical statistics."""
    rows = []
    for s, ds in enumerate(report.datasets):
        post = report.posteriors[s] if report.posteriors else None
        an_w = an_sd = None
        if post is not None:
            an_w, an_sd = analytical_modal_stats(report.model, post.theta_hat, post.cov_theta, ds)
        sd = np.sqrt(ds.cov_omega_sq)
        f, sdf = _hz(ds.omega_sq_hat, sd)
        for i in range(ds.n_modes):
            row = {"dataset": ds.dataset_id, "mode": i + 1,
                   "experimental": {"omega_sq": ds.omega_sq_hat[i], "sd_omega_sq": sd[i],
                                    "frequency_hz": f[i], "sd_frequency_hz": sdf[i]},
                   "analytical": None}
            if an_w is not None:
                fa, sdfa = _hz(an_w[i], an_sd[i])
                row["analytical"] = {"omega_sq": an_w[i], "sd_omega_sq": an_sd[i], "frequency_hz": fa,
                                     "sd_frequency_hz": sdfa}
            rows.append(row)
    return rows


def _pairwise(report):
    hyper = report.hyper
    if hyper is None:
        return []
    out = []
    n = hyper.mu0.size
    for i in range(n):
        for j in range(i + 1, n):
            mean, cov, rho, flag = pairwise_gaussian(hyper, i, j)
            out.append({"i": i, "j": j, "mean": mean, "cov": cov, "rho": rho, "zero_variance": flag})
    return out


def _sampling_dict(report):
    sm = report.sampling
    if sm is None:
        return None
    s1, s2 = sm.stage1.samples, sm.stage2
    cfg = report.config.sampler
    out = {
        "n_samples": cfg.n_samples, "seed": cfg.seed, "mh_steps": cfg.mh_steps,
        "stage1": {"names": list(s1.names), "mean": s1.mean(), "sd": s1.draws.std(axis=0),
                   "evidence_log": s1.evidence_log, "beta_schedule": s1.beta_schedule},
        "stage2": {"names": list(s2.names), "mean": s2.mean(), "sd": s2.draws.std(axis=0),
                   "median": np.median(s2.draws, axis=0), "beta_schedule": s2.beta_schedule},
        "comparison": None if sm.comparison is None else sm.comparison.to_dict(),
    }
    return out


def report_dict(report: RunReport) -> dict:
    """JSON-ready content of ``report``."""
    cfg = report.config
    model = report.model
    nt = model.n_theta
    names = list(model.parameter_names) or [f"theta{p + 1}" for p in range(nt)]
    posts = report.posteriors
    d = {
        "schema": REPORT_SCHEMA,
        "metadata": {
            "source": cfg.source, "ignore_identification": cfg.ignore_identification,
            "isotropic": cfg.isotropic, "tol": cfg.tol, "max_iter": cfg.max_iter,
            "n_datasets": len(report.datasets), "n_modes": report.datasets[0].n_modes, "n_theta": nt,
            "parameter_names": names, "model": model.name,
        },
        "status": dict(sorted(report.status.items())),
        "datasets": [{"dataset_id": p.dataset_id, "theta_hat": p.theta_hat, "cov_theta": p.cov_theta,
                      "e_theta": p.e_theta, "j_value": p.j_value} for p in posts],
        "ensemble": None,
        "hyper": None if report.hyper is None else report.hyper.to_dict(),
        "discrepancy": None if report.discrepancy is None else report.discrepancy.to_dict(),
        "modal_table": modal_rows(report),
        "pairwise": _pairwise(report),
        "ecm": None,
        "em": None,
        "sampling": _sampling_dict(report),
    }
    if posts:
        th = np.array([p.theta_hat for p in posts])
        d["ensemble"] = {"mean": th.mean(axis=0), "sd": th.std(axis=0, ddof=1) if len(posts) > 1 else np.zeros(nt)}
    if report.ecm is not None:
        d["ecm"] = {"status": report.ecm.status, "n_iter": report.ecm.n_iter, "objective": report.ecm.objective}
    if report.em is not None:
        d["em"] = {"status": report.em.status, "n_iter": report.em.n_iter, "loglik": report.em.loglik}
    return _clean(d)


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_clean(v) for v in (x.tolist() if isinstance(x, np.ndarray) else x)]
    return _num(x)


def validate_report(d: dict) -> None:
    jsonschema.validate(d, load_schema())


def estimate_rows(report: RunReport) -> list:
    """Rows ``(parameter, em, sampling)`` in the layout of a method-comparison table."""
    rows = []
    nd = len(report.datasets)
    nt = report.model.n_theta
    samp = report.sampling
    s1 = samp.stage1.samples.mean() if samp else None
    s2 = dict(zip(samp.stage2.names, samp.stage2.mean())) if samp else {}
    for s in range(nd):
        for p in range(nt):
            em = report.posteriors[s].theta_hat[p] if report.posteriors else None
            name = f"theta{s + 1}" if nt == 1 else f"theta{s + 1}_{p + 1}"
            rows.append((name, em, None if s1 is None else s1[s * nt + p]))
    hyper = report.hyper
    for p in range(nt):
        rows.append((f"mu{p + 1}", None if hyper is None else hyper.mu0[p], s2.get(f"mu{p + 1}")))
    for p in range(nt):
        rows.append((f"sigma_theta_sq{p + 1}", None if hyper is None else hyper.sigma0[p, p],
                     s2.get(f"sigma_theta_sq{p + 1}")))
    disc = report.discrepancy
    nm = report.datasets[0].n_modes
    tg = samp.stage1.target if samp else None
    tau_s = sig_s = None
    if samp:
        tau_s, sig_s = tg.variances(s1[None, :])
        tau_s, sig_s = tau_s[0], sig_s[0]
    for i in range(nm):
        rows.append((f"tau_sq{i + 1}", None if disc is None else disc.tau_sq[i], None if tau_s is None else tau_s[i]))
    for i in range(nm):
        rows.append((f"sigma_phi_sq{i + 1}", None if disc is None else disc.sigma_phi_scalar[i],
                     None if sig_s is None else sig_s[i]))
    return rows


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _write(path: Path, text: str):
    try:
        path.write_text(text)
    except OSError as exc:
        raise ConfigError(f"cannot write output: {exc}", path=str(path)) from None


def _ndjson(records) -> str:
    return "".join(json.dumps(_clean(r), sort_keys=True) + "\n" for r in records)


def write_datasets(datasets, out_dir) -> list:
    out = Path(out_dir) / "datasets"
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory: {exc}", path=str(out)) from None
    paths = []
    for ds in datasets:
        p = out / f"{ds.dataset_id}.json"
        _write(p, json.dumps(ds.to_dict(), indent=2, sort_keys=True) + "\n")
        paths.append(p)
    return paths


def emit_report(report: RunReport, out_dir) -> list:
    """Write the report JSON, CSV tables, NDJSON traces and sample dumps.

    Returns the written paths.  Existing files are overwritten.
    """
    out = Path(out_dir)
    paths = write_datasets(report.datasets, out)
    d = report_dict(report)
    validate_report(d)
    files = {"report.json": json.dumps(d, indent=2, sort_keys=True) + "\n",
             "estimates.csv": _csv(estimate_rows(report), ["parameter", "em", "sampling"])}
    mrows = []
    for r in d["modal_table"]:
        for src in ("experimental", "analytical"):
            v = r[src]
            if v is not None:
                mrows.append((r["dataset"], r["mode"], src, v["omega_sq"], v["sd_omega_sq"], v["frequency_hz"],
                              v["sd_frequency_hz"]))
    files["modal_table.csv"] = _csv(mrows, ["dataset", "mode", "source", "omega_sq", "sd_omega_sq",
                                            "frequency_hz", "sd_frequency_hz"])
    if report.posteriors:
        names = d["metadata"]["parameter_names"]
        th = np.array([p.theta_hat for p in report.posteriors])
        ens = d["ensemble"]
        rows = [(names[p], *th[:, p], ens["mean"][p], ens["sd"][p]) for p in range(th.shape[1])]
        files["theta_table.csv"] = _csv(rows, ["parameter", *[p.dataset_id for p in report.posteriors],
                                               "ensemble_mean", "ensemble_sd"])
    if d["pairwise"]:
        files["pairwise.csv"] = _csv(
            [(p["i"], p["j"], *p["mean"], p["cov"][0][0], p["cov"][1][1], p["cov"][0][1], p["rho"],
              p["zero_variance"]) for p in d["pairwise"]],
            ["i", "j", "mean_i", "mean_j", "var_i", "var_j", "cov_ij", "rho", "zero_variance"])
    if report.ecm is not None:
        files["ecm_trace.ndjson"] = _ndjson(report.ecm.trace)
    if report.em is not None:
        files["em_trace.ndjson"] = _ndjson(report.em.trace)
    if report.sampling is not None:
        s1 = report.sampling.stage1.samples
        files["samples_stage1.csv"] = _csv(s1.draws, list(s1.names))
        s2 = report.sampling.stage2
        files["samples_stage2.csv"] = _csv(s2.draws, list(s2.names))
    for name, text in files.items():
        p = out / name
        _write(p, text)
        paths.append(p)
    return paths
