"""Containers and file formats for time histories and modal statistics."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError

MODAL_SCHEMA = "hbmodal.modal-dataset/1"
TH_MAGIC = "# hbmodal time-history v1"


@dataclass(frozen=True)
class TimeHistoryDataset:
    """Response-only record.

    Parameters
    ----------
    samples : (n_samples, n_channels) array
        Measured response (m/s^2 by convention).
    dt : float
        Sampling interval (s).
    observed_dofs : tuple of int
        Model DOF measured by each channel.
    """

    samples: np.ndarray
    dt: float
    observed_dofs: tuple = ()
    dataset_id: str = "dataset"

    def __post_init__(self):
        y = np.asarray(self.samples, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if y.ndim != 2:
            raise ValueError("samples must be 2-D (n_samples, n_channels)")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        dofs = tuple(int(d) for d in self.observed_dofs) or tuple(range(y.shape[1]))
        if len(dofs) != y.shape[1]:
            raise ValueError("observed_dofs must list one DOF per channel")
        y.setflags(write=False)
        object.__setattr__(self, "samples", y)
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "observed_dofs", dofs)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class SpectralModelParams:
    """Modal parameters of the spectral model within one band.

    ``phi`` is (n_channels, n_modes) with unit-norm columns, ``s_force`` the
    modal-force PSD matrix and ``s_err`` the prediction-error PSD level(s).
    """

    omega_sq: np.ndarray
    phi: np.ndarray
    zeta: np.ndarray
    s_force: np.ndarray
    s_err: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.omega_sq, float))
        nm = w.size
        phi = np.asarray(self.phi, float).reshape(-1, nm) if np.ndim(self.phi) < 2 else np.asarray(self.phi, float)
        z = np.atleast_1d(np.asarray(self.zeta, float))
        s = np.atleast_2d(np.asarray(self.s_force, float))
        e = np.atleast_1d(np.asarray(self.s_err, float))
        if phi.shape[1] != nm or z.size != nm or s.shape != (nm, nm) or e.size != nm:
            raise ValueError("inconsistent number of modes in spectral parameters")
        if np.any(np.abs(np.linalg.norm(phi, axis=0) - 1.0) > 1e-10):
            raise ValueError("mode shapes must have unit norm")
        if np.any(z <= 0) or np.any(z >= 1):
            raise ValueError("damping ratios must lie in (0, 1)")
        if np.abs(s - s.T).max() > 1e-12 * max(np.abs(s).max(), 1e-300) or np.linalg.eigvalsh(s).min() < -1e-12 * max(np.abs(s).max(), 1e-300):
            raise ValueError("s_force must be symmetric PSD")
        if np.any(e <= 0):
            raise ValueError("s_err must be positive")
        for name, val in (("omega_sq", w), ("phi", phi), ("zeta", z), ("s_force", s), ("s_err", e)):
            object.__setattr__(self, name, val)

    @property
    def n_modes(self) -> int:
        return self.omega_sq.size


@dataclass
class ModalDataset:
    """Identified modal statistics of one dataset.

    Attributes
    ----------
    omega_sq_hat : (n_modes,) array
        MPV of squared angular frequencies (rad^2/s^2).
    phi_hat : list of arrays
        Unit-norm MPV mode shapes at the observed DOFs.
    cov_omega_sq : (n_modes,) array
        Identification variances of ``omega_sq_hat``.
    cov_phi : list of arrays
        Identification covariances of ``phi_hat``.
    observed_dofs : tuple of tuples
        Model DOFs of each mode-shape entry.
    """

    omega_sq_hat: np.ndarray
    phi_hat: list
    cov_omega_sq: np.ndarray
    cov_phi: list
    observed_dofs: tuple
    dataset_id: str = "dataset"
    nuisance_hat: list = field(default_factory=list)
    cov_nuisance: list = field(default_factory=list)

    def __post_init__(self):
        self.omega_sq_hat = np.atleast_1d(np.asarray(self.omega_sq_hat, float))
        nm = self.omega_sq_hat.size
        self.phi_hat = [np.asarray(p, float) for p in self.phi_hat]
        self.cov_omega_sq = np.atleast_1d(np.asarray(self.cov_omega_sq, float))
        self.cov_phi = [np.atleast_2d(np.asarray(c, float)) for c in self.cov_phi]
        od = self.observed_dofs
        if len(od) and np.ndim(od[0]) == 0:
            od = [od] * nm
        self.observed_dofs = tuple(tuple(int(d) for d in row) for row in od)
        if not (len(self.phi_hat) == self.cov_omega_sq.size == len(self.cov_phi) == len(self.observed_dofs) == nm):
            raise ValueError("inconsistent number of modes in modal dataset")
        for i, (p, c, d) in enumerate(zip(self.phi_hat, self.cov_phi, self.observed_dofs)):
            if p.shape != (len(d),) or c.shape != (len(d), len(d)):
                raise ValueError(f"mode {i}: shape/covariance size does not match observed DOFs")
            if abs(np.linalg.norm(p) - 1.0) > 1e-8:
                raise ValueError(f"mode {i}: phi_hat must have unit norm")
            if np.abs(c - c.T).max() > 1e-10 * max(np.abs(c).max(), 1e-300):
                raise ValueError(f"mode {i}: cov_phi must be symmetric")
        if np.any(self.cov_omega_sq < 0):
            raise ValueError("identification variances must be nonnegative")

    @property
    def n_modes(self) -> int:
        return self.omega_sq_hat.size

    def without_identification_uncertainty(self) -> "ModalDataset":
        """Copy with all identification covariances set to zero."""
        return ModalDataset(
            omega_sq_hat=self.omega_sq_hat.copy(), phi_hat=[p.copy() for p in self.phi_hat],
            cov_omega_sq=np.zeros_like(self.cov_omega_sq),
            cov_phi=[np.zeros_like(c) for c in self.cov_phi], observed_dofs=self.observed_dofs,
            dataset_id=self.dataset_id, nuisance_hat=list(self.nuisance_hat),
            cov_nuisance=list(self.cov_nuisance),
        )

    def to_dict(self) -> dict:
        modes = []
        for i in range(self.n_modes):
            rec = {
                "omega_sq": float(self.omega_sq_hat[i]),
                "frequency_hz": float(np.sqrt(self.omega_sq_hat[i]) / (2 * np.pi)),
                "var_omega_sq": float(self.cov_omega_sq[i]),
                "phi": self.phi_hat[i].tolist(),
                "cov_phi": self.cov_phi[i].tolist(),
                "observed_dofs": list(self.observed_dofs[i]),
            }
            if i < len(self.nuisance_hat):
                rec["nuisance"] = {k: float(v) for k, v in self.nuisance_hat[i].items()}
            if i < len(self.cov_nuisance):
                rec["cov_nuisance"] = np.asarray(self.cov_nuisance[i]).tolist()
            modes.append(rec)
        return {"schema": MODAL_SCHEMA, "dataset_id": self.dataset_id, "modes": modes}

    @classmethod
    def from_dict(cls, d: dict) -> "ModalDataset":
        try:
            modes = d["modes"]
            return cls(
                omega_sq_hat=[m["omega_sq"] for m in modes],
                phi_hat=[m["phi"] for m in modes],
                cov_omega_sq=[m["var_omega_sq"] for m in modes],
                cov_phi=[m["cov_phi"] for m in modes],
                observed_dofs=tuple(tuple(m["observed_dofs"]) for m in modes),
                dataset_id=str(d.get("dataset_id", "dataset")),
                nuisance_hat=[m["nuisance"] for m in modes if "nuisance" in m],
                cov_nuisance=[np.asarray(m["cov_nuisance"]) for m in modes if "cov_nuisance" in m],
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed modal dataset: missing {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"malformed modal dataset: {exc}") from None


def save_modal_dataset(ds: ModalDataset, path) -> None:
    Path(path).write_text(json.dumps(ds.to_dict(), indent=2, sort_keys=True) + "\n")


def load_modal_dataset(path) -> ModalDataset:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read modal dataset: {exc}", path=str(path)) from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}: {exc.msg}", path=str(path)) from None
    try:
        return ModalDataset.from_dict(d)
    except ConfigError as exc:
        raise ConfigError(str(exc).removeprefix("[config-error] "), path=str(path)) from None


# -------------------------------------------------------------- time histories

def save_time_history(data: TimeHistoryDataset, path) -> None:
    """Write CSV (``.csv``) or numpy columnar (``.npz``) depending on suffix."""
    path = Path(path)
    if path.suffix == ".npz":
        np.savez(path, samples=data.samples, dt=data.dt, observed_dofs=np.asarray(data.observed_dofs),
                 dataset_id=np.asarray(data.dataset_id))
        return
    buf = io.StringIO()
    buf.write(f"{TH_MAGIC}\n# dataset_id: {data.dataset_id}\n# dt: {data.dt!r}\n")
    buf.write(f"# channels: {data.n_channels}\n# dofs: {','.join(map(str, data.observed_dofs))}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"ch{j}" for j in range(data.n_channels)])
    for row in data.samples:
        w.writerow([repr(float(v)) for v in row])
    path.write_text(buf.getvalue())


def load_time_history(path) -> TimeHistoryDataset:
    path = Path(path)
    if path.suffix == ".npz":
        try:
            z = np.load(path)
            return TimeHistoryDataset(samples=z["samples"], dt=float(z["dt"]),
                                      observed_dofs=tuple(int(v) for v in z["observed_dofs"]),
                                      dataset_id=str(z["dataset_id"]))
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot read time history: {exc}", path=str(path)) from None
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read time history: {exc}", path=str(path)) from None
    meta = {}
    body_start = None
    for n, line in enumerate(lines):
        if line.startswith("#"):
            if ":" in line:
                key, val = line[1:].split(":", 1)
                meta[key.strip()] = val.strip()
            continue
        body_start = n
        break
    if body_start is None or "dt" not in meta:
        raise ConfigError("time-history header must declare dt", path=str(path))
    try:
        dt = float(meta["dt"])
        nch = int(meta.get("channels", 0)) or None
        dofs = tuple(int(v) for v in meta["dofs"].split(",")) if meta.get("dofs") else ()
    except ValueError as exc:
        raise ConfigError(f"bad header value: {exc}", path=str(path)) from None
    rows = []
    for n, line in enumerate(lines[body_start + 1:], start=body_start + 2):
        if not line.strip():
            continue
        try:
            vals = [float(v) for v in line.split(",")]
        except ValueError:
            raise ConfigError("non-numeric sample", path=str(path), line=n) from None
        if nch is not None and len(vals) != nch:
            raise ConfigError(f"expected {nch} columns, found {len(vals)}", path=str(path), line=n)
        rows.append(vals)
    if not rows:
        raise ConfigError("no samples", path=str(path))
    try:
        return TimeHistoryDataset(samples=np.array(rows), dt=dt, observed_dofs=dofs,
                                  dataset_id=meta.get("dataset_id", path.stem))
    except ValueError as exc:
        raise ConfigError(str(exc).removeprefix("[config-error] "), path=str(path)) from None
