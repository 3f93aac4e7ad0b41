"""Parameterized linear structural models and their real modes.

A model class is ``K(theta) = K0 + sum_p theta_p K_p`` and
``M(theta) = M0 + sum_q theta_{Nk+q} M_q``.  Modes are computed from the
generalized symmetric eigenproblem and paired with experimental modes by
the modal assurance criterion (MAC).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from .errors import ConfigError, DegenerateSpectrum, InadmissibleParameters, ModeMatchingFailed

SYM_RTOL = 1e-12
EIG_GAP_RTOL = 1e-10
RESIDUAL_RTOL = 1e-8
MAC_FLOOR = 0.5


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _check_symmetric(a, name):
    scale = max(np.abs(a).max(), np.finfo(float).tiny)
    if np.abs(a - a.T).max() > SYM_RTOL * scale:
        raise ValueError(f"{name} is not symmetric")


@dataclass(frozen=True)
class StructuralModelClass:
    """Substructure matrices of a model class linear in its parameters.

    Parameters
    ----------
    k0, m0 : (n, n) array_like
        Known stiffness (N/m) and mass (kg) parts.
    k_sub, m_sub : sequence of (n, n) array_like
        Stiffness substructures scaled by ``theta[:Nk]`` and mass
        substructures scaled by ``theta[Nk:]``.
    theta_lower, theta_upper : array_like, optional
        Admissible box.  Defaults to ``(0, inf)``.
    theta_nominal : array_like, optional
        Nominal parameters used for initialization.  Defaults to ones.
    """

    k0: np.ndarray
    m0: np.ndarray
    k_sub: tuple = ()
    m_sub: tuple = ()
    theta_lower: np.ndarray | None = None
    theta_upper: np.ndarray | None = None
    theta_nominal: np.ndarray | None = None
    name: str = "model"
    parameter_names: tuple = field(default=())

    def __post_init__(self):
        k0 = _frozen(self.k0)
        m0 = _frozen(self.m0)
        n = k0.shape[0]
        if k0.shape != (n, n) or m0.shape != (n, n):
            raise ValueError("k0 and m0 must be square with equal size")
        k_sub = tuple(_frozen(k) for k in self.k_sub)
        m_sub = tuple(_frozen(m) for m in self.m_sub)
        for label, mats in (("k0", [k0]), ("m0", [m0]), ("k_sub", k_sub), ("m_sub", m_sub)):
            for i, a in enumerate(mats):
                if a.shape != (n, n):
                    raise ValueError(f"{label}[{i}] has shape {a.shape}, expected {(n, n)}")
                _check_symmetric(a, f"{label}[{i}]")
        nt = len(k_sub) + len(m_sub)
        lo = np.zeros(nt) if self.theta_lower is None else np.asarray(self.theta_lower, float)
        hi = np.full(nt, np.inf) if self.theta_upper is None else np.asarray(self.theta_upper, float)
        nom = np.ones(nt) if self.theta_nominal is None else np.asarray(self.theta_nominal, float)
        if lo.shape != (nt,) or hi.shape != (nt,) or nom.shape != (nt,):
            raise ValueError("theta box / nominal must have length n_theta")
        if np.any(lo >= hi):
            raise ValueError("theta_lower must be below theta_upper")
        names = tuple(self.parameter_names) or tuple(f"theta{p + 1}" for p in range(nt))
        if len(names) != nt:
            raise ValueError("parameter_names must have length n_theta")
        object.__setattr__(self, "k0", k0)
        object.__setattr__(self, "m0", m0)
        object.__setattr__(self, "k_sub", k_sub)
        object.__setattr__(self, "m_sub", m_sub)
        object.__setattr__(self, "theta_lower", _frozen(lo))
        object.__setattr__(self, "theta_upper", _frozen(hi))
        object.__setattr__(self, "theta_nominal", _frozen(nom))
        object.__setattr__(self, "parameter_names", names)

    @property
    def n_dof(self) -> int:
        return self.k0.shape[0]

    @property
    def n_theta(self) -> int:
        return len(self.k_sub) + len(self.m_sub)

    @property
    def n_k(self) -> int:
        return len(self.k_sub)

    def derivative_matrices(self, p: int):
        """Return ``(dK/dtheta_p, dM/dtheta_p)``; one of them is zero."""
        zero = np.zeros_like(self.k0)
        if p < self.n_k:
            return self.k_sub[p], zero
        return zero, self.m_sub[p - self.n_k]

    def in_box(self, theta) -> bool:
        theta = np.asarray(theta, float)
        return bool(np.all(theta >= self.theta_lower) and np.all(theta <= self.theta_upper))


@dataclass(frozen=True)
class AnalyticalModes:
    """Lowest modes of ``(K, M)``: ascending ``omega_sq`` and unit-norm ``psi`` columns."""

    omega_sq: np.ndarray
    psi: np.ndarray  # (n_dof, n_modes), columns are modes

    def __post_init__(self):
        object.__setattr__(self, "omega_sq", _frozen(self.omega_sq))
        object.__setattr__(self, "psi", _frozen(self.psi))

    @property
    def n_modes(self) -> int:
        return self.omega_sq.shape[0]


@dataclass(frozen=True)
class ModeMatching:
    """Pairing of analytical to experimental modes.

    ``order[i]`` is the analytical mode paired with experimental mode ``i``;
    ``chi[i]`` is the signed normalization making ``chi[i] * psi_obs`` a
    unit vector aligned with the experimental shape.
    """

    observed_dofs: tuple
    chi: np.ndarray
    order: tuple
    mac: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "chi", _frozen(self.chi))
        object.__setattr__(self, "mac", _frozen(self.mac))

    def observed_shape(self, modes: AnalyticalModes, i: int) -> np.ndarray:
        """Return ``chi_i * gamma_i * psi`` for experimental mode ``i``."""
        psi = modes.psi[:, self.order[i]]
        return self.chi[i] * psi[list(self.observed_dofs[i])]


def assemble(model: StructuralModelClass, theta) -> tuple[np.ndarray, np.ndarray]:
    """Assemble ``K(theta)`` and ``M(theta)``.

    Raises
    ------
    InadmissibleParameters
        If the assembled mass matrix is not positive definite.
    """
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.shape[0] != model.n_theta:
        raise ValueError(f"theta has length {theta.shape[0]}, expected {model.n_theta}")
    k = model.k0.copy()
    for t, kp in zip(theta[: model.n_k], model.k_sub):
        k += t * kp
    m = model.m0.copy()
    for t, mp in zip(theta[model.n_k:], model.m_sub):
        m += t * mp
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        raise InadmissibleParameters("mass matrix not positive definite", theta=theta.tolist()) from None
    return k, m


def canonical_sign(v: np.ndarray) -> np.ndarray:
    """Flip columns so their first non-negligible entry is positive."""
    v = np.array(v, dtype=float)
    single = v.ndim == 1
    if single:
        v = v[:, None]
    for j in range(v.shape[1]):
        col = v[:, j]
        tol = 1e-12 * np.abs(col).max()
        nz = np.flatnonzero(np.abs(col) > tol)
        if nz.size and col[nz[0]] < 0:
            v[:, j] = -col
    return v[:, 0] if single else v


def _check_gaps(w, n_check, where=""):
    w = w[:n_check]
    if w.size < 2:
        return
    scale = np.maximum(np.abs(w[1:]), np.abs(w[:-1]))
    scale = np.where(scale > 0, scale, 1.0)
    gap = np.diff(w) / scale
    bad = np.flatnonzero(gap < EIG_GAP_RTOL)
    if bad.size:
        raise DegenerateSpectrum("repeated eigenvalue", index=int(bad[0]), value=float(w[bad[0]]), where=where)


def solve_modes(k: np.ndarray, m: np.ndarray, n_modes: int) -> AnalyticalModes:
    """Lowest ``n_modes`` eigenpairs of ``K psi = omega^2 M psi``.

    The generalized problem is reduced by the Cholesky factor of ``M``
    (LAPACK ``sygvd``).  Eigenvectors have unit Euclidean norm and a
    positive first nonzero entry.

    Raises
    ------
    DegenerateSpectrum
        On solver failure, eigenvalues within a relative gap of 1e-10, or
        an eigen-residual above 1e-8.
    """
    n = k.shape[0]
    if not 1 <= n_modes <= n:
        raise ValueError(f"n_modes must be in [1, {n}]")
    try:
        w, v = sla.eigh(k, m, type=1, driver="gv")
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise DegenerateSpectrum(f"eigen-solver failure: {exc}") from None
    # the mode after the last requested one also matters for a clean cut
    _check_gaps(w, min(n_modes + 1, n))
    v = v[:, :n_modes]
    v = canonical_sign(v / np.linalg.norm(v, axis=0))
    w = w[:n_modes]
    kv = k @ v
    res = np.linalg.norm(kv - (m @ v) * w, axis=0)
    ref = np.maximum(np.linalg.norm(kv, axis=0), np.finfo(float).tiny)
    if np.any(res > RESIDUAL_RTOL * ref):
        raise DegenerateSpectrum("eigen-residual too large", residual=float((res / ref).max()))
    return AnalyticalModes(omega_sq=w, psi=v)


def modes_at(model: StructuralModelClass, theta, n_modes: int) -> AnalyticalModes:
    k, m = assemble(model, theta)
    return solve_modes(k, m, n_modes)


def _normalize_dofs(observed_dofs, n_exp):
    if len(observed_dofs) and np.ndim(observed_dofs[0]) == 0:
        dofs = tuple(int(d) for d in observed_dofs)
        return tuple(dofs for _ in range(n_exp))
    if len(observed_dofs) != n_exp:
        raise ValueError("need one observed-DOF list per experimental mode")
    return tuple(tuple(int(d) for d in row) for row in observed_dofs)


def mac_matrix(analytical: AnalyticalModes, experimental_shapes, observed_dofs):
    """MAC between each experimental mode (rows) and analytical mode (columns)."""
    shapes = [np.asarray(s, float) for s in experimental_shapes]
    dofs = _normalize_dofs(observed_dofs, len(shapes))
    mac = np.zeros((len(shapes), analytical.n_modes))
    for i, (phi, d) in enumerate(zip(shapes, dofs)):
        obs = analytical.psi[list(d), :]
        num = (phi @ obs) ** 2
        den = (phi @ phi) * np.einsum("ij,ij->j", obs, obs)
        mac[i] = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return mac, dofs


def match_modes(analytical: AnalyticalModes, experimental_shapes: Sequence, observed_dofs,
                mac_floor: float = MAC_FLOOR) -> ModeMatching:
    """Pair experimental with analytical modes by greedy descending MAC.

    ``observed_dofs`` is either one DOF index list shared by all modes or
    one list per experimental mode.

    Raises
    ------
    ModeMatchingFailed
        If a greedy pick falls below ``mac_floor``.
    """
    n_exp = len(experimental_shapes)
    if n_exp > analytical.n_modes:
        raise ValueError("more experimental than analytical modes")
    mac, dofs = mac_matrix(analytical, experimental_shapes, observed_dofs)
    work = mac.copy()
    order = [-1] * n_exp
    for _ in range(n_exp):
        i, j = np.unravel_index(np.argmax(work), work.shape)
        if work[i, j] < mac_floor:
            left = [r for r in range(n_exp) if order[r] < 0]
            raise ModeMatchingFailed("MAC below floor", unmatched_mode=int(left[0]),
                                     best_mac=float(work[i, j]))
        order[i] = int(j)
        work[i, :] = -1.0
        work[:, j] = -1.0
    chi = np.empty(n_exp)
    for i in range(n_exp):
        obs = analytical.psi[list(dofs[i]), order[i]]
        s = np.sign(np.asarray(experimental_shapes[i], float) @ obs)
        chi[i] = (s if s != 0 else 1.0) / np.linalg.norm(obs)
    return ModeMatching(observed_dofs=dofs, chi=chi, order=tuple(order),
                        mac=mac[np.arange(n_exp), order])


# --------------------------------------------------------------------------- IO

MODEL_SCHEMA = "hbmodal.model/1"


def _matrix_from_json(obj, n, where):
    if isinstance(obj, list):
        a = np.array(obj, dtype=float)
    elif isinstance(obj, dict) and "dense" in obj:
        a = np.array(obj["dense"], dtype=float)
    elif isinstance(obj, dict) and "coo" in obj:
        coo = obj["coo"]
        a = np.zeros((n, n))
        rows, cols, vals = coo["row"], coo["col"], coo["val"]
        if not len(rows) == len(cols) == len(vals):
            raise ConfigError("coo row/col/val lengths differ", where=where)
        np.add.at(a, (np.asarray(rows, int), np.asarray(cols, int)), np.asarray(vals, float))
        if obj.get("symmetric_half", False):
            a = a + a.T - np.diag(np.diag(a))
    else:
        raise ConfigError("matrix must be a nested list, {'dense':..} or {'coo':..}", where=where)
    if a.shape != (n, n):
        raise ConfigError(f"matrix has shape {a.shape}, expected {(n, n)}", where=where)
    return a


def model_from_dict(d: dict) -> StructuralModelClass:
    try:
        n = int(d["n_dof"])
        k0 = _matrix_from_json(d["k0"], n, "k0")
        m0 = _matrix_from_json(d["m0"], n, "m0")
        k_sub = [_matrix_from_json(x, n, f"k_sub[{i}]") for i, x in enumerate(d.get("k_sub", []))]
        m_sub = [_matrix_from_json(x, n, f"m_sub[{i}]") for i, x in enumerate(d.get("m_sub", []))]
        box = d.get("theta_box", {})
        return StructuralModelClass(
            k0=k0, m0=m0, k_sub=tuple(k_sub), m_sub=tuple(m_sub),
            theta_lower=box.get("lower"), theta_upper=box.get("upper"),
            theta_nominal=d.get("theta_nominal"), name=d.get("name", "model"),
            parameter_names=tuple(d.get("parameter_names", ())),
        )
    except KeyError as exc:
        raise ConfigError(f"missing key {exc}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def model_to_dict(model: StructuralModelClass) -> dict:
    return {
        "schema": MODEL_SCHEMA,
        "name": model.name,
        "units": {"stiffness": "N/m", "mass": "kg"},
        "n_dof": model.n_dof,
        "k0": {"dense": model.k0.tolist()},
        "m0": {"dense": model.m0.tolist()},
        "k_sub": [{"dense": k.tolist()} for k in model.k_sub],
        "m_sub": [{"dense": m.tolist()} for m in model.m_sub],
        "theta_box": {"lower": model.theta_lower.tolist(),
                      "upper": [None if not np.isfinite(u) else float(u) for u in model.theta_upper]},
        "theta_nominal": model.theta_nominal.tolist(),
        "parameter_names": list(model.parameter_names),
    }


def load_model(path) -> StructuralModelClass:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read model file: {exc}", path=str(path)) from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}: {exc.msg}", path=str(path)) from None
    box = d.get("theta_box", {})
    if "upper" in box and box["upper"] is not None:
        box["upper"] = [np.inf if u is None else u for u in box["upper"]]
    return model_from_dict(d)


def save_model(model: StructuralModelClass, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2, sort_keys=True) + "\n")


def shear_frame(masses: Sequence[float], story_stiffness: Sequence[float], parameterized=None,
                name="shear-frame", theta_box=(0.0, np.inf)) -> StructuralModelClass:
    """Chain (shear-building) model with per-story stiffness substructures.

    Parameters
    ----------
    masses : sequence
        Floor masses, bottom to top.
    story_stiffness : sequence
        Nominal story stiffnesses (N/m), bottom to top.
    parameterized : sequence of int, optional
        Stories whose stiffness is scaled by a parameter.  The others go
        into ``K0``.  Defaults to all stories.
    """
    n = len(masses)
    if len(story_stiffness) != n:
        raise ValueError("need one stiffness per story")
    parameterized = list(range(n)) if parameterized is None else list(parameterized)

    def story(j, kj):
        a = np.zeros((n, n))
        a[j, j] += kj
        if j > 0:
            a[j - 1, j - 1] += kj
            a[j - 1, j] -= kj
            a[j, j - 1] -= kj
        return a

    k0 = np.zeros((n, n))
    k_sub = []
    for j, kj in enumerate(story_stiffness):
        if j in parameterized:
            k_sub.append(story(j, kj))
        else:
            k0 += story(j, kj)
    nt = len(k_sub)
    return StructuralModelClass(
        k0=k0, m0=np.diag(np.asarray(masses, float)), k_sub=tuple(k_sub),
        theta_lower=np.full(nt, theta_box[0]), theta_upper=np.full(nt, theta_box[1]), name=name,
    )
