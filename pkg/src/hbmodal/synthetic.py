"""Noise-free synthetic modal data for a two-story shear frame."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import StructuralModelClass, modes_at, shear_frame
from .spectral.data import ModalDataset


@dataclass
class TwoStoryCase:
    """Generator settings.

    The first story carries two columns of stiffness ``column_stiffness``;
    the second story's ``2 * column_stiffness`` is scaled by ``theta``.
    """

    floor_mass: float = 1.0
    column_stiffness: float = 500.0
    theta_values: tuple = (0.98, 1.00, 1.02)
    cov: float = 0.001
    theta_box: tuple = (0.5, 2.0)

    @classmethod
    def from_dict(cls, d: dict | None) -> "TwoStoryCase":
        d = dict(d or {})
        if "theta_values" in d:
            d["theta_values"] = tuple(d["theta_values"])
        if "theta_box" in d:
            d["theta_box"] = tuple(d["theta_box"])
        return cls(**d)


def two_story_model(case: TwoStoryCase | None = None) -> StructuralModelClass:
    case = case or TwoStoryCase()
    k = 2 * case.column_stiffness
    return shear_frame([case.floor_mass] * 2, [k, k], parameterized=[1], name="two-story-frame",
                       theta_box=case.theta_box)


def shape_covariance(phi, cov):
    """Identification covariance of a unit shape from a per-entry CoV.

    Entry variances ``(cov * phi_j)^2`` projected onto the tangent space of
    the unit sphere at ``phi``.
    """
    phi = np.asarray(phi, float)
    p = np.eye(phi.size) - np.outer(phi, phi)
    c = p @ np.diag((cov * phi) ** 2) @ p
    return 0.5 * (c + c.T)


def synthetic_modal_datasets(model: StructuralModelClass, thetas, cov=0.001, observed_dofs=None,
                             n_modes=None, prefix="s") -> list:
    """Exact modal data of ``model`` at each ``theta`` with CoV-based uncertainty."""
    n_modes = model.n_dof if n_modes is None else n_modes
    dofs = tuple(range(model.n_dof)) if observed_dofs is None else tuple(observed_dofs)
    out = []
    for s, th in enumerate(thetas, start=1):
        modes = modes_at(model, np.atleast_1d(th), n_modes)
        w = modes.omega_sq.copy()
        phis = []
        for i in range(n_modes):
            v = modes.psi[list(dofs), i]
            phis.append(v / np.linalg.norm(v))
        out.append(ModalDataset(
            omega_sq_hat=w, phi_hat=phis, cov_omega_sq=(cov * w) ** 2,
            cov_phi=[shape_covariance(p, cov) for p in phis], observed_dofs=dofs,
            dataset_id=f"{prefix}{s}"))
    return out


def synthetic_case_5_1(spec: dict | TwoStoryCase | None = None):
    """Two-story frame and three noise-free modal datasets.

    Returns ``(model, datasets)``.
    """
    case = spec if isinstance(spec, TwoStoryCase) else TwoStoryCase.from_dict(spec)
    model = two_story_model(case)
    datasets = synthetic_modal_datasets(model, [[t] for t in case.theta_values], case.cov)
    return model, datasets
