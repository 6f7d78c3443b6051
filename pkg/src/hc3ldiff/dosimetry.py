"""Gamma-index analysis, gamma passing rate and DVH parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import ndimage

from .errors import UndefinedResultError

NOT_EVALUATED = -1.0


@dataclass(frozen=True)
class DoseGrid:
    values: np.ndarray
    spacing: tuple

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if v.ndim not in (2, 3) or len(self.spacing) != v.ndim:
            raise ValueError(f"need a 2D or 3D grid with one spacing per axis, got {v.shape} / {self.spacing}")
        if min(self.spacing) <= 0:
            raise ValueError("voxel spacing must be positive")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("dose values must be finite and non-negative")


@dataclass(frozen=True)
class GammaCriteria:
    """Global gamma criteria; ``dose_percent`` and ``threshold_percent`` refer to the reference maximum."""

    dose_percent: float = 3.0
    dta_mm: float = 3.0
    threshold_percent: float = 10.0
    search_radius_mm: float | None = None

    def __post_init__(self):
        if self.search_radius_mm is None:
            object.__setattr__(self, "search_radius_mm", 3.0 * self.dta_mm)
        if min(self.dose_percent, self.dta_mm, self.threshold_percent, self.search_radius_mm) <= 0:
            raise ValueError("gamma criteria must be strictly positive")
        if self.search_radius_mm < 2 * self.dta_mm:
            raise ValueError("search radius must be at least twice the distance criterion")


def _offsets(spacing, radius_mm, subdiv=1):
    """Lattice offsets (in voxels) within the search radius, sorted by physical distance."""
    axes = []
    for s in spacing:
        r = int(math.floor(radius_mm / s * subdiv))
        axes.append(np.arange(-r, r + 1) / subdiv)
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(spacing))
    dist2 = np.zeros(len(grid))
    for ax, s in enumerate(spacing):  # fixed left-to-right order keeps results bit-reproducible
        d = grid[:, ax] * s
        dist2 = dist2 + d * d
    keep = dist2 <= radius_mm * radius_mm * (1 + 1e-12)
    grid, dist2 = grid[keep], dist2[keep]
    order = np.lexsort((*grid.T[::-1], dist2))
    return grid[order], dist2[order]


def _shifted(ev, off):
    """ev sampled at (index + off) for integer offsets, NaN outside the grid."""
    out = np.full(ev.shape, np.nan)
    src, dst = [], []
    for o, n in zip(off.astype(int), ev.shape):
        if abs(o) >= n:
            return out
        src.append(slice(max(o, 0), n + min(o, 0)))
        dst.append(slice(max(-o, 0), n + min(-o, 0)))
    out[tuple(dst)] = ev[tuple(src)]
    return out


def gamma_map(ref: DoseGrid, ev: DoseGrid, crit: GammaCriteria = GammaCriteria(), interp: str = "none", subdiv: int = 3):
    """Gamma index per reference voxel above the dose threshold; others get ``NOT_EVALUATED``.

    The evaluated distribution is searched on its own voxel centers; with
    ``interp="linear"`` the search lattice is refined ``subdiv`` times and the
    evaluated dose is linearly interpolated.
    """
    if ref.values.shape != ev.values.shape or not np.allclose(ref.spacing, ev.spacing):
        raise ValueError("reference and evaluated grids must share shape and spacing")
    if interp not in ("none", "linear"):
        raise ValueError("interp must be 'none' or 'linear'")
    d_ref = ref.values
    d_max = float(d_ref.max())
    evaluated = d_ref > crit.threshold_percent / 100.0 * d_max
    out = np.full(d_ref.shape, NOT_EVALUATED)
    if not evaluated.any():
        return out
    dd = crit.dose_percent / 100.0 * d_max
    if dd <= 0:
        raise ValueError("reference dose maximum must be positive")
    offsets, dist2 = _offsets(ref.spacing, crit.search_radius_mm, subdiv if interp == "linear" else 1)
    r_ref = d_ref[evaluated]
    best = np.full(r_ref.shape, np.inf)
    coords = np.indices(d_ref.shape)[:, evaluated] if interp == "linear" else None
    for off, d2 in zip(offsets, dist2):
        dist_term = d2 / (crit.dta_mm * crit.dta_mm)
        # offsets are sorted by distance, so nothing further out can improve any voxel
        if dist_term >= best.max():
            break
        if interp == "linear":
            e = ndimage.map_coordinates(ev.values, coords + off[:, None], order=1, mode="constant", cval=np.nan)
        else:
            e = _shifted(ev.values, off)[evaluated]
        diff = e - r_ref
        g2 = dist_term + diff * diff / (dd * dd)
        np.fmin(best, g2, out=best)
    out[evaluated] = np.sqrt(best)
    return out


def gpr(gamma) -> float:
    """Percentage of evaluated voxels with gamma strictly below 1."""
    g = np.asarray(gamma)
    evaluated = g >= 0
    if not evaluated.any():
        raise UndefinedResultError("no voxels above the dose threshold")
    return 100.0 * float(np.mean(g[evaluated] < 1.0))


def dvh_parameter(dose: DoseGrid | np.ndarray, mask, p) -> float:
    """D_p: largest dose received by at least p% of the structure; ``p="max"`` gives Dmax."""
    values = dose.values if isinstance(dose, DoseGrid) else np.asarray(dose, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != values.shape:
        raise ValueError(f"mask shape {mask.shape} != dose shape {values.shape}")
    d = values[mask]
    if d.size == 0:
        raise ValueError("structure mask is empty")
    if p == "max":
        return float(d.max())
    if not 0 < float(p) <= 100:
        raise ValueError(f"volume percentage must be in (0, 100], got {p}")
    desc = np.sort(d)[::-1]
    k = math.ceil(Fraction(str(p)) * d.size / 100) - 1
    return float(desc[k])


DVH_PARAMS = ("D95", "D98", "Dmax")


@dataclass
class DvhReport:
    """{structure: {"D95": Gy, "D98": Gy, "Dmax": Gy}} (or percentages for a difference report)."""

    values: dict = field(default_factory=dict)

    def to_json(self):
        return {s: dict(v) for s, v in self.values.items()}


def _param_value(dose, mask, name):
    return dvh_parameter(dose, mask, "max" if name == "Dmax" else float(name[1:]))


def dvh_report(dose, structures: dict, params=DVH_PARAMS) -> DvhReport:
    return DvhReport({s: {p: _param_value(dose, m, p) for p in params} for s, m in structures.items()})


def dvh_percent_diff(test: DvhReport, ref: DvhReport) -> DvhReport:
    if test.values.keys() != ref.values.keys():
        raise ValueError("reports cover different structures")
    out = {}
    for s, rv in ref.values.items():
        out[s] = {}
        for p, r in rv.items():
            if r == 0:
                raise UndefinedResultError(f"{s} {p} reference value is 0")
            out[s][p] = 100.0 * (test.values[s][p] - r) / r
    return DvhReport(out)


def synthetic_dose(target_mask, spacing, prescription: float, falloff_mm: float) -> DoseGrid:
    """Prescription dose inside the target with a Gaussian fall-off in distance outside it."""
    mask = np.asarray(target_mask, dtype=bool)
    if not mask.any():
        raise ValueError("target mask is empty")
    dist = ndimage.distance_transform_edt(~mask, sampling=spacing)
    values = prescription * np.exp(-(dist**2) / (2.0 * falloff_mm**2))
    values[mask] = prescription
    return DoseGrid(values, tuple(spacing))
