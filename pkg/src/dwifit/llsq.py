"""Linear least squares tensor estimation from log-signal ratios.

The baseline reconstruction: per voxel, solve the normal equations of
alpha_i . d6 = ln(s0/s_i)/b over >= 6 non-collinear directions.  Measurement
rows are put into a canonical order (lexicographic on the design row, then
on beta) before any accumulation, so fits are bit-identical under any
permutation of the (direction, image) pairs.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import NotEnoughDirections, RankDeficient
from .phantom import TensorField
from .tensor import design_matrix

# signals below this fraction of s0 are clamped before the log
MIN_SIGNAL_FRACTION = 1e-4


@dataclass
class FitReport:
    field: TensorField
    residual_rms: np.ndarray     # (n_slices, h, w), log-signal units
    n_clamped: int
    n_rank_deficient: int = 0


def _canonical_order(rows, betas=None):
    keys = [rows[:, c] for c in range(rows.shape[1] - 1, -1, -1)]
    if betas is not None:
        keys.insert(0, betas)
    return np.lexsort(keys)


def _check_rank(rows):
    s = np.linalg.svd(rows, compute_uv=False)
    if s[-1] <= s[0] * 1e-10:
        raise RankDeficient("design matrix rank < 6")


def fit_voxel(betas, rows):
    """Least squares tensor 6-vector from one voxel's measurements.

    Parameters
    ----------
    betas : array-like, shape (n,)
        Apparent diffusion coefficients ln(s0/s_i)/b, mm^2/s.
    rows : array-like, shape (n, 6)
        Design rows for the matching directions.

    Raises
    ------
    NotEnoughDirections
        If n < 6.
    RankDeficient
        If the design matrix rank is below 6.
    """
    rows = np.asarray(rows, dtype=float)
    betas = np.asarray(betas, dtype=float)
    if rows.ndim != 2 or rows.shape[0] != betas.shape[0]:
        raise ValueError("rows and betas must align")
    if rows.shape[0] < 6:
        raise NotEnoughDirections(f"need >= 6 measurements, got {rows.shape[0]}")
    _check_rank(rows)
    order = _canonical_order(rows, betas)
    a = rows[order]
    y = betas[order]
    ata = a.T @ a
    aty = a.T @ y
    return cho_solve(cho_factor(ata), aty)


def fit_volume(vol, subset=None):
    """Fit every masked voxel of a DwiVolume; never aborts the volume.

    Signals are clamped to max(s_i, 1e-4 * s0) before the log; voxels whose
    clamp activated are counted in the report.  A rank-deficient direction
    subset zero-fills all masked voxels and counts them instead of raising.

    Returns
    -------
    FitReport
        Fitted TensorField (masked-out voxels zero), per-voxel residual RMS
        in dimensionless log-signal units, and clamp/rank-failure counts.
    """
    if subset is None:
        subset = np.arange(vol.scheme.n_directions)
    subset = np.asarray(subset, dtype=int)
    if len(subset) < 6:
        raise NotEnoughDirections(f"need >= 6 directions, got {len(subset)}")

    dirs = vol.scheme.directions[subset]
    rows = design_matrix(dirs)
    order = _canonical_order(rows)
    rows = rows[order]
    ordered_subset = subset[order]

    n_slices, h, w = vol.s0.shape
    tensors = np.zeros((n_slices, h, w, 6))
    residual = np.zeros((n_slices, h, w))
    mask = vol.mask.astype(bool)
    n_masked = int(mask.sum())

    try:
        _check_rank(rows)
    except RankDeficient:
        return FitReport(field=TensorField(tensors=tensors, mask=mask.copy()),
                         residual_rms=residual, n_clamped=0,
                         n_rank_deficient=n_masked)

    s0 = vol.s0[mask]                                        # (v,)
    si = np.moveaxis(vol.dwi[:, ordered_subset], 1, -1)[mask]  # (v, k)
    bad_s0 = s0 <= 0
    s0 = np.where(bad_s0, 1.0, s0)
    floor = MIN_SIGNAL_FRACTION * s0[:, None]
    clamped = (si < floor) | bad_s0[:, None]
    si = np.maximum(si, floor)

    betas = np.log(s0[:, None] / si) / vol.scheme.b          # (v, k)
    ata = rows.T @ rows
    atb = betas @ rows                                       # (v, 6)
    d6 = cho_solve(cho_factor(ata), atb.T).T                 # (v, 6)
    d6[bad_s0] = 0.0

    res = (d6 @ rows.T - betas) * vol.scheme.b
    rms = np.sqrt((res ** 2).mean(axis=1))

    tensors[mask] = d6
    residual[mask] = rms
    return FitReport(field=TensorField(tensors=tensors, mask=mask.copy()),
                     residual_rms=residual,
                     n_clamped=int(np.any(clamped, axis=1).sum()))
