"""Synthetic ground-truth tensor fields and noisy diffusion-weighted stacks.

Each phantom is a stack of independent 2D slices: an elliptical "brain" mask
holding an isotropic background, a concentric-ring fiber region whose
principal direction follows the ring tangent, and straight bundles at random
3D orientations.  Exact tensors make every downstream claim checkable.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimsTooSmall
from .scheme import GradientScheme
from .tensor import design_matrix

LAYOUTS = ("iso", "rings", "bundles", "mixed")

# hard bounds on configurable eigenvalue ranges, mm^2/s
_PAR_BOUNDS = (1.0e-3, 2.2e-3)
_PERP_BOUNDS = (0.1e-3, 0.8e-3)
_ISO_BOUNDS = (0.7e-3, 3.2e-3)


@dataclass
class PhantomSpec:
    """Layout and eigenvalue ranges for one deterministic phantom."""
    dims: tuple = (64, 64)
    n_slices: int = 1
    layout: str = "mixed"
    lam_par_range: tuple = (1.3e-3, 1.9e-3)
    lam_perp_range: tuple = (2.0e-4, 5.0e-4)
    iso_range: tuple = (7.0e-4, 3.0e-3)
    seed: int = 0

    def __post_init__(self):
        h, w = self.dims
        if h < 32 or w < 32:
            raise DimsTooSmall(f"phantom dims must be >= 32x32, got {self.dims}")
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}")
        for rng_, bounds, name in ((self.lam_par_range, _PAR_BOUNDS, "lam_par"),
                                   (self.lam_perp_range, _PERP_BOUNDS, "lam_perp"),
                                   (self.iso_range, _ISO_BOUNDS, "iso")):
            lo, hi = rng_
            if not (bounds[0] <= lo <= hi <= bounds[1]):
                raise ValueError(f"{name} range {rng_} outside bounds {bounds}")


@dataclass
class TensorField:
    """Per-voxel tensor 6-vectors with a brain mask; masked-out voxels zero."""
    tensors: np.ndarray   # (n_slices, h, w, 6)
    mask: np.ndarray      # (n_slices, h, w) bool

    @property
    def dims(self):
        return self.tensors.shape[1:3]

    @property
    def n_slices(self):
        return self.tensors.shape[0]


@dataclass
class DwiVolume:
    """A b=0 stack plus one DW stack per scheme direction, with a mask."""
    s0: np.ndarray        # (n_slices, h, w)
    dwi: np.ndarray       # (n_slices, n_dir, h, w)
    mask: np.ndarray      # (n_slices, h, w) bool
    scheme: GradientScheme = field(repr=False, default=None)

    @property
    def dims(self):
        return self.s0.shape[1:3]

    @property
    def n_slices(self):
        return self.s0.shape[0]


def reported_snr(s0, sigma):
    """SNR convention used in all reports: s0 / sigma (inf for sigma=0)."""
    return np.inf if sigma == 0 else s0 / sigma


def _axial_tensor(direction, lam_par, lam_perp):
    """Axially symmetric tensor 6-vector with principal axis `direction`."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    delta = lam_par - lam_perp
    return np.array([lam_perp + delta * d[0] * d[0],
                     lam_perp + delta * d[1] * d[1],
                     lam_perp + delta * d[2] * d[2],
                     delta * d[0] * d[1],
                     delta * d[0] * d[2],
                     delta * d[1] * d[2]])


def _make_slice(h, w, layout, spec, rng):
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ry, rx = 0.46 * h, 0.46 * w
    r_ell = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    mask = r_ell <= 1.0

    tensors = np.zeros((h, w, 6))

    # isotropic background: smooth diffusivity ramp across the slice
    lo, hi = spec.iso_range
    phase = rng.uniform(0, 2 * np.pi)
    kx, ky = rng.uniform(0.5, 1.5, size=2)
    ramp = 0.5 + 0.5 * np.sin(2 * np.pi * (kx * xx / w + ky * yy / h) + phase)
    lam_iso = lo + (hi - lo) * ramp
    tensors[..., 0] = tensors[..., 1] = tensors[..., 2] = lam_iso

    if layout in ("rings", "mixed"):
        ring = (r_ell >= 0.55) & (r_ell <= 0.85) & mask
        theta = np.arctan2((yy - cy) / ry, (xx - cx) / rx)
        tangent = np.stack([-np.sin(theta), np.cos(theta),
                            np.zeros_like(theta)], axis=-1)
        lam_par = 0.5 * sum(spec.lam_par_range)
        lam_perp = 0.5 * sum(spec.lam_perp_range)
        delta = lam_par - lam_perp
        t = tangent[ring]
        tensors[ring] = np.stack(
            [lam_perp + delta * t[:, 0] ** 2,
             lam_perp + delta * t[:, 1] ** 2,
             lam_perp + delta * t[:, 2] ** 2,
             delta * t[:, 0] * t[:, 1],
             delta * t[:, 0] * t[:, 2],
             delta * t[:, 1] * t[:, 2]], axis=-1)

    if layout in ("bundles", "mixed"):
        n_bundles = rng.integers(2, 5)
        for _ in range(n_bundles):
            angle = rng.uniform(0, np.pi)
            offset = rng.uniform(-0.25, 0.25)
            width = rng.uniform(0.05, 0.10)
            # signed distance to a line through (offset from) the center
            u = ((xx - cx) / rx) * np.cos(angle) + ((yy - cy) / ry) * np.sin(angle)
            band = (np.abs(u - offset) < width) & (r_ell < 0.5) & mask
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            lam_par = rng.uniform(*spec.lam_par_range)
            lam_perp = rng.uniform(*spec.lam_perp_range)
            tensors[band] = _axial_tensor(axis, lam_par, lam_perp)

    tensors[~mask] = 0.0
    return tensors, mask


def make_tensor_field(spec):
    """Deterministic ground-truth tensor field for a PhantomSpec."""
    h, w = spec.dims
    rng = np.random.Generator(np.random.Philox(key=spec.seed))
    tensors = np.empty((spec.n_slices, h, w, 6))
    mask = np.empty((spec.n_slices, h, w), dtype=bool)
    for s in range(spec.n_slices):
        tensors[s], mask[s] = _make_slice(h, w, spec.layout, spec, rng)
    return TensorField(tensors=tensors, mask=mask)


def ring_tangent(spec, yx):
    """Expected ring principal direction at voxel (y, x); geometry oracle."""
    h, w = spec.dims
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ry, rx = 0.46 * h, 0.46 * w
    theta = np.arctan2((yx[0] - cy) / ry, (yx[1] - cx) / rx)
    return np.array([-np.sin(theta), np.cos(theta), 0.0])


def synthesize_dwi(tf, scheme, s0=1000.0, sigma=0.0, seed=0):
    """Render a noisy DwiVolume from a tensor field.

    Noiseless signals follow s0 * exp(-b g^T D g) inside the mask and are
    zero outside; sigma > 0 applies Rician corruption,
    out = sqrt((x + n1)^2 + n2^2) with n1, n2 ~ Normal(0, sigma^2) drawn
    independently per voxel, direction, and b=0 repeat.  The stored b=0
    stack is the mean over the scheme's n_b0 repeats.
    """
    a = design_matrix(scheme.directions)                    # (n, 6)
    quad = np.einsum('shwc,nc->snhw', tf.tensors, a)
    signal = s0 * np.exp(-scheme.b * quad)
    signal *= tf.mask[:, None, :, :]
    b0 = s0 * tf.mask.astype(float)

    if sigma > 0:
        rng = np.random.Generator(np.random.Philox(key=seed))
        n1 = rng.normal(0.0, sigma, size=signal.shape)
        n2 = rng.normal(0.0, sigma, size=signal.shape)
        signal = np.sqrt((signal + n1) ** 2 + n2 ** 2)
        reps = np.empty((scheme.n_b0,) + b0.shape)
        for r in range(scheme.n_b0):
            n1 = rng.normal(0.0, sigma, size=b0.shape)
            n2 = rng.normal(0.0, sigma, size=b0.shape)
            reps[r] = np.sqrt((b0 + n1) ** 2 + n2 ** 2)
        b0 = reps.mean(axis=0)

    return DwiVolume(s0=b0, dwi=signal, mask=tf.mask.copy(), scheme=scheme)
