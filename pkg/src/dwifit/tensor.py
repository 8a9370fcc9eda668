"""Diffusion tensor algebra.

Forward signal model, design rows for the log-linear fit, analytic symmetric
3x3 eigendecomposition, and the scalar maps (FA/MD/AD/RD) derived from the
eigenvalues.  Tensors are carried as 6-vectors in the component order
(Dxx, Dyy, Dzz, Dxy, Dxz, Dyz); diffusivities are in mm^2/s throughout.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveSignal, ZeroB

TENSOR_COMPONENTS = ("dxx", "dyy", "dzz", "dxy", "dxz", "dyz")

# Jacobi fallback kicks in when the normalized discriminant of the
# characteristic cubic, prod((lam_i - lam_j)^2) / scale^6, drops below this.
_DEGENERATE_DISC = 1e-12


def tensor6_to_matrix(d6):
    """Expand (..., 6) tensor vectors into (..., 3, 3) symmetric matrices."""
    d6 = np.asarray(d6)
    m = np.empty(d6.shape[:-1] + (3, 3), dtype=d6.dtype)
    m[..., 0, 0] = d6[..., 0]
    m[..., 1, 1] = d6[..., 1]
    m[..., 2, 2] = d6[..., 2]
    m[..., 0, 1] = m[..., 1, 0] = d6[..., 3]
    m[..., 0, 2] = m[..., 2, 0] = d6[..., 4]
    m[..., 1, 2] = m[..., 2, 1] = d6[..., 5]
    return m


def matrix_to_tensor6(m):
    """Collapse (..., 3, 3) symmetric matrices into (..., 6) tensor vectors."""
    m = np.asarray(m)
    return np.stack(
        [m[..., 0, 0], m[..., 1, 1], m[..., 2, 2],
         m[..., 0, 1], m[..., 0, 2], m[..., 1, 2]], axis=-1)


def design_row(g):
    """Design row alpha for one unit direction.

    Parameters
    ----------
    g : array-like, shape (3,)
        Unit gradient direction.

    Returns
    -------
    ndarray, shape (6,)
        (gx^2, gy^2, gz^2, 2 gx gy, 2 gx gz, 2 gy gz), so that
        alpha . d6 == g^T D g.
    """
    gx, gy, gz = np.asarray(g, dtype=float)
    return np.array([gx * gx, gy * gy, gz * gz,
                     2 * gx * gy, 2 * gx * gz, 2 * gy * gz])


def design_matrix(directions):
    """Stack design rows for (n, 3) directions into an (n, 6) matrix."""
    g = np.asarray(directions, dtype=float)
    return np.stack([g[:, 0] ** 2, g[:, 1] ** 2, g[:, 2] ** 2,
                     2 * g[:, 0] * g[:, 1],
                     2 * g[:, 0] * g[:, 2],
                     2 * g[:, 1] * g[:, 2]], axis=1)


def signal_forward(d6, g, b, s0):
    """Diffusion-weighted signal s0 * exp(-b g^T D g).

    Broadcasts over leading axes of `d6`, so a whole tensor field can be
    evaluated against one direction at once.
    """
    quad = np.asarray(d6) @ design_row(g)
    return s0 * np.exp(-b * quad)


def log_signal_ratio(s0, si, b):
    """Apparent diffusion coefficient beta = ln(s0/si)/b.

    Raises
    ------
    NonPositiveSignal
        If any signal is <= 0 (caller must clamp or mask first).
    ZeroB
        If b == 0.
    """
    s0 = np.asarray(s0, dtype=float)
    si = np.asarray(si, dtype=float)
    if np.any(s0 <= 0) or np.any(si <= 0):
        raise NonPositiveSignal("log ratio needs strictly positive signals")
    if b == 0:
        raise ZeroB("log ratio undefined at b = 0")
    out = np.log(s0 / si) / b
    return float(out) if out.ndim == 0 else out


@dataclass
class EigenSystem:
    """Sorted eigensystem of one diffusion tensor.

    `lam` holds eigenvalues descending; rows of `vecs` are the matching unit
    eigenvectors with sign fixed so the first nonzero component is positive.
    """
    lam: np.ndarray    # (3,)
    vecs: np.ndarray   # (3, 3), row i is v_i

    @property
    def v1(self):
        return self.vecs[0]


@dataclass
class DtiMaps:
    """Scalar maps derived from eigenvalues; all arrays share one shape."""
    fa: np.ndarray
    md: np.ndarray
    ad: np.ndarray
    rd: np.ndarray


def eigvals_sym3(d6):
    """Eigenvalues of (..., 6) symmetric tensors, sorted descending.

    Analytic (trigonometric) solution of the characteristic cubic; exact
    arithmetic guarantees three real roots, so the acos argument is clipped
    to [-1, 1] against rounding.
    """
    d6 = np.asarray(d6, dtype=float)
    dxx, dyy, dzz = d6[..., 0], d6[..., 1], d6[..., 2]
    dxy, dxz, dyz = d6[..., 3], d6[..., 4], d6[..., 5]

    q = (dxx + dyy + dzz) / 3.0
    p1 = dxy ** 2 + dxz ** 2 + dyz ** 2
    p2 = (dxx - q) ** 2 + (dyy - q) ** 2 + (dzz - q) ** 2 + 2.0 * p1
    p = np.sqrt(p2 / 6.0)

    safe_p = np.where(p > 0, p, 1.0)
    bxx, byy, bzz = (dxx - q) / safe_p, (dyy - q) / safe_p, (dzz - q) / safe_p
    bxy, bxz, byz = dxy / safe_p, dxz / safe_p, dyz / safe_p
    half_det = 0.5 * (bxx * (byy * bzz - byz ** 2)
                      - bxy * (bxy * bzz - byz * bxz)
                      + bxz * (bxy * byz - byy * bxz))
    phi = np.arccos(np.clip(half_det, -1.0, 1.0)) / 3.0

    lam1 = q + 2.0 * p * np.cos(phi)
    lam3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    lam2 = 3.0 * q - lam1 - lam3
    lam = np.stack([lam1, lam2, lam3], axis=-1)
    return np.where(p[..., None] > 0, lam, np.broadcast_to(q[..., None], lam.shape))


def _jacobi_sym3(a, sweeps=30):
    """Cyclic Jacobi diagonalization of one symmetric 3x3 matrix."""
    a = np.array(a, dtype=float)
    v = np.eye(3)
    for _ in range(sweeps):
        off = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
        if off < 1e-300:
            break
        for p, r in ((0, 1), (0, 2), (1, 2)):
            if a[p, r] == 0.0:
                continue
            theta = (a[r, r] - a[p, p]) / (2.0 * a[p, r])
            if theta == 0.0:
                t = 1.0
            elif abs(theta) > 1e150:   # theta**2 would overflow
                t = 0.5 / theta
            else:
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta ** 2 + 1.0))
            c = 1.0 / np.sqrt(t ** 2 + 1.0)
            s = t * c
            rot = np.eye(3)
            rot[p, p] = rot[r, r] = c
            rot[p, r] = s
            rot[r, p] = -s
            a = rot.T @ a @ rot
            v = v @ rot
    return np.diag(a).copy(), v


def _fix_sign(vec):
    for c in vec:
        if c != 0.0:
            return vec if c > 0.0 else -vec
    return vec


def eig_sym3(d6):
    """Full eigensystem of one symmetric tensor 6-vector.

    Uses the analytic eigenvalues plus cross-product eigenvectors; falls back
    to a Jacobi sweep when the characteristic cubic's discriminant is within
    1e-12 of zero (nearly repeated eigenvalues), where the cross products
    lose accuracy.

    Returns
    -------
    EigenSystem
        Eigenvalues descending, orthonormal rows, deterministic signs.
    """
    d6 = np.asarray(d6, dtype=float)
    a = tensor6_to_matrix(d6)
    lam = eigvals_sym3(d6)

    scale = max(np.max(np.abs(lam)), np.finfo(float).tiny)
    gaps = (lam[0] - lam[1]) * (lam[1] - lam[2]) * (lam[0] - lam[2])
    disc = (gaps / scale ** 3) ** 2
    if disc < _DEGENERATE_DISC:
        jlam, jvecs = _jacobi_sym3(a)
        order = np.argsort(jlam)[::-1]
        lam = jlam[order]
        vecs = jvecs[:, order].T
    else:
        vecs = np.empty((3, 3))
        for i in (0, 2):
            m = a - lam[i] * np.eye(3)
            crosses = np.stack([np.cross(m[0], m[1]),
                                np.cross(m[0], m[2]),
                                np.cross(m[1], m[2])])
            norms = np.linalg.norm(crosses, axis=1)
            vecs[i] = crosses[np.argmax(norms)] / norms.max()
        vecs[1] = np.cross(vecs[2], vecs[0])
        vecs[1] /= np.linalg.norm(vecs[1])

    vecs = np.stack([_fix_sign(v) for v in vecs])
    return EigenSystem(lam=lam, vecs=vecs)


def principal_dirs_field(d6, lam=None):
    """Principal eigenvector per voxel for a (..., 6) tensor field.

    Vectorized cross-product construction with a per-voxel Jacobi fallback
    on near-degenerate voxels; isotropic voxels get (1, 0, 0) by the sign
    convention (any direction is valid there).
    """
    d6 = np.asarray(d6, dtype=float)
    if lam is None:
        lam = eigvals_sym3(d6)
    a = tensor6_to_matrix(d6)
    m = a - lam[..., 0, None, None] * np.eye(3)

    crosses = np.stack([np.cross(m[..., 0, :], m[..., 1, :]),
                        np.cross(m[..., 0, :], m[..., 2, :]),
                        np.cross(m[..., 1, :], m[..., 2, :])], axis=-2)
    norms = np.linalg.norm(crosses, axis=-1)
    best = np.argmax(norms, axis=-1)
    v1 = np.take_along_axis(
        crosses, best[..., None, None], axis=-2)[..., 0, :]
    nrm = np.take_along_axis(norms, best[..., None], axis=-1)[..., 0]

    scale = np.maximum(np.max(np.abs(lam), axis=-1), np.finfo(float).tiny)
    gaps = ((lam[..., 0] - lam[..., 1]) * (lam[..., 1] - lam[..., 2])
            * (lam[..., 0] - lam[..., 2]))
    degenerate = (gaps / scale ** 3) ** 2 < _DEGENERATE_DISC

    safe = np.where(nrm > 0, nrm, 1.0)
    v1 = v1 / safe[..., None]

    flat_v1 = v1.reshape(-1, 3)
    flat_deg = degenerate.reshape(-1)
    flat_d6 = d6.reshape(-1, 6)
    for idx in np.nonzero(flat_deg)[0]:
        flat_v1[idx] = eig_sym3(flat_d6[idx]).v1
    v1 = flat_v1.reshape(v1.shape)

    # first-nonzero-positive sign rule, vectorized
    sign = np.where(v1[..., 0] != 0, np.sign(v1[..., 0]),
                    np.where(v1[..., 1] != 0, np.sign(v1[..., 1]),
                             np.where(v1[..., 2] != 0,
                                      np.sign(v1[..., 2]), 1.0)))
    return v1 * sign[..., None]


def derive_maps(eig):
    """FA, MD, AD, RD from sorted eigenvalues.

    Parameters
    ----------
    eig : EigenSystem or ndarray, shape (..., 3)
        Eigenvalues sorted descending (per voxel).

    Returns
    -------
    DtiMaps
        FA is clamped to [0, 1] and defined as 0 where all eigenvalues
        vanish; MD = (l1+l2+l3)/3, AD = l1, RD = (l2+l3)/2.
    """
    lam = eig.lam if isinstance(eig, EigenSystem) else np.asarray(eig, dtype=float)
    md = lam.mean(axis=-1)
    ad = lam[..., 0]
    rd = 0.5 * (lam[..., 1] + lam[..., 2])

    dev = lam - md[..., None]
    num = np.sqrt((dev ** 2).sum(axis=-1))
    den_sq = (lam ** 2).sum(axis=-1)
    all_zero = den_sq == 0
    fa = np.sqrt(1.5) * num / np.sqrt(np.where(all_zero, 1.0, den_sq))
    fa = np.clip(np.where(all_zero, 0.0, fa), 0.0, 1.0)
    return DtiMaps(fa=fa, md=md, ad=ad, rd=rd)


def dec_color(eig, fa):
    """Direction-encoded color for one voxel: (|v1|) * FA, clamped FA."""
    fa = min(max(float(fa), 0.0), 1.0)
    return np.abs(eig.v1) * fa


def dec_color_field(v1, fa):
    """Vectorized DEC map: (..., 3) RGB in [0, 1] from v1 field and FA."""
    fa = np.clip(np.asarray(fa, dtype=float), 0.0, 1.0)
    return np.abs(v1) * fa[..., None]
