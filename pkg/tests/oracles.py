"""Independent reference implementations used only by the tests."""

import numpy as np


def jacobi_eigvals(a, tol=1e-14, max_sweeps=60):
    """Cyclic Jacobi eigenvalues of a symmetric 3x3 matrix, sorted descending.

    Written against the textbook two-sided rotation formulas (explicit
    element updates, no matrix products) so it shares no code path with the
    production solver.
    """
    a = np.array(a, dtype=float)
    scale = max(np.max(np.abs(a)), 1.0)
    for _ in range(max_sweeps):
        off = np.sqrt(a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2)
        if off <= tol * scale:
            break
        for p in range(2):
            for q in range(p + 1, 3):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau >= 0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                app, aqq = a[p, p], a[q, q]
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = a[q, p] = 0.0
                r = 3 - p - q   # the remaining index
                arp, arq = a[r, p], a[r, q]
                a[r, p] = a[p, r] = c * arp - s * arq
                a[r, q] = a[q, r] = s * arp + c * arq
    return np.sort(np.diag(a))[::-1]


def random_spd_tensor6(rng, lam_max=4e-3):
    """Random PSD tensor 6-vector with eigenvalues in [0, lam_max]."""
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    lam = rng.uniform(0.0, lam_max, size=3)
    m = (q * lam) @ q.T
    return np.array([m[0, 0], m[1, 1], m[2, 2], m[0, 1], m[0, 2], m[1, 2]])


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))
