"""Diffusion gradient direction sets: generation, quality, pooling.

Directions are treated antipodally (g and -g encode the same measurement),
so uniformity is optimized and duplicates detected on lines, not vectors.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import (BadSplit, RankDeficient, SubsetTooLarge, SubsetTooSmall,
                     TooFewDirections)
from .tensor import design_matrix

MIN_DIRECTIONS = 6
# two directions closer than this angle (radians, as lines) are duplicates
DUPLICATE_ANGLE = 1e-6


def _rng(seed):
    # counter-based generator: reproducible across platforms and callers
    return np.random.Generator(np.random.Philox(key=seed))


@dataclass
class GradientScheme:
    """One-shell acquisition: b-value, unit directions, b=0 repeat count."""
    b: float
    directions: np.ndarray   # (n, 3)
    n_b0: int = 1

    def __post_init__(self):
        self.directions = np.atleast_2d(np.asarray(self.directions, dtype=float))
        if self.b < 0:
            raise ValueError("b must be >= 0")
        if self.n_b0 < 1:
            raise ValueError("need at least one b=0 acquisition")
        norms = np.linalg.norm(self.directions, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("directions must be unit vectors")
        # renormalize only what needs it: already-unit rows keep their bits,
        # so rebuilding a scheme from a permutation is exactly reproducible
        off = np.abs(norms - 1.0) > 1e-12
        if np.any(off):
            self.directions = self.directions.copy()
            self.directions[off] /= norms[off, None]
        dots = np.abs(self.directions @ self.directions.T)
        np.fill_diagonal(dots, 0.0)
        if np.any(dots > np.cos(DUPLICATE_ANGLE)):
            i, j = np.unravel_index(np.argmax(dots), dots.shape)
            raise ValueError(f"directions {i} and {j} are duplicate lines")

    @property
    def n_directions(self):
        return len(self.directions)


@dataclass
class DirectionPools:
    """Disjoint train/test index pools covering a scheme's direction range."""
    train: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))
    test: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))


def coulomb_energy(directions):
    """Antipodally symmetric 1/r electrostatic energy of a direction set."""
    x = np.asarray(directions, dtype=float)
    diff = x[:, None, :] - x[None, :, :]
    summ = x[:, None, :] + x[None, :, :]
    d_rep = np.linalg.norm(diff, axis=-1)
    d_att = np.linalg.norm(summ, axis=-1)
    iu = np.triu_indices(len(x), k=1)
    return float(np.sum(1.0 / d_rep[iu]) + np.sum(1.0 / d_att[iu]))


def _coulomb_grad(x):
    diff = x[:, None, :] - x[None, :, :]
    summ = x[:, None, :] + x[None, :, :]
    d_rep = np.linalg.norm(diff, axis=-1)
    d_att = np.linalg.norm(summ, axis=-1)
    np.fill_diagonal(d_rep, 1.0)
    np.fill_diagonal(d_att, 1.0)
    g = -(diff / d_rep[..., None] ** 3).sum(axis=1)
    g -= (summ / d_att[..., None] ** 3).sum(axis=1)
    # own antipode term: d/dx |2x|^-1 on the unit sphere is tangentially zero,
    # skip it (constant 0.5 energy per point either way)
    np.fill_diagonal(d_att, np.inf)
    return g


def _minimize_coulomb(x0, iters=500, step=0.05):
    """Projected gradient descent with backtracking; energy never increases.

    Returns the optimized directions and the accepted-energy history.
    """
    x = x0.copy()
    energy = coulomb_energy(x)
    history = [energy]
    for _ in range(iters):
        g = _coulomb_grad(x)
        improved = False
        for _ in range(40):
            trial = x - step * g
            trial /= np.linalg.norm(trial, axis=1)[:, None]
            e = coulomb_energy(trial)
            if e <= energy:
                x, energy, improved = trial, e, True
                step *= 1.2
                break
            step *= 0.5
        history.append(energy)
        if not improved:
            break
    return x, history


def generate_uniform(n, seed=0):
    """Generate `n` directions with near-uniform angular coverage.

    Minimizes the antipodal Coulomb energy by projected gradient descent
    from a seeded random start; deterministic for a fixed seed.

    Raises
    ------
    TooFewDirections
        If n < 6.
    """
    if n < MIN_DIRECTIONS:
        raise TooFewDirections(f"need at least {MIN_DIRECTIONS} directions, got {n}")
    rng = _rng(seed)
    x0 = rng.normal(size=(n, 3))
    x0 /= np.linalg.norm(x0, axis=1)[:, None]
    x, _ = _minimize_coulomb(x0)
    # deterministic signs (first nonzero component positive) for stable files
    for v in x:
        for c in v:
            if c != 0.0:
                if c < 0.0:
                    v *= -1.0
                break
    return GradientScheme(b=1000.0, directions=x)


def min_line_angle(directions):
    """Smallest pairwise angle (radians) between directions taken as lines."""
    x = np.asarray(directions, dtype=float)
    dots = np.abs(x @ x.T)
    np.fill_diagonal(dots, 0.0)
    return float(np.arccos(np.clip(dots.max(), -1.0, 1.0)))


def condition_number(scheme):
    """Singular-value ratio of the scheme's (n, 6) design matrix.

    Raises
    ------
    RankDeficient
        If the design matrix has rank < 6 (collinear scheme).
    """
    a = design_matrix(scheme.directions)
    s = np.linalg.svd(a, compute_uv=False)
    if len(s) < 6 or s[-1] <= s[0] * 1e-12:
        raise RankDeficient("design matrix rank < 6")
    return float(s[0] / s[-1])


def split_pools(scheme, train_count):
    """First `train_count` directions for training, the rest for testing."""
    n = scheme.n_directions
    if not (MIN_DIRECTIONS <= train_count < n):
        raise BadSplit(f"train_count must be in [{MIN_DIRECTIONS}, {n}), got {train_count}")
    return DirectionPools(train=np.arange(train_count),
                          test=np.arange(train_count, n))


def sample_subset(pool, k, seed=0):
    """Draw k distinct indices from a pool, uniform without replacement."""
    pool = np.asarray(pool, dtype=int)
    if k < MIN_DIRECTIONS:
        raise SubsetTooSmall(f"subset must have >= {MIN_DIRECTIONS} directions, got {k}")
    if k > len(pool):
        raise SubsetTooLarge(f"subset of {k} from pool of {len(pool)}")
    rng = _rng(seed)
    return rng.choice(pool, size=k, replace=False)
