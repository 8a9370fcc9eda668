import numpy as np
import pytest

from dwifit import tensor as T
from dwifit.errors import NonPositiveSignal, ZeroB

from oracles import jacobi_eigvals, random_spd_tensor6, random_rotation


def test_signal_forward_b0_collapses():
    d = np.array([1e-3, 2e-3, 3e-3, 1e-4, -2e-4, 5e-5])
    assert T.signal_forward(d, (0.0, 0.0, 1.0), 0.0, 100.0) == 100.0


def test_signal_forward_isotropic():
    d = np.array([1e-3, 1e-3, 1e-3, 0, 0, 0])
    s = T.signal_forward(d, (1.0, 0.0, 0.0), 1000.0, 1.0)
    assert np.isclose(s, np.exp(-1.0), rtol=1e-12)


def test_signal_forward_prolate():
    # g along y picks out dyy: exp(-1000 * 0.5e-3) = exp(-0.5)
    d = np.array([2e-3, 0.5e-3, 0.5e-3, 0, 0, 0])
    s = T.signal_forward(d, (0.0, 1.0, 0.0), 1000.0, 1.0)
    assert np.isclose(s, np.exp(-0.5), rtol=1e-12)


@pytest.mark.parametrize("g,row", [
    ((1, 0, 0), (1, 0, 0, 0, 0, 0)),
    ((0, 0, 1), (0, 0, 1, 0, 0, 0)),
])
def test_design_row_axes(g, row):
    assert np.allclose(T.design_row(g), row)

def test_design_row_diagonal_direction():
    s = 1.0 / np.sqrt(2.0)
    assert np.allclose(T.design_row((s, s, 0.0)), (0.5, 0.5, 0, 1, 0, 0),
                       atol=1e-15)


def test_log_signal_ratio_values():
    assert np.isclose(T.log_signal_ratio(1.0, np.exp(-1.0), 1000.0), 1e-3)
    assert T.log_signal_ratio(5.0, 5.0, 500.0) == 0.0
    assert np.isclose(T.log_signal_ratio(200.0, 100.0, 1000.0),
                      np.log(2.0) / 1000.0)


def test_log_signal_ratio_errors():
    with pytest.raises(NonPositiveSignal):
        T.log_signal_ratio(1.0, 0.0, 1000.0)
    with pytest.raises(NonPositiveSignal):
        T.log_signal_ratio(-1.0, 1.0, 1000.0)
    with pytest.raises(ZeroB):
        T.log_signal_ratio(1.0, 0.5, 0.0)


def test_eig_diagonal():
    es = T.eig_sym3([3e-3, 2e-3, 1e-3, 0, 0, 0])
    assert np.allclose(es.lam, [3e-3, 2e-3, 1e-3])
    assert np.allclose(np.abs(es.vecs), np.eye(3), atol=1e-12)


def test_eig_isotropic():
    es = T.eig_sym3([1e-3, 1e-3, 1e-3, 0, 0, 0])
    assert np.allclose(es.lam, 1e-3)
    assert np.allclose(es.vecs @ es.vecs.T, np.eye(3), atol=1e-12)


def test_eig_random_against_jacobi_oracle():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        m = rng.normal(size=(3, 3))
        m = (m + m.T) / 2
        d6 = T.matrix_to_tensor6(m)
        es = T.eig_sym3(d6)
        ref = jacobi_eigvals(m)
        assert np.abs(es.lam - ref).max() < 1e-10


def test_eig_eigensystem_invariants():
    rng = np.random.default_rng(7)
    for _ in range(500):
        d6 = random_spd_tensor6(rng)
        m = T.tensor6_to_matrix(d6)
        es = T.eig_sym3(d6)
        scale = max(np.abs(es.lam).max(), 1e-30)
        # descending, orthonormal, eigen equation, reconstruction
        assert es.lam[0] >= es.lam[1] >= es.lam[2]
        assert np.abs(es.vecs @ es.vecs.T - np.eye(3)).max() < 1e-7
        for lam_i, v in zip(es.lam, es.vecs):
            assert np.abs(m @ v - lam_i * v).max() < 1e-7 * scale
        rec = (es.vecs.T * es.lam) @ es.vecs
        assert np.linalg.norm(rec - m) < 1e-9


def test_eig_sign_rule():
    rng = np.random.default_rng(3)
    for _ in range(100):
        es = T.eig_sym3(random_spd_tensor6(rng))
        for v in es.vecs:
            nz = v[v != 0]
            assert nz[0] > 0


def test_eig_near_degenerate():
    # eigenvalue gap of 1e-14 forces the Jacobi fallback
    d6 = np.array([1e-3, 1e-3 + 1e-17, 2e-3, 1e-18, 0, 0])
    es = T.eig_sym3(d6)
    assert np.abs(es.vecs @ es.vecs.T - np.eye(3)).max() < 1e-9


def test_derive_maps_isotropic():
    maps = T.derive_maps(np.array([2e-3, 2e-3, 2e-3]))
    assert maps.fa == 0.0
    assert np.isclose(maps.md, 2e-3) and np.isclose(maps.ad, 2e-3)
    assert np.isclose(maps.rd, 2e-3)


def test_derive_maps_rank_one():
    maps = T.derive_maps(np.array([3e-3, 0.0, 0.0]))
    assert np.isclose(maps.fa, 1.0)
    assert np.isclose(maps.md, 1e-3)
    assert maps.ad == 3e-3 and maps.rd == 0.0


def test_derive_maps_reference_case():
    maps = T.derive_maps(np.array([3e-3, 2e-3, 1e-3]))
    assert np.isclose(maps.md, 2e-3, rtol=1e-12)
    assert np.isclose(maps.ad, 3e-3, rtol=1e-12)
    assert np.isclose(maps.rd, 1.5e-3, rtol=1e-12)
    assert np.isclose(maps.fa, np.sqrt(3.0 / 14.0), rtol=1e-12)


def test_derive_maps_all_zero_convention():
    assert T.derive_maps(np.zeros(3)).fa == 0.0


def test_fa_bounds_and_md_identity():
    rng = np.random.default_rng(11)
    d6 = np.stack([random_spd_tensor6(rng) for _ in range(2000)])
    lam = T.eigvals_sym3(d6)
    maps = T.derive_maps(lam)
    assert np.all(maps.fa >= 0.0) and np.all(maps.fa <= 1.0)
    trace_md = (d6[:, 0] + d6[:, 1] + d6[:, 2]) / 3.0
    assert np.abs(maps.md - trace_md).max() < 1e-12


def test_maps_rotation_invariance():
    rng = np.random.default_rng(13)
    for _ in range(200):
        d6 = random_spd_tensor6(rng)
        r = random_rotation(rng)
        m_rot = r @ T.tensor6_to_matrix(d6) @ r.T
        a = T.derive_maps(T.eig_sym3(d6).lam)
        b = T.derive_maps(T.eig_sym3(T.matrix_to_tensor6(m_rot)).lam)
        for name in ("fa", "md", "ad", "rd"):
            assert np.abs(getattr(a, name) - getattr(b, name)) < 1e-9


def test_forward_model_round_trip():
    # design_row / log_signal_ratio invert signal_forward exactly
    rng = np.random.default_rng(17)
    b = 1000.0
    for _ in range(200):
        d6 = random_spd_tensor6(rng)
        g = rng.normal(size=3)
        g /= np.linalg.norm(g)
        si = T.signal_forward(d6, g, b, 1.0)
        beta = T.log_signal_ratio(1.0, si, b)
        assert np.abs(T.design_row(g) @ d6 - beta) < 1e-10


def test_dec_color():
    es = T.EigenSystem(lam=np.array([3e-3, 1e-3, 1e-3]), vecs=np.eye(3))
    assert np.allclose(T.dec_color(es, 0.0), 0.0)
    assert np.allclose(T.dec_color(es, 1.0), (1, 0, 0))
    s = 1.0 / np.sqrt(2.0)
    es2 = T.EigenSystem(lam=es.lam, vecs=np.array([[s, s, 0], [0, 0, 1], [s, -s, 0]]))
    assert np.allclose(T.dec_color(es2, 0.5), (0.5 * s, 0.5 * s, 0.0))


def test_principal_dirs_field_matches_per_voxel():
    rng = np.random.default_rng(19)
    d6 = np.stack([random_spd_tensor6(rng) for _ in range(300)])
    v1 = T.principal_dirs_field(d6)
    for i in range(300):
        ref = T.eig_sym3(d6[i]).v1
        assert min(np.abs(v1[i] - ref).max(), np.abs(v1[i] + ref).max()) < 1e-6
