import numpy as np
import pytest

from dwifit import phantom as P
from dwifit import scheme as S
from dwifit.errors import DimsTooSmall
from dwifit.tensor import derive_maps, eig_sym3, eigvals_sym3


def test_dims_too_small():
    with pytest.raises(DimsTooSmall):
        P.PhantomSpec(dims=(16, 64))


def test_eigenvalue_ranges_validated():
    with pytest.raises(ValueError):
        P.PhantomSpec(lam_par_range=(0.5e-3, 1.5e-3))
    with pytest.raises(ValueError):
        P.PhantomSpec(iso_range=(0.7e-3, 5e-3))


def test_iso_layout_has_no_anisotropy():
    tf = P.make_tensor_field(P.PhantomSpec(dims=(48, 48), layout="iso", seed=1))
    lam = eigvals_sym3(tf.tensors)
    fa = derive_maps(lam).fa
    assert fa[tf.mask].max() < 0.05


def test_masked_out_voxels_zero_and_psd_inside():
    tf = P.make_tensor_field(P.PhantomSpec(dims=(64, 64), n_slices=3,
                                           layout="mixed", seed=2))
    assert np.all(tf.tensors[~tf.mask] == 0.0)
    lam = eigvals_sym3(tf.tensors[tf.mask])
    assert lam.min() >= 0.0
    assert lam.max() <= 4e-3


def test_ring_directions_follow_tangent():
    spec = P.PhantomSpec(dims=(64, 64), layout="rings", seed=3)
    tf = P.make_tensor_field(spec)
    h, w = spec.dims
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    # voxels on the ring mid-radius at 0 and 90 degrees around the center
    y0, x0 = int(round(cy)), int(round(cx + 0.7 * 0.46 * w))
    y1, x1 = int(round(cy + 0.7 * 0.46 * h)), int(round(cx))
    v0 = eig_sym3(tf.tensors[0, y0, x0]).v1
    v1 = eig_sym3(tf.tensors[0, y1, x1]).v1
    # geometry oracle: tangents at those ring angles
    t0 = P.ring_tangent(spec, (y0, x0))
    t1 = P.ring_tangent(spec, (y1, x1))
    assert abs(abs(v0 @ t0)) > np.cos(np.radians(3))
    assert abs(abs(v1 @ t1)) > np.cos(np.radians(3))
    # 90 degrees apart on the ring -> orthogonal principal directions
    assert abs(v0 @ v1) < np.sin(np.radians(3))


def test_field_deterministic():
    spec = dict(dims=(48, 48), n_slices=2, layout="mixed", seed=9)
    a = P.make_tensor_field(P.PhantomSpec(**spec))
    b = P.make_tensor_field(P.PhantomSpec(**spec))
    assert np.array_equal(a.tensors, b.tensors)
    assert np.array_equal(a.mask, b.mask)


def test_synthesize_noiseless_b0():
    tf = P.make_tensor_field(P.PhantomSpec(dims=(48, 48), seed=4))
    sch = S.generate_uniform(6, seed=0)
    vol = P.synthesize_dwi(tf, sch, s0=500.0, sigma=0.0)
    assert np.all(vol.s0[tf.mask] == 500.0)
    assert np.all(vol.s0[~tf.mask] == 0.0)
    assert vol.dwi.shape == (1, 6, 48, 48)
    assert vol.dwi.min() >= 0.0


def test_synthesize_deterministic_and_noise_changes_with_seed():
    tf = P.make_tensor_field(P.PhantomSpec(dims=(48, 48), seed=4))
    sch = S.generate_uniform(6, seed=0)
    a = P.synthesize_dwi(tf, sch, sigma=40.0, seed=8)
    b = P.synthesize_dwi(tf, sch, sigma=40.0, seed=8)
    c = P.synthesize_dwi(tf, sch, sigma=40.0, seed=9)
    assert np.array_equal(a.dwi, b.dwi)
    assert not np.array_equal(a.dwi, c.dwi)


def test_background_noise_is_rayleigh():
    # outside the mask the clean signal is 0, so the Rician magnitude is
    # Rayleigh with mean sigma * sqrt(pi/2); ~1e6 background samples
    spec = P.PhantomSpec(dims=(128, 128), n_slices=32, seed=5)
    tf = P.make_tensor_field(spec)
    sch = S.generate_uniform(6, seed=0)
    sigma = 25.0
    vol = P.synthesize_dwi(tf, sch, s0=1000.0, sigma=sigma, seed=6)
    background = vol.dwi[~np.broadcast_to(tf.mask[:, None], vol.dwi.shape)]
    assert background.size > 1_000_000
    expected = sigma * np.sqrt(np.pi / 2.0)
    assert abs(background.mean() - expected) / expected < 0.01


def test_noise_independent_across_directions_and_voxels():
    # background voxels have identical (zero) clean signal, so any sample
    # correlation there is purely the noise draws
    spec = P.PhantomSpec(dims=(128, 128), n_slices=20, layout="iso", seed=7)
    tf = P.make_tensor_field(spec)
    sch = S.generate_uniform(6, seed=0)
    vol = P.synthesize_dwi(tf, sch, s0=1000.0, sigma=50.0, seed=3)
    bg = ~tf.mask
    # across directions: same voxels, two DW planes
    a = vol.dwi[:, 0][bg]
    b = vol.dwi[:, 1][bg]
    assert a.size > 100_000
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.01
    # across neighboring voxels within one plane
    pair = bg[:, :, :-1] & bg[:, :, 1:]
    c = vol.dwi[:, 0][:, :, :-1][pair]
    d = vol.dwi[:, 0][:, :, 1:][pair]
    assert abs(np.corrcoef(c, d)[0, 1]) < 0.01
    # and against the b=0 stack at the same voxels
    assert abs(np.corrcoef(a, vol.s0[bg])[0, 1]) < 0.01


def test_b0_repeats_averaged():
    tf = P.make_tensor_field(P.PhantomSpec(dims=(64, 64), n_slices=20, seed=8))
    sch4 = S.GradientScheme(b=1000.0,
                            directions=S.generate_uniform(6, seed=0).directions,
                            n_b0=4)
    sigma = 50.0
    vol = P.synthesize_dwi(tf, sch4, s0=1000.0, sigma=sigma, seed=1)
    # averaging 4 repeats shrinks the in-mask std by ~2x
    resid = vol.s0[tf.mask] - 1000.0
    assert abs(resid.std() - sigma / 2.0) / (sigma / 2.0) < 0.1


def test_reported_snr_definition():
    assert P.reported_snr(1000.0, 50.0) == 20.0
    assert P.reported_snr(1000.0, 100.0) == 10.0
    assert P.reported_snr(1000.0, 0.0) == np.inf
