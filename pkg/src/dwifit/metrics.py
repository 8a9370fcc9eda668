"""Image-quality metrics over a mask: PSNR, global SSIM, NRMSE.

SSIM here is the single global statistic built from masked means, variances
and covariance (not the windowed variant common in image libraries).
"""

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMask, ZeroReference

PSNR_CAP_DB = 300.0

CSV_HEADER = "map_name,method,n_directions,psnr_db,ssim,nrmse,voxels"


@dataclass
class SsimConfig:
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0   # reference max - min over the mask

    @property
    def c1(self):
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self):
        return (self.k2 * self.dynamic_range) ** 2


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    nrmse: float
    voxels: int


def _masked(est, ref, mask):
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("no voxels selected")
    return np.asarray(est, dtype=float)[mask], np.asarray(ref, dtype=float)[mask]


def psnr(est, ref, mask):
    """Peak signal-to-noise ratio in dB; Peak = max(ref) over the mask.

    Identical images return the +300 dB cap instead of infinity.
    """
    e, r = _masked(est, ref, mask)
    mse = np.mean((e - r) ** 2)
    if mse == 0:
        return PSNR_CAP_DB
    peak = r.max()
    return min(float(10.0 * np.log10(peak ** 2 / mse)), PSNR_CAP_DB)


def ssim(est, ref, mask, cfg=None):
    """Global structural similarity over masked voxels.

    `cfg.dynamic_range` defaults to max - min of the reference over the
    mask; pass an explicit SsimConfig to pin it externally (which also makes
    the statistic symmetric in its arguments).
    """
    e, r = _masked(est, ref, mask)
    if e.size < 2:
        raise EmptyMask("ssim needs >= 2 masked voxels")
    if cfg is None:
        rng = float(r.max() - r.min())
        if rng == 0:
            raise ZeroReference("reference has zero dynamic range over mask")
        cfg = SsimConfig(dynamic_range=rng)
    mu_e, mu_r = e.mean(), r.mean()
    var_e, var_r = e.var(), r.var()
    cov = ((e - mu_e) * (r - mu_r)).mean()
    return float((2 * mu_e * mu_r + cfg.c1) * (2 * cov + cfg.c2)
                 / ((mu_e ** 2 + mu_r ** 2 + cfg.c1) * (var_e + var_r + cfg.c2)))


def nrmse(est, ref, mask):
    """Root mean square error normalized by the reference energy."""
    e, r = _masked(est, ref, mask)
    denom = np.sum(r ** 2)
    if denom == 0:
        raise ZeroReference("reference is all-zero over mask")
    return float(np.sqrt(np.sum((e - r) ** 2) / denom))


def metric_report(est, ref, mask, cfg=None):
    """All three metrics over one shared mask."""
    return MetricReport(psnr=psnr(est, ref, mask),
                        ssim=ssim(est, ref, mask, cfg),
                        nrmse=nrmse(est, ref, mask),
                        voxels=int(np.asarray(mask, dtype=bool).sum()))


def csv_row(map_name, method, n_directions, report):
    return (f"{map_name},{method},{n_directions},"
            f"{report.psnr:.6f},{report.ssim:.6f},{report.nrmse:.6f},"
            f"{report.voxels}")
