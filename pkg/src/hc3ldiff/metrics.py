"""MAE, PSNR and global-statistics SSIM on HU images."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAX_HU = 3000.0
C1 = (0.01 * MAX_HU) ** 2
C2 = (0.03 * MAX_HU) ** 2


def _pair(ct, sct):
    a = np.asarray(ct, dtype=np.float64)
    b = np.asarray(sct, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mae(ct, sct) -> float:
    a, b = _pair(ct, sct)
    return float(np.mean(np.abs(a - b)))


def psnr(ct, sct, max_value: float = MAX_HU) -> float:
    """10 log10(Max^2 / MSE) in dB; identical images give ``math.inf``."""
    a, b = _pair(ct, sct)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value**2 / mse)


def ssim(ct, sct, c1: float = C1, c2: float = C2) -> float:
    """Whole-image SSIM with population (1/n) variance and covariance."""
    a, b = _pair(ct, sct)
    mu_a, mu_b = a.mean(), b.mean()
    da, db = a - mu_a, b - mu_b
    var_a, var_b = np.mean(da * da), np.mean(db * db)
    cov = np.mean(da * db)
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(num / den)


@dataclass
class MetricReport:
    mae: float
    psnr: float
    ssim: float
    n: int
    max_const: float = MAX_HU
    c1: float = C1
    c2: float = C2

    def to_json(self):
        return {
            "mae": self.mae,
            "psnr": encode_float(self.psnr),
            "ssim": self.ssim,
            "n": self.n,
        }


def evaluate(ct, sct) -> MetricReport:
    a, b = _pair(ct, sct)
    return MetricReport(mae(a, b), psnr(a, b), ssim(a, b), int(a.size))


def encode_float(x: float):
    """JSON has no infinity; PSNR of identical images is written as the string "inf"."""
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def decode_float(x) -> float:
    return float(x)


def evaluate_slices(ct_slices, sct_slices) -> dict:
    """Per-slice reports plus aggregates (mean over slices) as a JSON-ready dict."""
    ct_slices = np.asarray(ct_slices, dtype=np.float64)
    sct_slices = np.asarray(sct_slices, dtype=np.float64)
    if ct_slices.shape != sct_slices.shape:
        raise ValueError(f"shape mismatch {ct_slices.shape} vs {sct_slices.shape}")
    reports = [evaluate(a, b) for a, b in zip(ct_slices, sct_slices)]
    agg_psnr = float(np.mean([r.psnr for r in reports]))  # inf if any slice is identical
    return {
        "per_slice": [r.to_json() for r in reports],
        "aggregate": {
            "mae": float(np.mean([r.mae for r in reports])),
            "psnr": encode_float(agg_psnr),
            "ssim": float(np.mean([r.ssim for r in reports])),
            "n_slices": len(reports),
        },
        "constants": {"max_hu": MAX_HU, "c1": C1, "c2": C2},
    }
