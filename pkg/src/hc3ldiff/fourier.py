"""2D FFT, quadrant shifts and the high-frequency extractor.

The FFT is an iterative radix-2 Cooley-Tukey transform applied along each of
the last two axes; axes whose length is not a power of two fall back to a
direct DFT. Forward transforms are unscaled, inverse ones scaled by 1/(H*W).
Leading batch axes are carried through untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, StateError
from .grid import matmul

CLINICAL_TH = 30  # cutoff used on full-size 384-wide slices
CLINICAL_WIDTH = 384


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _fft_last_axis(x: np.ndarray, inverse: bool) -> np.ndarray:
    n = x.shape[-1]
    sign = 1.0 if inverse else -1.0
    if not _is_pow2(n):
        k = np.arange(n)
        dft = np.exp(sign * 2j * np.pi * np.outer(k, k) / n)
        return matmul(x, dft)
    y = x[..., _bit_reverse_indices(n)].astype(np.complex128)
    m = 2
    while m <= n:
        half = m // 2
        w = np.exp(sign * 2j * np.pi * np.arange(half) / m)
        y = y.reshape(*x.shape[:-1], n // m, m)
        even = y[..., :half]
        odd = y[..., half:] * w
        y = np.concatenate([even + odd, even - odd], axis=-1)
        m *= 2
    return y.reshape(x.shape)


def _fft_axis(x: np.ndarray, axis: int, inverse: bool) -> np.ndarray:
    x = np.moveaxis(x, axis, -1)
    return np.moveaxis(_fft_last_axis(x, inverse), -1, axis)


@dataclass(frozen=True)
class Spectrum:
    """Complex 2D spectrum over the last two axes, with a flag for quadrant-shifted layout."""

    values: np.ndarray
    centered: bool = False

    @property
    def shape(self):
        return self.values.shape


def _check_image(image) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim < 2 or min(image.shape[-2:]) < 1:
        raise ValueError(f"expected [..., H, W] with H, W >= 1, got {image.shape}")
    return image


def fft2(image) -> Spectrum:
    x = _check_image(image)
    return Spectrum(_fft_axis(_fft_axis(x, -1, False), -2, False), centered=False)


def ifft2(spec: Spectrum) -> np.ndarray:
    """Inverse transform; returns the complex result (callers take ``.real`` when appropriate)."""
    if spec.centered:
        raise StateError("ifft2 expects an un-centered spectrum; call ifft_shift first")
    h, w = spec.values.shape[-2:]
    return _fft_axis(_fft_axis(spec.values, -1, True), -2, True) / (h * w)


def fft_shift(spec: Spectrum) -> Spectrum:
    """Move the zero frequency to index (H//2, W//2)."""
    if spec.centered:
        raise StateError("spectrum is already centered")
    h, w = spec.values.shape[-2:]
    return Spectrum(np.roll(spec.values, (h // 2, w // 2), axis=(-2, -1)), centered=True)


def ifft_shift(spec: Spectrum) -> Spectrum:
    if not spec.centered:
        raise StateError("spectrum is not centered")
    h, w = spec.values.shape[-2:]
    return Spectrum(np.roll(spec.values, (-(h // 2), -(w // 2)), axis=(-2, -1)), centered=False)


@dataclass(frozen=True)
class HfeConfig:
    """Cutoff ``th`` in frequency-index units; ``mode`` is 'or' (cross-shaped removal) or 'and' (centered square)."""

    th: int = CLINICAL_TH
    mode: str = "or"

    def __post_init__(self):
        if int(self.th) != self.th or self.th < 0:
            raise ValueError(f"th must be a non-negative integer, got {self.th}")
        if self.mode not in ("or", "and"):
            raise ValueError(f"mode must be 'or' or 'and', got {self.mode!r}")

    def validate(self, h: int, w: int) -> None:
        if self.th > min(h // 2, w // 2):
            raise ValueError(f"th={self.th} exceeds min(H//2, W//2)={min(h // 2, w // 2)}")

    @classmethod
    def scaled(cls, width: int, mode: str = "or") -> "HfeConfig":
        """Keep the same fraction of the spectrum as th=30 on 384-wide slices."""
        return cls(th=int(np.floor(CLINICAL_TH * width / CLINICAL_WIDTH + 0.5)), mode=mode)


def low_frequency_region(h: int, w: int, th: int, mode: str = "or") -> np.ndarray:
    """Boolean [H, W] map of centered positions that the high-pass removes."""
    fy = np.abs(np.arange(h) - h // 2)[:, None]
    fx = np.abs(np.arange(w) - w // 2)[None, :]
    if mode == "or":
        return (fx < th) | (fy < th)
    return (fx < th) & (fy < th)


def high_pass_mask(spec: Spectrum, th: int, mode: str = "or") -> Spectrum:
    """Zero the low-frequency entries of a centered spectrum."""
    if not spec.centered:
        raise StateError("high_pass_mask expects a centered spectrum")
    h, w = spec.values.shape[-2:]
    HfeConfig(th, mode).validate(h, w)
    drop = low_frequency_region(h, w, th, mode)
    return Spectrum(np.where(drop, 0.0, spec.values), centered=True)


def extract_high_frequency(image, cfg: HfeConfig) -> np.ndarray:
    """High-frequency image: FFT, shift, zero low frequencies, unshift, inverse FFT, real part."""
    x = _check_image(image).astype(np.float64)
    cfg.validate(*x.shape[-2:])
    if cfg.th == 0:  # empty mask: the transform pair reduces to the identity
        return x.copy()
    spec = high_pass_mask(fft_shift(fft2(x)), cfg.th, cfg.mode)
    out = ifft2(ifft_shift(spec))
    scale = max(1.0, float(np.max(np.abs(x)))) if x.size else 1.0
    if np.max(np.abs(out.imag)) >= 1e-9 * scale:
        raise NumericalError("high-pass output has a non-negligible imaginary part")
    return out.real
