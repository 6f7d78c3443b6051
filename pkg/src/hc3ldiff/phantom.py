"""Seeded paired CT / CBCT slice phantoms and HU normalization."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import ndimage

from .grid import RngStream

HU_MIN, HU_MAX = -1000.0, 3000.0
AIR, TISSUE = -1000.0, 40.0
BODY_LEVEL = -500.0


def hu_to_unit(hu):
    """Clip to [-1000, 3000] HU and map linearly onto [-1, 1]."""
    hu = np.clip(np.asarray(hu, dtype=np.float64), HU_MIN, HU_MAX)
    return (hu - HU_MIN) / (HU_MAX - HU_MIN) * 2.0 - 1.0


def unit_to_hu(unit):
    return (np.asarray(unit, dtype=np.float64) + 1.0) / 2.0 * (HU_MAX - HU_MIN) + HU_MIN


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 64
    n_train: int = 200
    n_test: int = 50
    seed: int = 20240601
    tissue_hu: tuple = (25.0, 55.0)
    target_hu: tuple = (180.0, 240.0)
    bone_hu: tuple = (700.0, 1200.0)
    bone_count: tuple = (2, 4)
    air_count: tuple = (0, 2)
    blur_px: float = 0.7
    # degradation
    cupping_hu: float = 220.0
    streak_count: tuple = (2, 4)
    streak_hu: float = 120.0
    noise_hu: float = 45.0
    gain_range: tuple = (0.86, 0.95)
    offset_hu: float = 40.0
    mae_band: tuple | None = (40.0, 200.0)

    def __post_init__(self):
        if self.size < 8 or self.size % 8:
            raise ValueError("size must be a positive multiple of 8")
        if self.n_train < 0 or self.n_test < 0:
            raise ValueError("counts must be non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown phantom keys: {sorted(unknown)}")
        conv = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**conv)

    def null_degradation(self) -> "PhantomSpec":
        return replace(self, cupping_hu=0.0, streak_hu=0.0, noise_hu=0.0, gain_range=(1.0, 1.0), offset_hu=0.0, mae_band=None)


SPLITS = {"train": 0, "test": 1}


def _stream(spec: PhantomSpec, split: str, index: int, purpose: int) -> RngStream:
    return RngStream(spec.seed).child(SPLITS[split], index, purpose)


def _ellipse(yy, xx, cy, cx, ay, ax, theta):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def generate_ct(spec: PhantomSpec, index: int, split: str = "train") -> np.ndarray:
    """CT slice in HU: body ellipse, central target, bones, air pockets, mild partial-volume blur."""
    count = spec.n_train if split == "train" else spec.n_test
    if not 0 <= index < count:
        raise ValueError(f"index {index} out of range for {split} split of {count}")
    rng = _stream(spec, split, index, 0)
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    img = np.full((n, n), AIR)

    cy = n / 2 + rng.uniform(low=-0.04, high=0.04) * n
    cx = n / 2 + rng.uniform(low=-0.04, high=0.04) * n
    ay = rng.uniform(low=0.26, high=0.34) * n
    ax = rng.uniform(low=0.38, high=0.45) * n
    body = _ellipse(yy, xx, cy, cx, ay, ax, rng.uniform(low=-0.15, high=0.15))
    img[body] = rng.uniform(low=spec.tissue_hu[0], high=spec.tissue_hu[1])

    # bones placed on a ring between target and skin
    nb = int(rng.integers(spec.bone_count[0], spec.bone_count[1] + 1))
    angles = rng.uniform(low=0, high=2 * np.pi) + np.linspace(0, 2 * np.pi, nb, endpoint=False)
    for a in angles:
        a = a + rng.uniform(low=-0.3, high=0.3)
        rad = rng.uniform(low=0.55, high=0.7)
        by, bx = cy + rad * ay * np.sin(a), cx + rad * ax * np.cos(a)
        bay, bax = rng.uniform(low=0.05, high=0.09, shape=2) * n
        mask = _ellipse(yy, xx, by, bx, bay, bax, rng.uniform(low=0, high=np.pi)) & body
        img[mask] = rng.uniform(low=spec.bone_hu[0], high=spec.bone_hu[1])

    na = int(rng.integers(spec.air_count[0], spec.air_count[1] + 1))
    for _ in range(na):
        a = rng.uniform(low=0, high=2 * np.pi)
        rad = rng.uniform(low=0.25, high=0.45)
        py, px = cy + rad * ay * np.sin(a), cx + rad * ax * np.cos(a)
        pa = rng.uniform(low=0.025, high=0.05, shape=2) * n
        img[_ellipse(yy, xx, py, px, pa[0], pa[1], 0.0) & body] = AIR

    ty = cy + rng.uniform(low=-0.03, high=0.03) * n
    tx = cx + rng.uniform(low=-0.03, high=0.03) * n
    tay, tax = rng.uniform(low=0.08, high=0.12, shape=2) * n
    target = _ellipse(yy, xx, ty, tx, tay, tax, rng.uniform(low=0, high=np.pi))
    img[target] = rng.uniform(low=spec.target_hu[0], high=spec.target_hu[1])

    if spec.blur_px > 0:
        img = ndimage.gaussian_filter(img, spec.blur_px, mode="nearest")
    return np.clip(img, HU_MIN, HU_MAX)


def degrade_to_cbct(ct: np.ndarray, spec: PhantomSpec, index: int, split: str = "train") -> np.ndarray:
    """Cupping, streaks, noise and a global gain/offset error, applied in HU."""
    rng = _stream(spec, split, index, 1)
    n = ct.shape[-1]
    yy, xx = np.mgrid[0 : ct.shape[0], 0:n].astype(np.float64) + 0.5
    obj = body_mask(ct)
    c = np.array([yy[obj].mean(), xx[obj].mean()]) if obj.any() else np.array([n / 2, n / 2])
    r2 = ((yy - c[0]) ** 2 + (xx - c[1]) ** 2) / (0.5 * n) ** 2
    out = ct.copy()
    # shading: deepest at the object center, fading out to the rim
    out -= spec.cupping_hu * np.clip(1.0 - r2, 0.0, None) * obj

    ns = int(rng.integers(spec.streak_count[0], spec.streak_count[1] + 1))
    for _ in range(ns):
        th = rng.uniform(low=0, high=np.pi)
        py, px = c + rng.uniform(low=-0.15, high=0.15, shape=2) * n
        d = (xx - px) * np.sin(th) - (yy - py) * np.cos(th)
        amp = spec.streak_hu * rng.uniform(low=0.5, high=1.0) * (1.0 if rng.uniform() < 0.5 else -1.0)
        out += amp * np.cos(2 * np.pi * d / 4.0) * np.exp(-(d**2) / (2 * 3.0**2))

    gain = rng.uniform(low=spec.gain_range[0], high=spec.gain_range[1])
    offset = rng.uniform(low=-1.0, high=1.0) * spec.offset_hu
    out = out + (out - AIR) * (gain - 1.0) + offset  # gain anchored at air
    out += spec.noise_hu * rng.normal(out.shape)
    out = np.clip(out, HU_MIN, HU_MAX)
    # intensity errors only: a pixel whose value would cross the body threshold keeps its CT value
    crossed = body_mask(out) != obj
    out[crossed] = np.clip(ct[crossed], HU_MIN, HU_MAX)
    return out


def generate_split(spec: PhantomSpec, split: str):
    count = spec.n_train if split == "train" else spec.n_test
    ct = np.empty((count, spec.size, spec.size))
    cbct = np.empty_like(ct)
    for i in range(count):
        ct[i] = generate_ct(spec, i, split)
        cbct[i] = degrade_to_cbct(ct[i], spec, i, split)
    if spec.mae_band is not None and count:
        mae = np.abs(cbct - ct).mean(axis=(1, 2))
        lo, hi = spec.mae_band
        bad = np.flatnonzero((mae < lo) | (mae > hi))
        if bad.size:
            raise ValueError(f"{split}: CBCT MAE outside [{lo}, {hi}] HU for indices {bad[:10].tolist()}")
    return ct, cbct


def body_mask(hu, level=BODY_LEVEL):
    return np.asarray(hu) > level
