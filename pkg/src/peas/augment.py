"""Subtle image augmentations and the sampling functions built on them.

All operations take and return CHW float32 images in [0, 1]. Parameters are
bounded by a per-dataset preset; the ``high-res`` preset matches large images,
``low-res`` small ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .nn import DTYPE

AUGMENTATIONS = ("random-affine", "color-jitter", "random-crop", "gaussian-blur", "sharpness", "autocontrast")

PRESETS = {
    "high-res": {
        "rotation": 2.0,
        "translate": 0.10,
        "jitter": 0.05,
        "pad": 10,
        "blur_kernel": 3,
        "blur_sigma": 1.0,
        "sharpness": 2.0,
        "autocontrast_p": 0.5,
    },
    "low-res": {
        "rotation": 4.0,
        "translate": 0.10,
        "jitter": 0.05,
        "pad": 3,
        "blur_kernel": 3,
        "blur_sigma": 1.9,
        "sharpness": 1.5,
        "autocontrast_p": 0.5,
    },
}

_TOL = 1e-9


class AugmentationError(ValueError):
    pass


def _preset(preset):
    if isinstance(preset, dict):
        return preset
    try:
        return PRESETS[preset]
    except KeyError:
        raise AugmentationError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# individual augmentations
# ---------------------------------------------------------------------------


def apply_affine(x, rotation_deg: float = 0.0, shift_frac=(0.0, 0.0), preset="low-res"):
    """Rotate about the centre and translate by ``shift_frac`` = (dx, dy) of the image size.

    Bilinear resampling; pixels that map outside the source are filled with 0.
    """
    p = _preset(preset)
    dx_frac, dy_frac = shift_frac
    if abs(rotation_deg) > p["rotation"] + _TOL:
        raise AugmentationError(f"rotation {rotation_deg} exceeds preset bound {p['rotation']}")
    if max(abs(dx_frac), abs(dy_frac)) > p["translate"] + _TOL:
        raise AugmentationError(f"shift {shift_frac} exceeds preset bound {p['translate']}")
    x = np.asarray(x, dtype=DTYPE)
    if rotation_deg == 0 and dx_frac == 0 and dy_frac == 0:
        return x.copy()
    c, h, w = x.shape
    tx, ty = dx_frac * w, dy_frac * h
    # snap near-integer shifts so whole-pixel moves stay exact
    tx = round(tx) if abs(tx - round(tx)) < 1e-6 else tx
    ty = round(ty) if abs(ty - round(ty)) < 1e-6 else ty
    theta = np.deg2rad(rotation_deg)
    cos, sin = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: output pixel -> source location
    u, v = xx - cx - tx, yy - cy - ty
    sx = cos * u + sin * v + cx
    sy = -sin * u + cos * v + cy
    return np.clip(_bilinear(x, sy, sx), 0.0, 1.0).astype(DTYPE)


def _bilinear(x, sy, sx):
    c, h, w = x.shape
    y0, x0 = np.floor(sy).astype(int), np.floor(sx).astype(int)
    fy, fx = sy - y0, sx - x0
    out = np.zeros((c, h, w), dtype=np.float64)
    for oy, ox, wt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx), (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi, xi = y0 + oy, x0 + ox
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w) & (wt > 0)
        vals = x[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        out += np.where(valid, wt, 0.0) * vals
    return out


def _grayscale(x):
    if x.shape[0] == 1:
        return x[0]
    return 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]


def _rgb_to_hsv(x):
    r, g, b = x
    maxc, minc = x.max(axis=0), x.min(axis=0)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0)
    safe = np.where(delta > 0, delta, 1)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    hue = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    hue = np.where(delta > 0, (hue / 6.0) % 1.0, 0.0)
    return hue, s, v


def _hsv_to_rgb(hue, s, v):
    i = np.floor(hue * 6.0)
    f = hue * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def apply_color_jitter(x, brightness=1.0, contrast=1.0, saturation=1.0, hue=0.0, preset="low-res"):
    """Brightness, contrast, saturation and hue adjustments, applied in that order.

    Factors must lie within ``1 +/- jitter`` and the hue shift within
    ``+/- jitter`` of the hue circle. Single-channel images skip saturation and hue.
    """
    p = _preset(preset)
    j = p["jitter"]
    for name, val in (("brightness", brightness), ("contrast", contrast), ("saturation", saturation)):
        if abs(val - 1.0) > j + _TOL:
            raise AugmentationError(f"{name} factor {val} outside [{1 - j}, {1 + j}]")
    if abs(hue) > j + _TOL:
        raise AugmentationError(f"hue shift {hue} outside [{-j}, {j}]")
    out = np.asarray(x, dtype=DTYPE).copy()
    if brightness != 1.0:
        out = np.clip(out * brightness, 0.0, 1.0)
    if contrast != 1.0:
        mean = _grayscale(out).mean()
        out = np.clip((out - mean) * contrast + mean, 0.0, 1.0)
    if out.shape[0] == 3:
        if saturation != 1.0:
            gray = _grayscale(out)[None]
            out = np.clip((out - gray) * saturation + gray, 0.0, 1.0)
        if hue != 0.0:
            h, s, v = _rgb_to_hsv(out.astype(np.float64))
            out = np.clip(_hsv_to_rgb((h + hue) % 1.0, s, v), 0.0, 1.0)
    return out.astype(DTYPE)


def apply_crop_pad(x, pad: int, offset=(0, 0)):
    """Zero-pad by ``pad`` on every side, then crop back to the input size at ``offset`` = (row, col)."""
    x = np.asarray(x, dtype=DTYPE)
    oy, ox = offset
    if not (0 <= oy <= 2 * pad and 0 <= ox <= 2 * pad):
        raise AugmentationError(f"crop offset {offset} outside [0, {2 * pad}]")
    c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    return padded[:, oy : oy + h, ox : ox + w].copy()


def gaussian_kernel1d(kernel_size: int, sigma: float) -> np.ndarray:
    half = (kernel_size - 1) / 2.0
    t = np.arange(kernel_size) - half
    k = np.exp(-(t**2) / (2.0 * sigma**2))
    return k / k.sum()


def _separable(x, k1d):
    r = len(k1d) // 2
    xp = np.pad(x.astype(np.float64), ((0, 0), (r, r), (r, r)), mode="reflect")
    h, w = x.shape[1:]
    tmp = sum(k1d[i] * xp[:, i : i + h, :] for i in range(len(k1d)))
    return sum(k1d[i] * tmp[:, :, i : i + w] for i in range(len(k1d)))


def apply_gaussian_blur(x, kernel_size: int = 3, sigma: float = 1.0):
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise AugmentationError(f"kernel_size must be odd and positive, got {kernel_size}")
    if sigma <= 0:
        raise AugmentationError(f"sigma must be positive, got {sigma}")
    x = np.asarray(x, dtype=DTYPE)
    return np.clip(_separable(x, gaussian_kernel1d(kernel_size, sigma)), 0.0, 1.0).astype(DTYPE)


# smoothing filter used for sharpness; border pixels are left untouched
SHARPNESS_KERNEL = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0


def _smooth(x):
    x64 = x.astype(np.float64)
    out = x64.copy()
    h, w = x.shape[1:]
    if h < 3 or w < 3:
        return out
    acc = np.zeros((x.shape[0], h - 2, w - 2))
    for i in range(3):
        for j in range(3):
            acc += SHARPNESS_KERNEL[i, j] * x64[:, i : i + h - 2, j : j + w - 2]
    out[:, 1:-1, 1:-1] = acc
    return out


def apply_sharpness(x, factor: float):
    """Blend between the smoothed image (factor 0) and the input (factor 1); factor > 1 sharpens."""
    x = np.asarray(x, dtype=DTYPE)
    if factor == 1.0:
        return x.copy()
    smooth = _smooth(x)
    return np.clip(smooth + factor * (x - smooth), 0.0, 1.0).astype(DTYPE)


def apply_autocontrast(x):
    """Stretch every channel linearly so its minimum maps to 0 and maximum to 1."""
    x = np.asarray(x, dtype=DTYPE)
    lo = x.min(axis=(1, 2), keepdims=True)
    hi = x.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    flat = span <= 0
    out = np.where(flat, x, (x - lo) / np.where(flat, 1, span))
    return np.clip(out, 0.0, 1.0).astype(DTYPE)


# ---------------------------------------------------------------------------
# sampling functions
# ---------------------------------------------------------------------------


def _draw(name, x, rng, p):
    c, h, w = x.shape
    if name == "random-affine":
        rot = rng.uniform(-p["rotation"], p["rotation"])
        shift = tuple(rng.uniform(-p["translate"], p["translate"], size=2))
        return apply_affine(x, rot, shift, p)
    if name == "color-jitter":
        j = p["jitter"]
        b, con, s = rng.uniform(1 - j, 1 + j, size=3)
        return apply_color_jitter(x, b, con, s, rng.uniform(-j, j), p)
    if name == "random-crop":
        pad = p["pad"]
        off = rng.integers(0, 2 * pad + 1, size=2)
        return apply_crop_pad(x, pad, (int(off[0]), int(off[1])))
    if name == "gaussian-blur":
        return apply_gaussian_blur(x, p["blur_kernel"], p["blur_sigma"])
    if name == "sharpness":
        return apply_sharpness(x, p["sharpness"])
    if name == "autocontrast":
        return apply_autocontrast(x) if rng.random() < p["autocontrast_p"] else x
    raise AugmentationError(f"unknown augmentation {name!r}; expected one of {AUGMENTATIONS}")


@dataclass
class SamplingFunction:
    """Seeded generator of perceptually equivalent variants of an image.

    ``mode`` is ``"S1"`` (one random augmentation from ``augmentations``),
    ``"S2"`` (all of them, in the fixed order of :data:`AUGMENTATIONS`) or
    ``"noise"`` (uniform noise in the L-inf ball of radius ``epsilon``).

    Draw ``i`` uses its own generator seeded with ``(seed, i)``, so the stream
    is a pure function of the seed and can be split across workers freely.
    """

    mode: str = "S2"
    preset: str = "low-res"
    augmentations: tuple = AUGMENTATIONS
    epsilon: float = 0.0
    seed: int = 0
    counter: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.mode not in ("S1", "S2", "noise"):
            raise AugmentationError(f"unknown sampling mode {self.mode!r}")
        self.augmentations = tuple(self.augmentations)
        unknown = set(self.augmentations) - set(AUGMENTATIONS)
        if unknown:
            raise AugmentationError(f"unknown augmentations {sorted(unknown)}")
        if self.mode != "noise" and not self.augmentations:
            raise AugmentationError("augmentation set is empty")
        if self.epsilon < 0:
            raise AugmentationError("epsilon must be non-negative")
        _preset(self.preset)

    def draw(self, x, index: int):
        x = np.asarray(x, dtype=DTYPE)
        rng = np.random.default_rng([self.seed, index])
        p = _preset(self.preset)
        if self.mode == "noise":
            if self.epsilon == 0:
                return x.copy()
            noise = rng.uniform(-self.epsilon, self.epsilon, size=x.shape).astype(DTYPE)
            return np.clip(x + noise, 0.0, 1.0)
        if self.mode == "S1":
            name = self.augmentations[rng.integers(len(self.augmentations))]
            return _draw(name, x, rng, p)
        out = x
        for name in AUGMENTATIONS:
            if name in self.augmentations:
                out = _draw(name, out, rng, p)
        return out

    def draw_many(self, x, n: int, start: int = 0):
        return np.stack([self.draw(x, i) for i in range(start, start + n)])


def sample(s: SamplingFunction, x):
    """Next draw from the sampling function's stream."""
    out = s.draw(x, s.counter)
    s.counter += 1
    return out


class PerceptualDistance(NamedTuple):
    l2: float
    linf: float


def perceptual_distance(a, b) -> PerceptualDistance:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return PerceptualDistance(float(np.sqrt((d**2).sum())), float(np.abs(d).max()) if d.size else 0.0)
