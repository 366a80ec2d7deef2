"""Procedural segmentation scenes with long-tailed classes and photometric shift.

Class 0 is background. Foreground shapes are painted in random order until
the covered area reaches ``1 - freq[0]``; each shape's class is drawn from
the foreground part of the frequency profile independently of its geometry,
so the expected pixel share of every class follows the profile.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
import json
import os

import numpy as np

from .errors import ConfigError

SHAPES = ("rect", "disc", "stripe")

# class colours in RGB; background first
_PALETTE = np.array([
    [0.45, 0.45, 0.45],
    [0.20, 0.55, 0.20],
    [0.75, 0.25, 0.20],
    [0.20, 0.30, 0.75],
    [0.85, 0.75, 0.20],
    [0.60, 0.25, 0.65],
    [0.20, 0.70, 0.70],
    [0.90, 0.55, 0.30],
])


def geometric_profile(num_classes, ratio=0.5):
    w = ratio ** np.arange(num_classes)
    return (w / w.sum()).tolist()


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    num_classes: int = 6
    freq: list | None = None
    ratio: float = 0.5
    shape_area: float = 0.045  # mean shape area as a fraction of the image
    texture: float = 0.06
    jitter: float = 0.04
    background: int = 0

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(_PALETTE):
            raise ConfigError(f"num_classes must be in [2, {len(_PALETTE)}]")
        if self.freq is None:
            self.freq = geometric_profile(self.num_classes, self.ratio)
        f = np.asarray(self.freq, dtype=np.float64)
        if f.shape != (self.num_classes,) or np.any(f <= 0) or abs(f.sum() - 1) > 1e-9:
            raise ConfigError("freq must be a positive profile over num_classes summing to 1")
        if self.background != 0:
            raise ConfigError("background class must be 0")
        if self.height < 4 or self.width < 4:
            raise ConfigError("image must be at least 4x4")

    def shape_kind(self, cls):
        return SHAPES[(cls - 1) % len(SHAPES)]


@dataclass
class ShiftSpec:
    """Photometric corruption; all-zero magnitudes reproduce the source domain."""

    label: str = "source"
    brightness: float = 0.0  # additive offset
    contrast: float = 0.0  # scale = 1 + contrast, about the image mean
    noise: float = 0.0  # Gaussian sigma
    hue: float = 0.0  # rotation about the grey axis, radians
    gamma: float = 0.0  # exponent = exp(gamma)

    def __post_init__(self):
        if self.noise < 0:
            raise ConfigError("noise sigma must be >= 0")
        if self.contrast <= -1:
            raise ConfigError("contrast must be > -1")

    @property
    def is_identity(self):
        return not any((self.brightness, self.contrast, self.noise, self.hue, self.gamma))


CONDITIONS = {
    "fog": ShiftSpec("fog", brightness=0.25, contrast=-0.55, noise=0.02),
    "night": ShiftSpec("night", brightness=-0.2, gamma=0.6, noise=0.05),
    "rain": ShiftSpec("rain", contrast=-0.3, noise=0.1, hue=0.35),
    "snow": ShiftSpec("snow", brightness=0.2, noise=0.08, hue=-0.4, gamma=-0.3),
}


def _hue_matrix(theta):
    c, s = np.cos(theta), np.sin(theta)
    k = np.full((3, 3), 1.0 / 3.0)
    cross = np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]]) / np.sqrt(3.0)
    return c * np.eye(3) + (1 - c) * k + s * cross


def _paint_shape(label, kind, cls, rng, area):
    h, w = label.shape
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    if kind == "rect":
        aspect = rng.uniform(0.5, 2.0)
        rh = np.sqrt(area * aspect)
        rw = area / rh
        mask = (np.abs(yy - cy) <= rh / 2) & (np.abs(xx - cx) <= rw / 2)
    elif kind == "disc":
        r = np.sqrt(area / np.pi)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    else:
        thick = rng.uniform(4.0, 6.0)
        length = area / thick
        ang = rng.uniform(0, np.pi)
        u = (yy - cy) * np.cos(ang) + (xx - cx) * np.sin(ang)
        v = -(yy - cy) * np.sin(ang) + (xx - cx) * np.cos(ang)
        mask = (np.abs(u) <= length / 2) & (np.abs(v) <= thick / 2)
    label[mask] = cls
    return mask


def _scene(spec: SceneSpec, rng):
    h, w = spec.height, spec.width
    label = np.zeros((h, w), dtype=np.int64)
    covered = np.zeros((h, w), dtype=bool)
    fg = np.asarray(spec.freq[1:], dtype=np.float64)
    fg = fg / fg.sum()
    target = 1.0 - spec.freq[0]
    mean_area = spec.shape_area * h * w
    for _ in range(1000):
        if covered.mean() >= target:
            break
        cls = 1 + int(rng.choice(len(fg), p=fg))
        area = mean_area * rng.uniform(0.5, 1.5)
        covered |= _paint_shape(label, spec.shape_kind(cls), cls, rng, area)

    yy, xx = np.mgrid[0:h, 0:w]
    image = np.empty((h, w, 3))
    colours = _PALETTE[: spec.num_classes] + rng.normal(0, spec.jitter, (spec.num_classes, 3))
    for c in range(spec.num_classes):
        # oriented sinusoidal texture, class-specific frequency
        freq = 0.35 + 0.22 * c
        ang = 0.7 * c
        tex = spec.texture * np.sin(freq * (xx * np.cos(ang) + yy * np.sin(ang)) + rng.uniform(0, 2 * np.pi))
        m = label == c
        image[m] = colours[c] + tex[m][:, None]
    return np.clip(image, 0.0, 1.0), label


def apply_shift(image, shift: ShiftSpec, rng):
    if shift.is_identity:
        return image
    x = image
    if shift.contrast:
        m = x.mean(axis=(0, 1), keepdims=True)
        x = (x - m) * (1.0 + shift.contrast) + m
    if shift.brightness:
        x = x + shift.brightness
    if shift.gamma:
        x = np.clip(x, 0.0, 1.0) ** np.exp(shift.gamma)
    if shift.hue:
        x = x @ _hue_matrix(shift.hue).T
    if shift.noise:
        x = x + rng.normal(0.0, shift.noise, x.shape)
    return np.clip(x, 0.0, 1.0)


def generate(spec: SceneSpec, shift: ShiftSpec | None, n, seed):
    """``n`` deterministic ``(image HxWx3, label HxW)`` pairs.

    Scene geometry and source appearance depend only on ``(spec, seed, index)``;
    the shift draws its noise from a separate stream, so labels are identical
    across shifts.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    shift = shift or ShiftSpec()
    key = [int(s) for s in np.atleast_1d(seed)]
    out = []
    for i in range(n):
        scene_rng = np.random.default_rng([*key, i, 0])
        image, label = _scene(spec, scene_rng)
        noise_rng = np.random.default_rng([*key, i, 1])
        out.append((apply_shift(image, shift, noise_rng), label))
    return out


def hflip(x):
    """Mirror an H x W (x ...) array along its width axis."""
    return np.ascontiguousarray(np.asarray(x)[:, ::-1])


# -- on-disk cache ------------------------------------------------------------

def save_cache(samples, directory, spec: SceneSpec, shift: ShiftSpec, seed):
    """Write images as flat little-endian float64 files plus ``index.json``."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, (img, lab) in enumerate(samples):
        name = f"{i:05d}"
        np.ascontiguousarray(img, dtype="<f8").tofile(os.path.join(directory, name + ".img.f64"))
        np.ascontiguousarray(lab, dtype="<f8").tofile(os.path.join(directory, name + ".lab.f64"))
        entries.append({"name": name, "shape": list(img.shape)})
    index = {"scene": asdict(spec), "shift": asdict(shift), "seed": seed, "items": entries}
    with open(os.path.join(directory, "index.json"), "w") as fh:
        json.dump(index, fh, sort_keys=True, indent=1)


def load_cache(directory):
    with open(os.path.join(directory, "index.json")) as fh:
        index = json.load(fh)
    out = []
    for e in index["items"]:
        shape = tuple(e["shape"])
        img = np.fromfile(os.path.join(directory, e["name"] + ".img.f64"), dtype="<f8").reshape(shape)
        lab = np.fromfile(os.path.join(directory, e["name"] + ".lab.f64"), dtype="<f8")
        out.append((img.astype(np.float64), lab.reshape(shape[:2]).astype(np.int64)))
    return index, out
