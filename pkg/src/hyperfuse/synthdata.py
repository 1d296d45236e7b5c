"""Synthetic multi-view scenes and a fixed linear latent encoder.

Scenes are single saturated-colour primitives on a pure white background,
rendered from a ``front`` (side silhouette) and an ``up`` (top profile) view
without antialiasing, so the rasterizer's coverage map is known exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IndivisibleShape, ShapeMismatch
from .tensor_core import as_tensor

PRIMITIVES = ("disk", "hexagon", "rectangle", "ring")
VIEWS = ("front", "up")
LATENT_CHANNELS = 4


@dataclass(frozen=True)
class SceneSpec:
    primitive: str
    color: tuple[float, float, float]
    size: float
    category_label: str

    def __post_init__(self):
        if self.primitive not in PRIMITIVES:
            raise ValueError(f"unknown primitive {self.primitive!r}")
        if not 0.0 < self.size <= 1.0:
            raise ValueError("size must lie in (0, 1]")
        if len(self.color) != 3 or any(not 0.0 <= c <= 1.0 for c in self.color):
            raise ValueError("color channels must lie in [0, 1]")


SCENES = {
    "screw": SceneSpec("disk", (0.15, 0.35, 0.85), 0.5, "screw"),
    "nut": SceneSpec("hexagon", (0.85, 0.55, 0.1), 0.6, "nut"),
    "gasket": SceneSpec("ring", (0.1, 0.7, 0.3), 0.7, "gasket"),
    "resistor": SceneSpec("rectangle", (0.8, 0.2, 0.2), 0.6, "resistor"),
    "bearing": SceneSpec("ring", (0.5, 0.2, 0.8), 0.8, "bearing"),
    "led": SceneSpec("disk", (0.9, 0.1, 0.1), 0.35, "led"),
}


def _grid(resolution, center):
    c = (resolution - 1) / 2.0
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    return yy - (c + center[0]), xx - (c + center[1])


def _hexagon(y, x, radius):
    # flat-top regular hexagon with circumradius ``radius``
    ay, ax = np.abs(y), np.abs(x)
    h = radius * np.sqrt(3.0) / 2.0
    return (ay <= h) & (np.sqrt(3.0) * ax + ay <= np.sqrt(3.0) * radius)


def coverage(scene: SceneSpec, view: str, resolution: int, center=(0.0, 0.0)) -> np.ndarray:
    """Boolean foreground map the rasterizer paints for one view."""
    if view not in VIEWS:
        raise ValueError(f"unknown view {view!r}")
    y, x = _grid(resolution, center)
    half = scene.size * resolution / 2.0
    p = scene.primitive
    if view == "up":
        if p == "disk":
            cov = y * y + x * x <= half * half
            if scene.category_label == "screw":
                slot = (np.abs(y) <= max(1.0, 0.12 * half)) & (np.abs(x) <= 0.7 * half)
                cov &= ~slot
        elif p == "hexagon":
            cov = _hexagon(y, x, half)
        elif p == "rectangle":
            cov = (np.abs(y) <= 0.4 * half) & (np.abs(x) <= half)
        else:
            r2 = y * y + x * x
            cov = (r2 <= half * half) & (r2 >= (0.55 * half) ** 2)
        return cov
    # front view: side silhouette
    if p == "disk":
        head = (y >= -half) & (y <= -0.6 * half) & (np.abs(x) <= half)
        shaft = (y > -0.6 * half) & (y <= half) & (np.abs(x) <= 0.35 * half)
        cov = head | shaft
    elif p == "hexagon":
        cov = (np.abs(y) <= 0.35 * half) & (np.abs(x) <= half)
    elif p == "rectangle":
        cov = (np.abs(y) <= 0.4 * half) & (np.abs(x) <= half)
    else:
        cov = (np.abs(y) <= max(1.0, 0.12 * half)) & (np.abs(x) <= half)
    return cov


def render_views(scene: SceneSpec, views=VIEWS, resolution: int = 64, seed: int = 0, jitter: float = 0.0):
    """Rasterize ``scene`` once per view into (resolution, resolution, 3) float images.

    ``jitter`` > 0 shifts the primitive centre by a seeded offset of at most
    ``jitter`` pixels; the default renders every view centred.
    """
    rng = np.random.default_rng(seed)
    images = []
    for view in views:
        center = tuple(rng.uniform(-jitter, jitter, size=2)) if jitter > 0 else (0.0, 0.0)
        cov = coverage(scene, view, resolution, center)
        img = np.ones((resolution, resolution, 3))
        img[cov] = scene.color
        images.append(img)
    return images


@dataclass(frozen=True)
class ToyEncoder:
    """Fixed linear patch encoder: each p x p x 3 patch maps to ``channels`` values."""

    patch: int
    projection: np.ndarray

    @property
    def channels(self) -> int:
        return self.projection.shape[1]


def make_encoder(patch: int = 8, channels: int = LATENT_CHANNELS, seed: int = 0) -> ToyEncoder:
    """Seeded projection whose row space holds the per-channel patch means.

    With ``channels >= 3`` a flat-coloured patch survives encode/decode
    exactly, so masks computed on decoded images stay meaningful. Remaining
    directions are seeded random, and a seeded rotation mixes all of them.
    """
    rng = np.random.default_rng(seed)
    d = patch * patch * 3
    cols = []
    for ch in range(min(3, channels)):
        v = np.zeros((patch, patch, 3))
        v[..., ch] = 1.0
        cols.append(v.ravel())
    cols.extend(rng.standard_normal(d) for _ in range(channels - len(cols)))
    basis, _ = np.linalg.qr(np.stack(cols, axis=1))
    rot, _ = np.linalg.qr(rng.standard_normal((channels, channels)))
    proj = basis @ rot * np.sqrt(channels)
    proj.flags.writeable = False
    return ToyEncoder(patch, proj)


def _check_divisible(h, w, p):
    if h % p or w % p:
        raise IndivisibleShape(f"image {h}x{w} is not divisible by patch size {p}")


def toy_encode(image, enc: ToyEncoder) -> np.ndarray:
    x = as_tensor(image)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ShapeMismatch(f"expected an RGB image, got shape {x.shape}")
    h, w, _ = x.shape
    p = enc.patch
    _check_divisible(h, w, p)
    patches = x.reshape(h // p, p, w // p, p, 3).transpose(0, 2, 1, 3, 4)
    return patches.reshape(h // p, w // p, p * p * 3) @ enc.projection


def toy_decode(latent, enc: ToyEncoder) -> np.ndarray:
    """Least-squares reconstruction through the projection's pseudo-inverse."""
    z = as_tensor(latent)
    if z.ndim != 3 or z.shape[2] != enc.channels:
        raise ShapeMismatch(f"latent {z.shape} does not match encoder with {enc.channels} channels")
    hl, wl, _ = z.shape
    p = enc.patch
    flat = z @ np.linalg.pinv(enc.projection)
    patches = flat.reshape(hl, wl, p, p, 3).transpose(0, 2, 1, 3, 4)
    return patches.reshape(hl * p, wl * p, 3)


def psnr(a, b, peak: float = 1.0) -> float:
    mse = float(np.mean((as_tensor(a) - as_tensor(b)) ** 2))
    return float("inf") if mse == 0.0 else 10.0 * np.log10(peak * peak / mse)


def encode_views(images, enc: ToyEncoder) -> np.ndarray:
    """Stack of latents, shape (N, H, W, C)."""
    return np.stack([toy_encode(img, enc) for img in images])


def perturb(latents, kind: str, magnitude: float, seed: int = 0) -> np.ndarray:
    """Seeded perturbation of an (N, H, W, C) latent stack.

    ``gaussian`` adds i.i.d. noise of standard deviation ``magnitude``;
    ``single-view-shift`` adds a constant channel offset of norm ``magnitude``
    to one seeded view; ``channel-scale`` multiplies each channel by
    ``1 + magnitude * g`` with one standard normal ``g`` per channel.
    """
    z = as_tensor(latents)
    if magnitude < 0:
        raise ValueError("magnitude must be >= 0")
    if magnitude == 0:
        return z.copy()
    rng = np.random.default_rng(seed)
    if kind == "gaussian":
        return z + magnitude * rng.standard_normal(z.shape)
    if kind == "single-view-shift":
        out = z.copy()
        view = int(rng.integers(z.shape[0]))
        direction = rng.standard_normal(z.shape[-1])
        out[view] += magnitude * direction / np.linalg.norm(direction)
        return out
    if kind == "channel-scale":
        return z * (1.0 + magnitude * rng.standard_normal(z.shape[-1]))
    raise ValueError(f"unknown perturbation kind {kind!r}")
