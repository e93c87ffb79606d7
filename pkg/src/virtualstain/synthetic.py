"""Synthetic registration problems with known answers."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .registration import AffineTransform, _grid, sample


def textured_image(size: int = 256, sigma: float = 2.0, seed: int = 0) -> np.ndarray:
    """Smoothed white noise, rescaled to [0, 1]."""
    tex = ndimage.gaussian_filter(np.random.default_rng(seed).standard_normal((size, size)), sigma)
    return (tex - tex.min()) / (tex.max() - tex.min())


def sinusoidal_field(shape, amplitude: float = 3.0, periods=(128.0, 160.0)) -> np.ndarray:
    """``v(p) = (A sin(2 pi x / Px), A cos(2 pi y / Py))`` on an ``(h, w, 2)`` grid."""
    g = _grid(shape)
    return np.stack(
        [amplitude * np.sin(2 * np.pi * g[..., 1] / periods[0]), amplitude * np.cos(2 * np.pi * g[..., 0] / periods[1])],
        axis=-1,
    )


def apply_field(img: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``img(p + v(p))``."""
    return sample(img, _grid(v.shape[:2]) + v)


def inverse_field(v: np.ndarray, iterations: int = 40) -> np.ndarray:
    """``u`` with ``u(p) = -v(p + u(p))``, so that ``(img o (id + v)) o (id + u) = img``."""
    g = _grid(v.shape[:2])
    u = -v.copy()
    for _ in range(iterations):
        u = -sample(v, g + u)
    return u


def affine_pair(img: np.ndarray, angle_deg=3.0, scale=1.02, shift=(4.0, -2.0)):
    """``(moving, T)`` such that ``moving(T(p)) = img(p)``."""
    c = ((img.shape[0] - 1) / 2.0, (img.shape[1] - 1) / 2.0)
    t = AffineTransform.about_center(c, angle_deg, scale, shift)
    return sample(img, t.inverse().apply(_grid(img.shape[:2]))), t


def composite_pair(img: np.ndarray, affine: AffineTransform, v: np.ndarray, iterations: int = 30):
    """Resample ``img`` so that reading it at ``affine(p + v(p))`` gives back ``img(p)``."""
    g = _grid(img.shape[:2])
    inv = affine.inverse()
    q = inv.apply(g)
    p = q
    for _ in range(iterations):
        p = q - sample(v, p)
    return sample(img, p)
