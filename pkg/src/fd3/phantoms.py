"""Procedural fundus-like phantoms for desk-scale experiments and tests.

Each phantom has a circular field of view, a warm radial background, an
optic disc, a darker macula and a branching tree of dark vessels.
"""
from __future__ import annotations

import numpy as np

from .degradation import gaussian_blur


def _draw_vessels(mask, rng, start, angle, width, length, depth):
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w]
    y, x = start
    step = max(min(h, w) / 64.0, 0.5)
    for _ in range(int(length / step)):
        angle += rng.normal(0.0, 0.12)
        y += step * np.sin(angle)
        x += step * np.cos(angle)
        if not (0 <= y < h and 0 <= x < w):
            return
        r = width / 2.0
        y0, y1 = int(max(y - r - 1, 0)), int(min(y + r + 2, h))
        x0, x1 = int(max(x - r - 1, 0)), int(min(x + r + 2, w))
        d2 = (yy[y0:y1, x0:x1] - y) ** 2 + (xx[y0:y1, x0:x1] - x) ** 2
        mask[y0:y1, x0:x1] = np.maximum(mask[y0:y1, x0:x1], (d2 <= r * r + 0.25).astype(float))
        if depth > 0 and rng.random() < 0.04:
            _draw_vessels(mask, rng, (y, x), angle + rng.choice([-1, 1]) * rng.uniform(0.4, 0.9),
                          width * 0.7, length * 0.5, depth - 1)
            width *= 0.85


def make_phantom(size: int, rng: np.random.Generator) -> np.ndarray:
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    cy, cx = h / 2 + rng.normal(0, 0.01 * h), w / 2 + rng.normal(0, 0.01 * w)
    rr = np.hypot(yy - cy, xx - cx) / (0.47 * size)
    fov = gaussian_blur((rr <= 1.0).astype(float), 0.004 * size + 0.3)

    base = np.array([0.78, 0.36, 0.16]) * rng.uniform(0.85, 1.1, size=3)
    shade = 1.0 - 0.35 * rr ** 2
    texture = gaussian_blur(rng.normal(0, 1, (h, w)), 0.06 * size)
    texture = 0.06 * texture / (np.abs(texture).max() + 1e-12)
    img = (shade + texture)[..., None] * base

    side = rng.choice([-1, 1])
    dy, dx = cy + rng.normal(0, 0.03 * h), cx + side * rng.uniform(0.22, 0.28) * w
    disc = gaussian_blur((np.hypot(yy - dy, xx - dx) <= 0.075 * size).astype(float), 0.02 * size)
    img += disc[..., None] * np.array([0.22, 0.35, 0.25])

    my, mx = cy + rng.normal(0, 0.02 * h), cx - side * 0.05 * w
    macula = np.exp(-((yy - my) ** 2 + (xx - mx) ** 2) / (2 * (0.07 * size) ** 2))
    img *= 1.0 - 0.3 * macula[..., None]

    vessels = np.zeros((h, w))
    width0 = max(0.025 * size, 1.0)
    for _ in range(rng.integers(4, 7)):
        ang = (np.pi if side > 0 else 0.0) + rng.uniform(-1.3, 1.3)
        _draw_vessels(vessels, rng, (dy, dx), ang, width0 * rng.uniform(0.7, 1.1), 0.8 * size, 2)
    vessels = gaussian_blur(vessels, 0.004 * size + 0.3)
    img *= 1.0 - 0.45 * vessels[..., None] * np.array([0.6, 1.0, 1.0])

    img *= fov[..., None]
    return np.clip(img, 0.0, 1.0)


def make_phantoms(n: int, size: int, seed: int = 0) -> list[np.ndarray]:
    seqs = np.random.SeedSequence(seed).spawn(n)
    return [make_phantom(size, np.random.default_rng(s)) for s in seqs]
