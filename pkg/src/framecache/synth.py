"""Seeded synthetic frame sequences for tests and the CLI.

Each sequence is a smooth sinusoid-mixture texture under global toroidal
translation, optionally with per-pixel noise and a small square moving on
its own path (local motion that the global estimate cannot capture).

Smoothness matters: block matching on pure white noise has no similarity
gradient for a diamond search to descend, so textures here mix a handful
of low-frequency gratings whose block-difference surface is a clean basin
around the true offset.  Frequencies are drawn to avoid short periods, so
the true offset is the unique zero-error match within a small window.
"""

from __future__ import annotations

import numpy as np

from .core import Frame


def _texture(rng: np.random.Generator, channels: int, height: int, width: int) -> np.ndarray:
    """Smooth per-channel texture in [25, 230], float64 (C, H, W)."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    out = np.zeros((channels, height, width), dtype=np.float64)
    for c in range(channels):
        acc = np.zeros((height, width), dtype=np.float64)
        for _ in range(3):
            # periods 18..44 px, random orientation and phase
            period = rng.uniform(18.0, 44.0)
            theta = rng.uniform(0.0, np.pi)
            phase = rng.uniform(0.0, 2 * np.pi)
            amp = rng.uniform(0.6, 1.0)
            fx = np.cos(theta) / period
            fy = np.sin(theta) / period
            acc += amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        lo, hi = acc.min(), acc.max()
        out[c] = 25.0 + (acc - lo) * (205.0 / max(hi - lo, 1e-9))
    return out


def synth_sequence(count: int, width: int, height: int, channels: int = 3,
                   dx: int = 2, dy: int = 0, noise: float = 0.0,
                   seed: int = 0, square: bool = False) -> list[Frame]:
    """Generate `count` frames of a translating texture.

    Frame t is the base texture rolled by (t*dx, t*dy) pixels (toroidal
    wrap), so between consecutive frames content at (x, y) comes from
    (x - dx, y - dy).  noise is a uniform amplitude as a fraction of 255,
    drawn independently per frame; a prefix of a longer sequence with the
    same seed is identical to a shorter one.  square overlays a bright
    square on an independent diagonal path.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    base = _texture(rng, channels, height, width)
    sq = max(8, min(width, height) // 8)
    frames = []
    for t in range(count):
        img = np.roll(base, shift=(t * dy, t * dx), axis=(1, 2))
        if square:
            sx = (width // 4 + 3 * t) % max(1, width - sq)
            sy = (height // 3 + 2 * t) % max(1, height - sq)
            img = img.copy()
            img[:, sy:sy + sq, sx:sx + sq] = 240.0
        if noise > 0.0:
            img = img + rng.uniform(-noise * 255.0, noise * 255.0, size=img.shape)
        frames.append(Frame(np.clip(np.rint(img), 0, 255).astype(np.uint8)))
    return frames
