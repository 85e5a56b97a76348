"""Synthetic low-rank scenes with known abundances and endmembers.

Scenes follow the linear mixing construction exactly: a handful of smooth
positive spectra mixed per pixel by abundance maps that sum to one.  Spectra
are sums of two or three Gaussian bumps along the band axis, peak-normalized,
with each component's main bump placed in its own segment of the axis so the
materials stay distinguishable.  Abundance maps come from softmaxed smooth
random fields, giving every component a dominant region.  The finished cube
is rescaled to peak 1 (the returned endmembers absorb the same factor, so
cube == mix(endmembers, abundances) holds to rounding).
"""

from __future__ import annotations

import numpy as np

from .rng import stream

__all__ = ["make_synthetic"]

_COARSE_DIV = 8    # control grid scales with scene size (one knot per 8 px)
_COARSE_MIN = 4
_SHARPNESS = 6.0   # softmax temperature: higher -> purer dominant regions


def _bilinear(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    gh, gw = grid.shape
    rows = np.empty((h, gw))
    coords_r = np.linspace(0.0, gh - 1.0, h)
    for j in range(gw):
        rows[:, j] = np.interp(coords_r, np.arange(gh), grid[:, j])
    out = np.empty((h, w))
    coords_c = np.linspace(0.0, gw - 1.0, w)
    for i in range(h):
        out[i] = np.interp(coords_c, np.arange(gw), rows[i])
    return out


def _smooth_spectra(bands: int, rank: int, rng: np.random.Generator) -> np.ndarray:
    axis = np.arange(bands, dtype=np.float64)
    spectra = np.empty((bands, rank))
    seg = bands / rank
    for c in range(rank):
        bumps = int(rng.integers(2, 4))  # 2 or 3
        # the first bump anchors this component inside its own band segment
        centers = [rng.uniform(c * seg, (c + 1) * seg) - 0.5]
        centers += list(rng.uniform(0, bands - 1, size=bumps - 1))
        curve = np.zeros(bands)
        for center in centers:
            width = rng.uniform(max(bands / 10.0, 0.75), max(bands / 4.0, 1.5))
            amp = rng.uniform(0.5, 1.0)
            curve += amp * np.exp(-((axis - center) ** 2) / (2.0 * width**2))
        spectra[:, c] = curve / curve.max()
    return spectra


def make_synthetic(
    height: int, width: int, bands: int, rank: int, seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Build (cube, abundances, endmembers) for a rank-component scene.

    Returns:
        cube: (height, width, bands) in [0, 1] with peak exactly 1.
        abundances: (height, width, rank), strictly positive, pixel sums 1.
        endmembers: (bands, rank), non-negative, cube == per-pixel mixture.
    """
    if min(height, width, bands, rank) < 1:
        raise ValueError("all dimensions must be positive")
    if rank > bands:
        raise ValueError(f"rank {rank} cannot exceed band count {bands}")
    e_rng = stream(seed, "synthetic-endmembers")
    a_rng = stream(seed, "synthetic-abundances")

    endmembers = _smooth_spectra(bands, rank, e_rng)

    grid_h = max(_COARSE_MIN, height // _COARSE_DIV)
    grid_w = max(_COARSE_MIN, width // _COARSE_DIV)
    fields = np.stack(
        [_bilinear(a_rng.standard_normal((grid_h, grid_w)), height, width) for _ in range(rank)],
        axis=2,
    )
    logits = _SHARPNESS * fields
    logits -= logits.max(axis=2, keepdims=True)
    expo = np.exp(logits)
    abundances = expo / expo.sum(axis=2, keepdims=True)

    cube = abundances @ endmembers.T  # (H, W, bands)
    peak = cube.max()
    if peak > 0:
        cube = cube / peak
        endmembers = endmembers / peak
    return cube, abundances, endmembers
