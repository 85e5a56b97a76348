"""Network input construction: fixed strategies and the learned low-rank input.

The learned strategy keeps the input as a small core tensor plus one factor
matrix per axis; composing them yields the full-size cube, so the number of
trainable input values stays far below height*width*bands.  Fixed strategies
return constants: a flat 0.5 cube, standard normal noise, cyclically tiled
coordinate ramps, or the adjoint of the measurements.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["TuckerInput", "tucker_compose", "fixed_input", "perturb_input", "FIXED_STRATEGIES"]

FIXED_STRATEGIES = ("constant", "random", "meshgrid", "estimated")


class TuckerInput:
    """Trainable core-and-factors parameterization of the network input.

    For a target (height, width, bands) cube and ratio in (0, 1], the core has
    shape (n, n, m) with n = ceil(ratio * min(height, width)) and
    m = ceil(ratio * bands); the three factors map each core axis up to the
    full axis length.  All four tensors require gradients.
    """

    def __init__(self, shape: tuple[int, int, int], ratio: float, rng: np.random.Generator):
        if not 0.0 < ratio <= 1.0:
            raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
        h, w, bands = shape
        n = math.ceil(ratio * min(h, w))
        m = math.ceil(ratio * bands)
        self.shape = (h, w, bands)
        self.core = Tensor(rng.uniform(-1.0, 1.0, size=(n, n, m)), requires_grad=True)
        self.row_factor = Tensor(_factor_init(rng, h, n), requires_grad=True)
        self.col_factor = Tensor(_factor_init(rng, w, n), requires_grad=True)
        self.band_factor = Tensor(_factor_init(rng, bands, m), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.core, self.row_factor, self.col_factor, self.band_factor]


def _factor_init(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    s = 1.0 / math.sqrt(cols)
    return rng.uniform(-s, s, size=(rows, cols))


def _mode_product(t: Tensor, factor: Tensor, mode: int) -> Tensor:
    """Contract axis ``mode`` of a 3-D tensor with rows of ``factor``."""
    axes = (mode,) + tuple(i for i in range(3) if i != mode)
    front = ad.permute(t, axes)
    rest = front.shape[1:]
    flat = ad.reshape(front, (front.shape[0], rest[0] * rest[1]))
    mixed = ad.matmul(factor, flat)
    cube = ad.reshape(mixed, (factor.shape[0],) + rest)
    inverse = tuple(int(i) for i in np.argsort(axes))
    return ad.permute(cube, inverse)


def tucker_compose(tin: TuckerInput) -> Tensor:
    """Expand core and factors into the full (height, width, bands) input."""
    out = _mode_product(tin.core, tin.row_factor, 0)
    out = _mode_product(out, tin.col_factor, 1)
    return _mode_product(out, tin.band_factor, 2)


def fixed_input(
    strategy: str,
    shape: tuple[int, int, int],
    rng: np.random.Generator | None = None,
    model=None,
    measurement: np.ndarray | None = None,
) -> Tensor:
    """A constant (non-trainable) network input of the requested kind."""
    h, w, bands = shape
    if strategy == "constant":
        return Tensor(np.full(shape, 0.5))
    if strategy == "random":
        if rng is None:
            raise ValueError("random input needs a random stream")
        return Tensor(rng.standard_normal(shape))
    if strategy == "meshgrid":
        rows = np.arange(h, dtype=np.float64) / max(h - 1, 1)
        cols = np.arange(w, dtype=np.float64) / max(w - 1, 1)
        row_plane = np.repeat(rows[:, None], w, axis=1)
        col_plane = np.repeat(cols[None, :], h, axis=0)
        planes = np.stack([row_plane, col_plane], axis=2)
        return Tensor(planes[:, :, np.arange(bands) % 2])
    if strategy == "estimated":
        if model is None or measurement is None:
            raise ValueError("estimated input needs a forward model and its measurement")
        back = model.adjoint(measurement)
        if back.shape != shape:
            raise ValueError(f"adjoint shape {back.shape} does not match input shape {shape}")
        return Tensor(back)
    raise ValueError(f"unknown input strategy {strategy!r}")


def perturb_input(z: Tensor, level: float, rng: np.random.Generator) -> Tensor:
    """z plus fresh white noise of the given level; z itself is untouched."""
    if level < 0:
        raise ValueError(f"perturbation level must be non-negative, got {level}")
    if level == 0.0:
        return z
    return ad.add(z, Tensor(level * rng.standard_normal(z.shape)))
