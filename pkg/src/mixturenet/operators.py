"""Linear measurement operators over spectral cubes.

Three sensing schemes share one interface: the identity (denoising), per-band
Gaussian blur followed by decimation (spatial super-resolution), and coded
snapshot acquisition in two flavors (an in-place coded multiplex summed over
bands, and a shifting variant that shears each band before integrating).
``apply`` builds graph nodes so losses can differentiate through the
measurement; ``adjoint`` is a plain array computation satisfying
<apply(f), y> == <f, adjoint(y)> exactly.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "ForwardModel",
    "IdentityModel",
    "BlurDownsampleModel",
    "CodedSnapshotModel",
    "make_forward_model",
    "make_gaussian_kernel",
    "make_coded_aperture",
    "add_gaussian_noise",
]


def make_gaussian_kernel(factor: int) -> np.ndarray:
    """Normalized (2*factor+1) square Gaussian with sigma = factor / 2."""
    if factor < 1:
        raise ValueError(f"decimation factor must be >= 1, got {factor}")
    sigma = factor / 2.0
    offsets = np.arange(-factor, factor + 1, dtype=np.float64)
    prof = np.exp(-(offsets**2) / (2.0 * sigma**2))
    kernel = np.outer(prof, prof)
    return kernel / kernel.sum()


def make_coded_aperture(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """A 0/1 mask with each cell open independently with probability one half."""
    return (rng.random(shape) < 0.5).astype(np.float64)


def add_gaussian_noise(y: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"noise level must be non-negative, got {sigma}")
    return y + sigma * rng.standard_normal(y.shape)


def _band_correlate(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded same-size cross-correlation of each band with ``kernel``."""
    k = kernel.shape[0]
    p = (k - 1) // 2
    padded = np.pad(x, ((p, p), (p, p), (0, 0)))
    windows = sliding_window_view(padded, (k, k), axis=(0, 1))
    return np.tensordot(windows, kernel, axes=([3, 4], [0, 1]))


class ForwardModel:
    """Shared interface: shapes, graph-aware apply, exact adjoint."""

    kind: str
    input_shape: tuple[int, int, int]
    output_shape: tuple[int, ...]

    def apply(self, f: Tensor) -> Tensor:
        raise NotImplementedError

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply_array(self, f: np.ndarray) -> np.ndarray:
        return self.apply(Tensor(f)).data

    def _check_input(self, f: Tensor) -> None:
        if f.shape != self.input_shape:
            raise ad.ShapeError(f"{self.kind}: scene shape {f.shape}, expected {self.input_shape}")

    def _check_output(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != self.output_shape:
            raise ad.ShapeError(
                f"{self.kind}: measurement shape {y.shape}, expected {self.output_shape}"
            )
        return y


class IdentityModel(ForwardModel):
    kind = "identity"

    def __init__(self, input_shape: tuple[int, int, int]):
        self.input_shape = tuple(input_shape)
        self.output_shape = self.input_shape

    def apply(self, f: Tensor) -> Tensor:
        self._check_input(f)
        return f

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        return self._check_output(y).copy()


class BlurDownsampleModel(ForwardModel):
    """Per-band Gaussian blur then keep every ``factor``-th row and column."""

    kind = "blur_downsample"

    def __init__(self, input_shape: tuple[int, int, int], factor: int):
        h, w, bands = input_shape
        self.input_shape = (h, w, bands)
        self.factor = int(factor)
        self.kernel = make_gaussian_kernel(self.factor)
        self.output_shape = (len(range(0, h, self.factor)), len(range(0, w, self.factor)), bands)

    def apply(self, f: Tensor) -> Tensor:
        self._check_input(f)
        d = self.factor
        kernel = self.kernel
        flipped = kernel[::-1, ::-1]
        full_shape = self.input_shape

        blurred = ad.custom_op(
            _band_correlate(f.data, kernel),
            (f,),
            lambda g: (_band_correlate(g, flipped),),
        )

        def down_bwd(g: np.ndarray):
            up = np.zeros(full_shape)
            up[::d, ::d, :] = g
            return (up,)

        return ad.custom_op(blurred.data[::d, ::d, :], (blurred,), down_bwd)

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        y = self._check_output(y)
        up = np.zeros(self.input_shape)
        up[:: self.factor, :: self.factor, :] = y
        return _band_correlate(up, self.kernel[::-1, ::-1])


class CodedSnapshotModel(ForwardModel):
    """Coded-aperture snapshot sensing, multiplexing all bands into one frame.

    variant "dd": band ``l`` of the scene is weighted by the code shifted
    cyclically by ``l`` columns and the result summed over bands, so the frame
    keeps the scene's width.  variant "sd": every band is weighted by the
    code in place, then sheared one column per band before integration, so the
    frame is wider by bands - 1 columns.
    """

    def __init__(self, input_shape: tuple[int, int, int], code: np.ndarray, variant: str = "dd"):
        h, w, bands = input_shape
        code = np.asarray(code, dtype=np.float64)
        if code.shape != (h, w):
            raise ValueError(f"code shape {code.shape} does not match scene plane {(h, w)}")
        if variant not in ("dd", "sd"):
            raise ValueError(f"unknown snapshot variant {variant!r}")
        self.kind = f"cassi_{variant}"
        self.variant = variant
        self.input_shape = (h, w, bands)
        self.code = code
        if variant == "dd":
            self.output_shape = (h, w)
            # mask[i, j, l] = code[i, (j + l) mod w]
            self._mask = np.stack([np.roll(code, -l, axis=1) for l in range(bands)], axis=2)
        else:
            self.output_shape = (h, w + bands - 1)

    def apply(self, f: Tensor) -> Tensor:
        self._check_input(f)
        if self.variant == "dd":
            return ad.sum_axis(ad.mul(f, Tensor(self._mask)), 2)
        code = self.code
        h, w, bands = self.input_shape

        def shear_bwd(g: np.ndarray):
            df = np.empty((h, w, bands))
            for l in range(bands):
                df[:, :, l] = code * g[:, l : l + w]
            return (df,)

        out = np.zeros(self.output_shape)
        for l in range(bands):
            out[:, l : l + w] += code * f.data[:, :, l]
        return ad.custom_op(out, (f,), shear_bwd)

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        y = self._check_output(y)
        if self.variant == "dd":
            return self._mask * y[:, :, None]
        h, w, bands = self.input_shape
        back = np.empty(self.input_shape)
        for l in range(bands):
            back[:, :, l] = self.code * y[:, l : l + w]
        return back


def make_forward_model(
    kind: str,
    input_shape: tuple[int, int, int],
    factor: int | None = None,
    code: np.ndarray | None = None,
    variant: str = "dd",
) -> ForwardModel:
    if kind == "identity":
        return IdentityModel(input_shape)
    if kind == "blur_downsample":
        if factor is None:
            raise ValueError("blur_downsample needs a decimation factor")
        return BlurDownsampleModel(input_shape, factor)
    if kind == "cassi":
        if code is None:
            raise ValueError("coded snapshot sensing needs a coded aperture")
        return CodedSnapshotModel(input_shape, code, variant)
    raise ValueError(f"unknown forward model kind {kind!r}")
