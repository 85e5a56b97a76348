"""Untrained generator that factors a cube into abundances and endmembers.

Each block turns its incoming cube into per-pixel material abundances via a
small CNN (sigmoid head, so every abundance lies strictly inside (0, 1)),
mixes them through a trainable non-negative endmember matrix, and then runs
the mixed cube through a residual nonlinearity.  The block output blends the
purely linear mixture with the nonlinear branch:

    f = (1 - nonlinear_weight) * linear + nonlinear_weight * nonlinear(linear)

Blocks are chained on full-size cubes; the network output is the last block's
cube or the average of the last two.  With nonlinear_weight == 0 a block's
output is exactly the linear mixture, so its band-by-pixel matricization has
rank at most the abundance count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "AbundanceArch",
    "AbundanceNet",
    "NonlinearUnit",
    "DeepBlock",
    "MixtureNet",
    "NetOutputs",
    "endmember_forward",
    "feature_schedule",
    "ARCH_KINDS",
    "OUTPUT_RULES",
]

ARCH_KINDS = ("convolutional", "autoencoder", "resnet")
OUTPUT_RULES = ("last", "average_last_two")
_SLOPE = 0.2  # hidden activation slope, shared by every layer in the package


@dataclass(frozen=True)
class AbundanceArch:
    """Abundance CNN family and size: kind, hidden layer count, base width."""

    kind: str = "convolutional"
    num_layers: int = 6
    features: int = 32

    def __post_init__(self):
        if self.kind not in ARCH_KINDS:
            raise ValueError(f"unknown abundance architecture {self.kind!r}")
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.features < 1:
            raise ValueError(f"features must be >= 1, got {self.features}")
        if self.kind == "autoencoder" and self.num_layers % 2 == 0:
            raise ValueError("autoencoder needs an odd number of hidden layers")


def feature_schedule(arch: AbundanceArch) -> list[int]:
    """Hidden widths per layer: flat, or doubling up then halving back down."""
    if arch.kind != "autoencoder":
        return [arch.features] * arch.num_layers
    half = arch.num_layers // 2
    up = [arch.features * 2**i for i in range(half + 1)]
    return up + up[-2::-1]


class ConvLayer:
    """One trainable conv: odd square kernels, per-channel bias."""

    def __init__(self, rng: np.random.Generator, c_out: int, c_in: int, k: int):
        s = 1.0 / math.sqrt(c_in * k * k)
        self.kernels = Tensor(rng.uniform(-s, s, size=(c_out, c_in, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.kernels, self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.kernels, self.bias]


_EDGE = 1e-12


def _open_interval(a: Tensor) -> Tensor:
    # a saturated logistic rounds to exactly 0.0 or 1.0 in float64, but the
    # abundance contract is the open interval; stored values are nudged off
    # the boundary. Interior values pass through bitwise, and the gradient is
    # the identity (the logistic slope at the boundary is already ~1e-16).
    clipped = np.clip(a.data, _EDGE, 1.0 - _EDGE)

    def backward(g: np.ndarray) -> list[np.ndarray]:
        return [g]

    return ad.custom_op(clipped, [a], backward)


class AbundanceNet:
    """Maps a (bands, H, W) cube to (rank, H, W) abundances in (0, 1)."""

    def __init__(self, rng: np.random.Generator, bands: int, rank: int, arch: AbundanceArch):
        self.arch = arch
        widths = feature_schedule(arch)
        self.hidden: list[ConvLayer] = []
        c_in = bands
        for c_out in widths:
            self.hidden.append(ConvLayer(rng, c_out, c_in, 3))
            c_in = c_out
        self.head = ConvLayer(rng, rank, c_in, 3)
        if rank > 1:
            # start on the sum-to-one simplex (each component near 1/rank);
            # a sum-of-sigmoids far from 1 makes the simplex penalty slam the
            # head through saturation before the fidelity can shape anything
            self.head.bias.data += -math.log(rank - 1.0)

    def forward(self, x: Tensor) -> Tensor:
        first = None
        for i, layer in enumerate(self.hidden):
            x = ad.leaky_relu(layer.forward(x), _SLOPE)
            if i == 0:
                first = x
        if self.arch.kind == "resnet" and len(self.hidden) >= 2:
            x = ad.add(x, first)
        return _open_interval(ad.sigmoid(self.head.forward(x)))

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.hidden + [self.head] for p in layer.parameters()]


def endmember_forward(endmembers: Tensor, abundances: Tensor) -> Tensor:
    """Mix (H, W, rank) abundances through a (bands, rank) endmember matrix.

    Every pixel's spectrum is the same linear combination endmembers @ a, so
    the result is the (H, W, bands) linear-mixture cube.
    """
    if endmembers.ndim != 2:
        raise ad.ShapeError(f"endmembers must be 2-D (bands, rank), got {endmembers.shape}")
    if abundances.ndim != 3 or abundances.shape[2] != endmembers.shape[1]:
        raise ad.ShapeError(
            f"abundances {abundances.shape} do not match endmember rank {endmembers.shape}"
        )
    h, w, rank = abundances.shape
    flat = ad.reshape(abundances, (h * w, rank))
    mixed = ad.matmul(flat, ad.permute(endmembers, (1, 0)))
    return ad.reshape(mixed, (h, w, endmembers.shape[0]))


class NonlinearUnit:
    """Residual unit: 3x3 spatial conv, activation, 1x1 spectral conv, skip."""

    def __init__(self, rng: np.random.Generator, bands: int):
        self.spatial = ConvLayer(rng, bands, bands, 3)
        self.spectral = ConvLayer(rng, bands, bands, 1)

    def forward(self, x: Tensor) -> Tensor:
        return ad.add(x, self.spectral.forward(ad.leaky_relu(self.spatial.forward(x), _SLOPE)))

    def parameters(self) -> list[Tensor]:
        return self.spatial.parameters() + self.spectral.parameters()


class DeepBlock:
    """One abundance -> mixture -> nonlinearity stage."""

    def __init__(
        self,
        rng: np.random.Generator,
        bands: int,
        rank: int,
        arch: AbundanceArch,
        nonlinear_weight: float,
    ):
        if not 0.0 <= nonlinear_weight <= 1.0:
            raise ValueError(f"nonlinear_weight must lie in [0, 1], got {nonlinear_weight}")
        self.nonlinear_weight = float(nonlinear_weight)
        self.abundance = AbundanceNet(rng, bands, rank, arch)
        self.endmembers = Tensor(
            rng.uniform(0.0, 1.0 / math.sqrt(rank), size=(bands, rank)), requires_grad=True
        )
        self.units = [NonlinearUnit(rng, bands), NonlinearUnit(rng, bands)]

    def forward(self, x_chan: Tensor) -> tuple[Tensor, Tensor]:
        """(bands, H, W) in; returns the block cube (same layout) + abundances."""
        abund_chan = self.abundance.forward(x_chan)          # (rank, H, W)
        abund = ad.permute(abund_chan, (1, 2, 0))            # (H, W, rank)
        linear = endmember_forward(self.endmembers, abund)   # (H, W, bands)
        linear_chan = ad.permute(linear, (2, 0, 1))
        lam = self.nonlinear_weight
        if lam == 0.0:
            return linear_chan, abund
        nl = self.units[1].forward(self.units[0].forward(linear_chan))
        out = ad.add(ad.scale(linear_chan, 1.0 - lam), ad.scale(nl, lam))
        return out, abund

    def parameters(self) -> list[Tensor]:
        params = self.abundance.parameters() + [self.endmembers]
        for unit in self.units:
            params += unit.parameters()
        return params


@dataclass
class NetOutputs:
    """Forward results: selected output plus every block's cube and abundances."""

    output: Tensor                   # (H, W, bands)
    block_outputs: list[Tensor]      # each (H, W, bands)
    abundances: list[Tensor]         # each (H, W, rank)


class MixtureNet:
    """A chain of abundance/mixture blocks acting as an untrained prior."""

    def __init__(
        self,
        input_shape: tuple[int, int, int],
        rank: int,
        blocks: int,
        arch: AbundanceArch,
        nonlinear_weight: float,
        output_rule: str,
        rng: np.random.Generator,
    ):
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        if blocks < 1:
            raise ValueError(f"need at least one block, got {blocks}")
        if output_rule not in OUTPUT_RULES:
            raise ValueError(f"unknown output rule {output_rule!r}")
        if output_rule == "average_last_two" and blocks < 2:
            raise ValueError("averaging the last two outputs needs at least two blocks")
        h, w, bands = input_shape
        self.input_shape = (h, w, bands)
        self.rank = rank
        self.output_rule = output_rule
        self.blocks = [
            DeepBlock(rng, bands, rank, arch, nonlinear_weight) for _ in range(blocks)
        ]

    def forward(self, f0: Tensor) -> NetOutputs:
        if f0.shape != self.input_shape:
            raise ad.ShapeError(f"input shape {f0.shape}, expected {self.input_shape}")
        x = ad.permute(f0, (2, 0, 1))
        cubes: list[Tensor] = []
        abundances: list[Tensor] = []
        for block in self.blocks:
            x, abund = block.forward(x)
            cubes.append(ad.permute(x, (1, 2, 0)))
            abundances.append(abund)
        if self.output_rule == "last":
            out = cubes[-1]
        else:
            out = ad.scale(ad.add(cubes[-1], cubes[-2]), 0.5)
        return NetOutputs(output=out, block_outputs=cubes, abundances=abundances)

    def parameters(self) -> list[Tensor]:
        return [p for block in self.blocks for p in block.parameters()]

    def endmember_tensors(self) -> list[Tensor]:
        return [block.endmembers for block in self.blocks]
