"""Fitting objectives for measurement-consistent recovery.

Two fidelities are available: a plain squared residual, and an unbiased
risk-style objective for denoising that trades data fit against the
sensitivity of the reconstruction to its input.  The sensitivity term is the
divergence of the input-to-measurement map, estimated with Gaussian probes:

    div ~= b . (map(f0 + step*b) - map(f0)) / step

The probe difference is built from graph primitives, so the divergence term
is differentiated like any other part of the loss.  The total objective sums
per-block fidelities plus per-block abundance simplex penalties, each with
its own weight; zero-weight blocks are skipped entirely.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .operators import ForwardModel

__all__ = [
    "l2_fidelity",
    "sure_fidelity",
    "sum_to_one_penalty",
    "multi_block_loss",
    "mc_divergence",
    "block_divergences",
    "estimate_sigma",
    "SURE_FORMS",
]

SURE_FORMS = ("normalized", "paper")


def l2_fidelity(y: np.ndarray, model: ForwardModel, f: Tensor) -> Tensor:
    """Squared residual ||y - model(f)||^2 as a scalar graph node."""
    return ad.sq_l2_norm(ad.sub(Tensor(y), model.apply(f)))


def sure_fidelity(
    y: np.ndarray,
    model: ForwardModel,
    f: Tensor,
    sigma: float,
    divergence: Tensor,
    form: str = "normalized",
) -> Tensor:
    """Risk-estimate fidelity: residual, noise offset, and divergence term.

    form "normalized" uses (1/m)||y - model(f)||^2 - sigma^2 + (2 sigma^2/m) div
    with m the measurement size.  form "paper" reproduces the unnormalized
    variant ||y - model(f)||^2 - sigma^2 + (2 sigma/m) div.
    """
    if form not in SURE_FORMS:
        raise ValueError(f"unknown fidelity form {form!r}")
    if sigma < 0:
        raise ValueError(f"noise level must be non-negative, got {sigma}")
    if divergence.size != 1:
        raise ad.ShapeError("divergence must be a scalar tensor")
    m = float(np.asarray(y).size)
    resid = ad.sq_l2_norm(ad.sub(Tensor(y), model.apply(f)))
    if form == "normalized":
        terms = ad.add(ad.scale(resid, 1.0 / m), ad.scale(divergence, 2.0 * sigma**2 / m))
    else:
        terms = ad.add(resid, ad.scale(divergence, 2.0 * sigma / m))
    return ad.add(terms, Tensor(-(sigma**2)))


def sum_to_one_penalty(abundances: Tensor) -> Tensor:
    """Sum over pixels of (sum_of_components - 1)^2 for an (H, W, r) stack."""
    if abundances.ndim != 3:
        raise ad.ShapeError(f"abundance stack must be 3-D, got {abundances.shape}")
    h, w, rank = abundances.shape
    totals = ad.sum_axis(abundances, 2)
    return ad.sq_l2_norm(ad.sub(totals, Tensor(np.ones((h, w)))))


def multi_block_loss(
    y: np.ndarray,
    model: ForwardModel,
    block_outputs: Sequence[Tensor],
    abundances: Sequence[Tensor],
    block_weights: Sequence[float],
    simplex_weights: Sequence[float],
    fidelity: str = "l2",
    sigma: float | None = None,
    divergences: Sequence[Tensor | None] | None = None,
    sure_form: str = "normalized",
) -> Tensor:
    """Weighted sum over blocks of fidelity plus simplex penalty.

    The penalty is kept on the same scale as the fidelity so the simplex
    weights mean the same thing in every mode: summed fidelities (l2 and the
    unnormalized risk form) pair with the summed penalty, while the
    normalized risk form (a per-entry mean) pairs with the per-pixel mean.
    """
    k = len(block_outputs)
    if len(abundances) != k or len(block_weights) != k or len(simplex_weights) != k:
        raise ValueError("per-block lists must all have one entry per block")
    if fidelity not in ("l2", "sure"):
        raise ValueError(f"unknown fidelity {fidelity!r}")
    if fidelity == "sure":
        if sigma is None or divergences is None or len(divergences) != k:
            raise ValueError("sure fidelity needs sigma and one divergence per block")

    total: Tensor | None = None
    for i in range(k):
        weight = float(block_weights[i])
        if weight == 0.0:
            continue
        if fidelity == "l2":
            fid = l2_fidelity(y, model, block_outputs[i])
        else:
            if divergences[i] is None:
                raise ValueError(f"block {i} has nonzero weight but no divergence")
            fid = sure_fidelity(y, model, block_outputs[i], sigma, divergences[i], sure_form)
        penalty = sum_to_one_penalty(abundances[i])
        if fidelity == "sure" and sure_form == "normalized":
            h, w, _ = abundances[i].shape
            penalty = ad.scale(penalty, 1.0 / (h * w))
        term = ad.add(fid, ad.scale(penalty, simplex_weights[i]))
        term = ad.scale(term, weight)
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("all block weights are zero; the loss would be empty")
    return total


def block_divergences(
    predict_fn: Callable[[Tensor], Sequence[Tensor | None]],
    f0: Tensor,
    base_predictions: Sequence[Tensor | None],
    probe_step: float,
    rng: np.random.Generator,
    probes: int = 1,
) -> list[Tensor | None]:
    """Per-block divergence estimates sharing one probe pass per draw.

    ``predict_fn`` maps a network input to the per-block predicted
    measurements; entries of ``base_predictions`` that are None are skipped
    (their block carries no loss weight).  The estimator needs the composite
    map to be square, i.e. prediction size equal to input size.
    """
    if probe_step <= 0:
        raise ValueError(f"probe step must be positive, got {probe_step}")
    if probes < 1:
        raise ValueError(f"need at least one probe, got {probes}")
    n = f0.size
    for p in base_predictions:
        if p is not None and p.size != n:
            raise ad.ShapeError(
                f"divergence needs a square map; prediction size {p.size} != input size {n}"
            )
    totals: list[Tensor | None] = [None] * len(base_predictions)
    for _ in range(probes):
        b = rng.standard_normal(f0.shape)
        b_flat = Tensor(b.reshape(n))
        perturbed = predict_fn(ad.add(f0, Tensor(probe_step * b)))
        for i, (base, pert) in enumerate(zip(base_predictions, perturbed)):
            if base is None:
                continue
            diff = ad.sub(ad.reshape(pert, (n,)), ad.reshape(base, (n,)))
            est = ad.scale(ad.reduce_sum(ad.mul(diff, b_flat)), 1.0 / probe_step)
            totals[i] = est if totals[i] is None else ad.add(totals[i], est)
    if probes > 1:
        totals = [None if t is None else ad.scale(t, 1.0 / probes) for t in totals]
    return totals


def mc_divergence(
    map_fn: Callable[[Tensor], Tensor],
    f0: Tensor,
    probe_step: float,
    rng: np.random.Generator,
    probes: int = 1,
    base: Tensor | None = None,
) -> Tensor:
    """Divergence of a square map at f0, averaged over Gaussian probes."""
    if base is None:
        base = map_fn(f0)
    out = block_divergences(lambda z: [map_fn(z)], f0, [base], probe_step, rng, probes)
    return out[0]


def estimate_sigma(y: np.ndarray) -> float:
    """Band-wise noise level from the finest diagonal wavelet detail.

    Each band is cropped to even size, one level of the orthonormal 2x2 Haar
    transform is taken, and the noise level is the median absolute diagonal
    coefficient over 0.6745; the cube estimate averages the per-band values.
    Adding a constant to the cube does not change the estimate.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 3:
        raise ValueError(f"expected an (H, W, bands) cube, got shape {y.shape}")
    h, w = (y.shape[0] // 2) * 2, (y.shape[1] // 2) * 2
    if h < 2 or w < 2:
        raise ValueError(f"bands of shape {y.shape[:2]} are too small for a 2x2 transform")
    x = y[:h, :w, :]
    diag = 0.5 * (x[0::2, 0::2] - x[0::2, 1::2] - x[1::2, 0::2] + x[1::2, 1::2])
    per_band = np.median(np.abs(diag), axis=(0, 1)) / 0.6745
    return float(per_band.mean())
