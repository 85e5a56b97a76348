"""Self-supervised low-rank recovery of spectral image cubes.

The package fits a small untrained generator, built around per-pixel
endmember mixing, to a single degraded measurement.  No training data is
involved; the network weights themselves are the optimization variable.
Supported measurement models cover denoising, blur-plus-downsample
super-resolution, and coded-aperture snapshot capture, and the fitted
generator exposes abundance maps and endmember spectra as a byproduct.
"""

from .cube import (
    BadMagicError,
    CubeFormatError,
    DimensionOverflowError,
    SpectralCube,
    TruncatedPayloadError,
    export_band_png,
    export_csv,
    export_rgb_png,
    read_cube,
    write_cube,
)
from .losses import estimate_sigma, mc_divergence
from .metrics import MetricReport, compute_report, ergas, psnr, rmse, sam, ssim
from .network import AbundanceArch, MixtureNet
from .operators import ForwardModel, add_gaussian_noise, make_coded_aperture, make_forward_model
from .recovery import (
    ConfigError,
    RecoveryConfig,
    RecoveryDivergedError,
    RunArtifacts,
    adjoint_baseline,
    run_recovery,
    simulate_measurement,
    sweep,
    threshold_abundance,
)
from .rng import stream
from .synthetic import make_synthetic

__version__ = "0.1.0"

__all__ = [
    "SpectralCube",
    "read_cube",
    "write_cube",
    "export_band_png",
    "export_rgb_png",
    "export_csv",
    "CubeFormatError",
    "BadMagicError",
    "TruncatedPayloadError",
    "DimensionOverflowError",
    "MixtureNet",
    "AbundanceArch",
    "ForwardModel",
    "make_forward_model",
    "make_coded_aperture",
    "add_gaussian_noise",
    "estimate_sigma",
    "mc_divergence",
    "psnr",
    "sam",
    "rmse",
    "ergas",
    "ssim",
    "MetricReport",
    "compute_report",
    "RecoveryConfig",
    "RunArtifacts",
    "ConfigError",
    "RecoveryDivergedError",
    "run_recovery",
    "simulate_measurement",
    "adjoint_baseline",
    "threshold_abundance",
    "sweep",
    "make_synthetic",
    "stream",
    "__version__",
]
