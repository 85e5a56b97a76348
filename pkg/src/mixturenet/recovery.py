"""End-to-end recovery: configuration, the fitting loop, sweeps, artifacts.

A run fits the untrained generator to one scene's measurements.  Per
iteration: compose the (possibly learned) input, add the input perturbation,
run the network, assemble the weighted multi-block objective, backpropagate,
take an Adam step, and project every endmember matrix onto the non-negative
orthant.  Nothing is pretrained and nothing is batched; the only data used
is the measurement itself.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cube import SpectralCube, atomic_write_bytes, export_band_png, export_csv, export_rgb_png, write_cube
from .inputs import FIXED_STRATEGIES, TuckerInput, fixed_input, perturb_input, tucker_compose
from .losses import block_divergences, estimate_sigma, multi_block_loss
from .metrics import MetricReport, compute_report, psnr
from .network import ARCH_KINDS, OUTPUT_RULES, AbundanceArch, MixtureNet
from .operators import ForwardModel, add_gaussian_noise, make_coded_aperture, make_forward_model
from .optim import Adam, project_nonneg
from .rng import stream
from .synthetic import make_synthetic

__all__ = [
    "RecoveryConfig",
    "RunArtifacts",
    "ConfigError",
    "RecoveryDivergedError",
    "run_recovery",
    "simulate_measurement",
    "adjoint_baseline",
    "threshold_abundance",
    "sweep",
    "load_config_file",
    "TASKS",
    "SWEEP_KINDS",
    "DEFAULT_RANK_GRID",
    "DEFAULT_ARCH_GRID",
    "DEFAULT_BLOCK_GRID",
]

TASKS = ("denoise", "sr", "csi")
SWEEP_KINDS = ("input_strategies", "abundance_arch", "rank", "blocks")

DEFAULT_RANK_GRID = (3, 4, 5, 6, 7, 8, 9, 10, 15, 20)
DEFAULT_ARCH_GRID = tuple(
    [("convolutional", n, f) for n in (1, 2, 3, 4, 5) for f in (8, 16, 32, 64)]
    + [("autoencoder", n, f) for n in (3, 5, 7) for f in (8, 16, 32, 64)]
    + [("resnet", n, f) for n in (1, 2, 3, 4, 5) for f in (8, 16, 32, 64)]
)
DEFAULT_BLOCK_GRID = tuple((k, scheme) for k in (1, 2, 3, 4, 5) for scheme in ("single", "multiple"))


class ConfigError(ValueError):
    """A configuration value or key the run cannot accept."""


class RecoveryDivergedError(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at iteration {iteration}")
        self.iteration = iteration


@dataclass
class RecoveryConfig:
    """Every knob of a recovery run, with working defaults per task."""

    task: str = "denoise"
    rank: int = 8
    blocks: int = 2
    arch: str = "convolutional"
    num_layers: int = 6
    features: int = 32
    nonlinear_weight: float = 0.7
    input_strategy: str = "learned"
    input_rank_ratio: float = 0.4
    perturb_level: float = 0.7
    fidelity: str = "auto"          # auto: sure for denoising, l2 otherwise
    sure_form: str = "normalized"
    noise_sigma: float | None = None  # None: estimated from the measurement
    probes: int = 1
    probe_step: float = 1e-5
    block_weights: tuple[float, ...] | None = None    # None: all ones
    simplex_weights: tuple[float, ...] | None = None  # None: all 0.5
    output_rule: str = "last"
    lr: float = 1e-3
    iterations: int = 3000
    seed: int = 0
    downsample_factor: int = 4
    cassi_variant: str = "dd"
    abundance_threshold: float = 0.5

    def validate(self) -> None:
        checks = [
            (self.task in TASKS, f"task must be one of {TASKS}, got {self.task!r}"),
            (self.rank >= 1, f"rank must be >= 1, got {self.rank}"),
            (self.blocks >= 1, f"blocks must be >= 1, got {self.blocks}"),
            (self.arch in ARCH_KINDS, f"arch must be one of {ARCH_KINDS}, got {self.arch!r}"),
            (self.num_layers >= 1, f"num_layers must be >= 1, got {self.num_layers}"),
            (self.features >= 1, f"features must be >= 1, got {self.features}"),
            (0.0 <= self.nonlinear_weight <= 1.0,
             f"nonlinear_weight must lie in [0, 1], got {self.nonlinear_weight}"),
            (self.input_strategy in ("learned",) + FIXED_STRATEGIES,
             f"unknown input strategy {self.input_strategy!r}"),
            (0.0 < self.input_rank_ratio <= 1.0,
             f"input_rank_ratio must lie in (0, 1], got {self.input_rank_ratio}"),
            (self.perturb_level >= 0.0,
             f"perturb_level must be non-negative, got {self.perturb_level}"),
            (self.fidelity in ("auto", "l2", "sure"),
             f"fidelity must be auto, l2, or sure, got {self.fidelity!r}"),
            (self.sure_form in ("normalized", "paper"),
             f"sure_form must be normalized or paper, got {self.sure_form!r}"),
            (self.noise_sigma is None or self.noise_sigma >= 0,
             f"noise_sigma must be non-negative, got {self.noise_sigma}"),
            (self.probes >= 1, f"probes must be >= 1, got {self.probes}"),
            (self.probe_step > 0, f"probe_step must be positive, got {self.probe_step}"),
            (self.output_rule in OUTPUT_RULES,
             f"output_rule must be one of {OUTPUT_RULES}, got {self.output_rule!r}"),
            (self.output_rule != "average_last_two" or self.blocks >= 2,
             "averaging the last two outputs needs at least two blocks"),
            (self.lr > 0, f"lr must be positive, got {self.lr}"),
            (self.iterations >= 1, f"iterations must be >= 1, got {self.iterations}"),
            (self.downsample_factor >= 1,
             f"downsample_factor must be >= 1, got {self.downsample_factor}"),
            (self.cassi_variant in ("dd", "sd"),
             f"cassi_variant must be dd or sd, got {self.cassi_variant!r}"),
            (0.0 < self.abundance_threshold < 1.0,
             f"abundance_threshold must lie in (0, 1), got {self.abundance_threshold}"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        for name in ("block_weights", "simplex_weights"):
            weights = getattr(self, name)
            if weights is None:
                continue
            if len(weights) != self.blocks:
                raise ConfigError(f"{name} needs {self.blocks} entries, got {len(weights)}")
            if any(w < 0 for w in weights):
                raise ConfigError(f"{name} entries must be non-negative")
        if self.block_weights is not None and all(w == 0 for w in self.block_weights):
            raise ConfigError("at least one block weight must be positive")
        if self.arch == "autoencoder" and self.num_layers % 2 == 0:
            raise ConfigError("autoencoder needs an odd number of hidden layers")

    def resolved_fidelity(self) -> str:
        if self.fidelity != "auto":
            return self.fidelity
        return "sure" if self.task == "denoise" else "l2"

    def resolved_block_weights(self) -> tuple[float, ...]:
        return self.block_weights if self.block_weights is not None else (1.0,) * self.blocks

    def resolved_simplex_weights(self) -> tuple[float, ...]:
        return self.simplex_weights if self.simplex_weights is not None else (0.5,) * self.blocks

    def to_mapping(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            out[f.name] = v
        return out

    @classmethod
    def from_mapping(cls, mapping: dict) -> "RecoveryConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, raw)
        cfg = cls(**values)
        cfg.validate()
        return cfg


_TUPLE_KEYS = ("block_weights", "simplex_weights")
_INT_KEYS = ("rank", "blocks", "num_layers", "features", "probes", "iterations", "seed",
             "downsample_factor")
_FLOAT_KEYS = ("nonlinear_weight", "input_rank_ratio", "perturb_level", "probe_step", "lr",
               "abundance_threshold")


def _coerce(key: str, raw):
    if raw is None or not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if key in _TUPLE_KEYS:
            return None if text.lower() == "none" else tuple(float(v) for v in text.split(","))
        if key == "noise_sigma":
            return None if text.lower() in ("none", "auto") else float(text)
        if key in _INT_KEYS:
            return int(text)
        if key in _FLOAT_KEYS:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {text!r}") from exc
    return text


def load_config_file(path: Path | str) -> dict:
    """Parse key=value lines; '#' starts a comment, blank lines are skipped."""
    mapping: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        key, value = stripped.split("=", 1)
        mapping[key.strip()] = value.strip()
    return mapping


@dataclass
class RunArtifacts:
    """Everything a run produces, in memory; files are written separately."""

    recovered: np.ndarray                    # clipped to [0, 1]
    raw_output: np.ndarray                   # as produced, unclipped
    abundances: list[np.ndarray]             # one (H, W, rank) stack per block
    endmembers: list[np.ndarray]             # one (bands, rank) matrix per block
    report: MetricReport | None
    log: list[tuple[int, float, float | None]]
    config: RecoveryConfig
    noise_sigma_used: float | None = None
    out_dir: Path | None = None


def simulate_measurement(
    cfg: RecoveryConfig,
    clean: np.ndarray,
    sigma: float = 0.0,
    code: np.ndarray | None = None,
) -> tuple[np.ndarray, ForwardModel]:
    """Build the task's operator for a known scene and measure it."""
    shape = clean.shape
    if cfg.task == "denoise":
        model = make_forward_model("identity", shape)
    elif cfg.task == "sr":
        model = make_forward_model("blur_downsample", shape, factor=cfg.downsample_factor)
    else:
        if code is None:
            code = make_coded_aperture(shape[:2], stream(cfg.seed, "aperture"))
        model = make_forward_model("cassi", shape, code=code, variant=cfg.cassi_variant)
    y = model.apply_array(clean)
    if sigma > 0:
        y = add_gaussian_noise(y, sigma, stream(cfg.seed, "measurement-noise"))
    return y, model


def adjoint_baseline(model: ForwardModel, y: np.ndarray) -> np.ndarray:
    """Mass-normalized adjoint reconstruction, the no-prior reference point."""
    back = model.adjoint(y)
    weight = model.adjoint(model.apply_array(np.ones(model.input_shape)))
    return back / np.maximum(weight, 1e-12)


def threshold_abundance(abundance_map: np.ndarray, threshold: float) -> np.ndarray:
    """Binary material mask: 1 where abundance >= threshold (inclusive)."""
    arr = np.asarray(abundance_map, dtype=np.float64)
    return (arr >= threshold).astype(np.uint8)


def run_recovery(
    cfg: RecoveryConfig,
    y: np.ndarray,
    model: ForwardModel,
    ref: np.ndarray | None = None,
    out_dir: Path | str | None = None,
    on_iteration: Callable[[dict], None] | None = None,
) -> RunArtifacts:
    """Fit the generator to one measurement and collect artifacts.

    ``on_iteration`` (when given) receives, every iteration, a dict with the
    iteration index, loss, log quality value, and live views of the block
    outputs, abundance stacks, and endmember matrices.
    """
    cfg.validate()
    y = np.asarray(y, dtype=np.float64)
    if y.shape != model.output_shape:
        raise ConfigError(f"measurement shape {y.shape} != operator output {model.output_shape}")
    if not np.all(np.isfinite(y)):
        raise ConfigError("measurement contains non-finite values")
    if ref is not None:
        ref = np.asarray(ref, dtype=np.float64)
        if ref.shape != model.input_shape:
            raise ConfigError(f"reference shape {ref.shape} != scene shape {model.input_shape}")

    fidelity = cfg.resolved_fidelity()
    block_weights = cfg.resolved_block_weights()
    simplex_weights = cfg.resolved_simplex_weights()

    sigma = cfg.noise_sigma
    if fidelity == "sure" and sigma is None:
        if y.ndim != 3:
            raise ConfigError("automatic noise estimation needs a cube-shaped measurement")
        sigma = estimate_sigma(y)

    net = MixtureNet(
        model.input_shape,
        cfg.rank,
        cfg.blocks,
        AbundanceArch(cfg.arch, cfg.num_layers, cfg.features),
        cfg.nonlinear_weight,
        cfg.output_rule,
        stream(cfg.seed, "init"),
    )
    params = net.parameters()

    tucker: TuckerInput | None = None
    base_input: Tensor | None = None
    if cfg.input_strategy == "learned":
        tucker = TuckerInput(model.input_shape, cfg.input_rank_ratio, stream(cfg.seed, "input"))
        params = params + tucker.parameters()
    else:
        base_input = fixed_input(
            cfg.input_strategy,
            model.input_shape,
            rng=stream(cfg.seed, "input"),
            model=model,
            measurement=y,
        )

    optimizer = Adam(params, lr=cfg.lr)
    perturb_rng = stream(cfg.seed, "perturb")
    probe_rng = stream(cfg.seed, "probe")

    def predictions(outs) -> list[Tensor | None]:
        return [
            model.apply(f) if block_weights[i] != 0.0 else None
            for i, f in enumerate(outs.block_outputs)
        ]

    log: list[tuple[int, float, float | None]] = []
    outs = None
    for it in range(cfg.iterations):
        z = tucker_compose(tucker) if tucker is not None else base_input
        f0 = perturb_input(z, cfg.perturb_level, perturb_rng)
        outs = net.forward(f0)

        divergences = None
        if fidelity == "sure":
            base_preds = predictions(outs)
            divergences = block_divergences(
                lambda z0: [model.apply(f) for f in net.forward(z0).block_outputs],
                f0,
                base_preds,
                cfg.probe_step,
                probe_rng,
                cfg.probes,
            )
        loss = multi_block_loss(
            y,
            model,
            outs.block_outputs,
            outs.abundances,
            block_weights,
            simplex_weights,
            fidelity=fidelity,
            sigma=sigma,
            divergences=divergences,
            sure_form=cfg.sure_form,
        )
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise RecoveryDivergedError(it, loss_val)

        optimizer.zero_grad()
        ad.backward(loss)
        optimizer.step()
        for e in net.endmember_tensors():
            project_nonneg(e)

        quality = psnr(ref, outs.output.data) if ref is not None else None
        log.append((it, loss_val, quality))
        if on_iteration is not None:
            on_iteration(
                {
                    "iteration": it,
                    "loss": loss_val,
                    "psnr": quality,
                    "output": outs.output.data,
                    "block_outputs": [f.data for f in outs.block_outputs],
                    "abundances": [a.data for a in outs.abundances],
                    "endmembers": [e.data for e in net.endmember_tensors()],
                }
            )

    # one clean render at the unperturbed input for the exported result
    z = tucker_compose(tucker) if tucker is not None else base_input
    final = net.forward(z)
    raw = final.output.data
    recovered = np.clip(raw, 0.0, 1.0)
    report = compute_report(ref, recovered, _scale_ratio(cfg)) if ref is not None else None

    artifacts = RunArtifacts(
        recovered=recovered,
        raw_output=raw,
        abundances=[a.data for a in final.abundances],
        endmembers=[e.data.copy() for e in net.endmember_tensors()],
        report=report,
        log=log,
        config=cfg,
        noise_sigma_used=sigma,
        out_dir=Path(out_dir) if out_dir is not None else None,
    )
    if out_dir is not None:
        write_artifacts(artifacts)
    return artifacts


def _scale_ratio(cfg: RecoveryConfig) -> int:
    return cfg.downsample_factor if cfg.task == "sr" else 1


def write_artifacts(artifacts: RunArtifacts) -> None:
    """Write every artifact of a finished run below its output directory."""
    out = artifacts.out_dir
    out.mkdir(parents=True, exist_ok=True)
    cube = SpectralCube(artifacts.recovered)
    write_cube(out / "recovered.spc", cube)
    export_rgb_png(cube, out / "recovered_rgb.png")

    for k, (abund, endm) in enumerate(zip(artifacts.abundances, artifacts.endmembers)):
        export_csv(endm, out / f"endmembers_block{k}.csv")
        for c in range(abund.shape[2]):
            plane = SpectralCube(abund[:, :, c : c + 1])
            export_band_png(plane, 0, out / f"abundance_block{k}_comp{c}.png")
            export_csv(abund[:, :, c], out / f"abundance_block{k}_comp{c}.csv")

    lines = ["iter,loss,psnr"]
    for it, loss_val, quality in artifacts.log:
        q = "" if quality is None else ("infinite" if math.isinf(quality) else repr(quality))
        lines.append(f"{it},{repr(loss_val)},{q}")
    _write_text(out / "log.csv", "\n".join(lines) + "\n")

    cfg_lines = [f"{k}={v}" for k, v in artifacts.config.to_mapping().items()]
    _write_text(out / "config.txt", "\n".join(cfg_lines) + "\n")

    if artifacts.report is not None:
        _write_text(out / "metrics.txt", artifacts.report.to_text())
        header = ",".join(name for name in ("psnr", "sam", "rmse", "ergas", "ssim"))
        _write_text(out / "metrics.csv", header + "\n" + ",".join(artifacts.report.to_csv_row()) + "\n")


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, lambda tmp: Path(tmp).write_text(text))


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def _cell_config(cfg: RecoveryConfig, kind: str, value, cell_seed: int) -> RecoveryConfig:
    if kind == "input_strategies":
        return dataclasses.replace(cfg, input_strategy=value, seed=cell_seed)
    if kind == "abundance_arch":
        arch, num_layers, features = value
        return dataclasses.replace(
            cfg, arch=arch, num_layers=num_layers, features=features, seed=cell_seed
        )
    if kind == "rank":
        return dataclasses.replace(cfg, rank=int(value), seed=cell_seed)
    if kind == "blocks":
        k, scheme = value
        k = int(k)
        if scheme == "single":
            weights = (0.0,) * (k - 1) + (1.0,)
        elif scheme == "multiple":
            weights = (1.0,) * k
        else:
            raise ConfigError(f"unknown loss scheme {scheme!r}")
        rule = "last" if cfg.output_rule == "average_last_two" and k < 2 else cfg.output_rule
        return dataclasses.replace(
            cfg, blocks=k, block_weights=weights, simplex_weights=None, output_rule=rule,
            seed=cell_seed,
        )
    raise ConfigError(f"unknown sweep kind {kind!r}")


def _cell_label(kind: str, value) -> dict:
    if kind == "input_strategies":
        return {"input_strategy": value}
    if kind == "abundance_arch":
        return {"arch": value[0], "num_layers": value[1], "features": value[2]}
    if kind == "rank":
        return {"rank": int(value)}
    return {"blocks": int(value[0]), "loss_scheme": value[1]}


def sweep(
    kind: str,
    cfg: RecoveryConfig,
    grid: Sequence,
    y: np.ndarray,
    model: ForwardModel,
    ref: np.ndarray | None = None,
    out_csv: Path | str | None = None,
) -> list[dict]:
    """Run one recovery per grid cell; failures are recorded, not raised.

    Every cell runs on its own seed drawn from (config seed, cell index), so
    cells stay reproducible independently of each other.
    """
    if kind not in SWEEP_KINDS:
        raise ConfigError(f"sweep kind must be one of {SWEEP_KINDS}, got {kind!r}")
    rows: list[dict] = []
    for index, value in enumerate(grid):
        cell_seed = int(stream(cfg.seed, f"sweep-cell-{index}").integers(2**31))
        row: dict = {"cell": index, **_cell_label(kind, value)}
        try:
            cell_cfg = _cell_config(cfg, kind, value, cell_seed)
            result = run_recovery(cell_cfg, y, model, ref=ref)
            row["status"] = "ok"
            row["error"] = ""
            if result.report is not None:
                for name in ("psnr", "sam", "rmse", "ergas", "ssim"):
                    row[name] = getattr(result.report, name)
        except Exception as exc:  # noqa: BLE001 - a failed cell must not kill the sweep
            row["status"] = "failed"
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)

    if out_csv is not None:
        columns: list[str] = []
        for row in rows:
            for key in row:
                if key not in columns:
                    columns.append(key)
        lines = [",".join(columns)]
        for row in rows:
            lines.append(",".join(_csv_field(row.get(c, "")) for c in columns))
        _write_text(Path(out_csv), "\n".join(lines) + "\n")
    return rows


def _csv_field(value) -> str:
    if isinstance(value, float):
        return "infinite" if math.isinf(value) else repr(value)
    text = str(value)
    if any(ch in text for ch in ",\"\n"):
        text = '"' + text.replace('"', '""') + '"'
    return text
