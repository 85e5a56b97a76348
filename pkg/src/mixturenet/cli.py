"""Command line front end.

Subcommands: ``synth`` writes a synthetic ground-truth scene, ``denoise`` /
``sr`` / ``csi`` run a recovery for the matching measurement model, ``unmix``
is a csi run that additionally exports thresholded material maps, ``metrics``
compares two cube files, and ``sweep`` runs a characterization grid.

Exit codes: 0 on success, 1 for usage or configuration errors (the message
names the offending flag or key), 2 for runtime and numeric failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .cube import CubeFormatError, SpectralCube, export_csv, export_rgb_png, read_cube, write_cube
from .inputs import FIXED_STRATEGIES
from .metrics import compute_report
from .operators import make_forward_model
from .recovery import (
    DEFAULT_ARCH_GRID,
    DEFAULT_BLOCK_GRID,
    DEFAULT_RANK_GRID,
    SWEEP_KINDS,
    ConfigError,
    RecoveryConfig,
    RecoveryDivergedError,
    load_config_file,
    run_recovery,
    simulate_measurement,
    sweep,
    threshold_abundance,
)
from .synthetic import make_synthetic

__all__ = ["main", "build_parser"]

_RUN_TASKS = {"denoise": "denoise", "sr": "sr", "csi": "csi", "unmix": "csi"}
_DEFAULT_SIM_SIGMA = 25.0 / 255.0


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; this tool reserves 2 for runtime."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_scene_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--height", "--h", type=int, default=32, help="synthetic scene rows")
    parser.add_argument("--width", "--w", type=int, default=32, help="synthetic scene columns")
    parser.add_argument("--bands", "--l", type=int, default=8, help="spectral band count")


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out-dir", required=True, help="directory for run artifacts")
    parser.add_argument("--config", help="key=value file applied before flag overrides")
    parser.add_argument("--scene", help="clean reference cube (.spc); measurement is simulated")
    parser.add_argument("--input", help="measurement cube (.spc) used as-is, no reference")
    parser.add_argument("--code", help="coded aperture CSV (csi with --input)")
    parser.add_argument("--sigma", type=float,
                        help="measurement noise level; omitted means simulate at the default "
                             "and estimate the level from the measurement")
    _add_scene_flags(parser)
    parser.add_argument("--scene-rank", type=int, default=3,
                        help="component count of the synthetic fallback scene")
    # every configuration key is also a flag; values are parsed like file entries
    for f in dataclasses.fields(RecoveryConfig):
        if f.name == "task":
            continue
        parser.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", type=str,
                            default=None, metavar="V")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mixturenet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic ground-truth scene")
    _add_scene_flags(p)
    p.add_argument("--rank", "--r", type=int, default=3, help="number of materials")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)

    for name in _RUN_TASKS:
        p = sub.add_parser(name, help=f"run a {name} recovery")
        _add_run_flags(p)

    p = sub.add_parser("metrics", help="compare two cube files")
    p.add_argument("--ref", required=True)
    p.add_argument("--est", required=True)
    p.add_argument("--scale-ratio", type=int, default=1)
    p.add_argument("--out", help="also write the report to this path")

    p = sub.add_parser("sweep", help="grid of recovery runs, one CSV row per cell")
    p.add_argument("--kind", required=True, choices=SWEEP_KINDS)
    p.add_argument("--grid", help="comma list of cells; default grid when omitted")
    p.add_argument("--task", default="denoise", choices=("denoise", "sr", "csi"))
    _add_run_flags(p)

    return parser


def _build_config(
    args: argparse.Namespace, task: str, defaults: dict | None = None
) -> RecoveryConfig:
    mapping: dict = {"task": task}
    if defaults:
        mapping.update(defaults)
    if getattr(args, "config", None):
        mapping.update(load_config_file(args.config))
    for f in dataclasses.fields(RecoveryConfig):
        value = getattr(args, f"cfg_{f.name}", None)
        if value is not None:
            mapping[f.name] = value
    if args.sigma is not None and "noise_sigma" not in mapping:
        mapping["noise_sigma"] = repr(args.sigma)
    return RecoveryConfig.from_mapping(mapping)


def _load_measurement(args: argparse.Namespace, cfg: RecoveryConfig):
    """Resolve (measurement, model, reference) from the input flags."""
    if args.input and args.scene:
        raise ConfigError("--input and --scene are mutually exclusive")

    if args.input:
        data = read_cube(args.input).data
        if cfg.task == "denoise":
            return data, make_forward_model("identity", data.shape), None
        if cfg.task == "sr":
            h, w, bands = data.shape
            d = cfg.downsample_factor
            model = make_forward_model("blur_downsample", (h * d, w * d, bands), factor=d)
            return data, model, None
        if args.code is None:
            raise ConfigError("csi with --input needs --code (the aperture CSV)")
        if data.shape[2] != 1:
            raise ConfigError("a coded snapshot measurement must be stored as an (H, W, 1) cube")
        y = data[:, :, 0]
        bands = args.bands
        width = y.shape[1] if cfg.cassi_variant == "dd" else y.shape[1] - bands + 1
        code = np.loadtxt(args.code, delimiter=",", ndmin=2)
        model = make_forward_model(
            "cassi", (y.shape[0], width, bands), code=code, variant=cfg.cassi_variant
        )
        return y, model, None

    if args.scene:
        clean = read_cube(args.scene).data
    else:
        clean, _, _ = make_synthetic(args.height, args.width, args.bands, args.scene_rank,
                                     seed=cfg.seed)
    sim_sigma = args.sigma if args.sigma is not None else (
        _DEFAULT_SIM_SIGMA if cfg.task == "denoise" else 0.0
    )
    y, model = simulate_measurement(cfg, clean, sigma=sim_sigma)
    return y, model, clean


def _cmd_synth(args: argparse.Namespace) -> int:
    cube, abundances, endmembers = make_synthetic(
        args.height, args.width, args.bands, args.rank, seed=args.seed
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_cube(out / "scene.spc", SpectralCube(cube))
    export_rgb_png(SpectralCube(cube), out / "scene_rgb.png")
    export_csv(endmembers, out / "true_endmembers.csv")
    for c in range(args.rank):
        export_csv(abundances[:, :, c], out / f"true_abundance_comp{c}.csv")
    print(f"wrote scene {cube.shape} to {out}")
    return 0


def _cmd_run(args: argparse.Namespace, command: str) -> int:
    # material maps read best off the purely linear mixture, so unmix defaults
    # to no nonlinearity; a config file or flag still overrides it
    defaults = {"nonlinear_weight": "0.0"} if command == "unmix" else None
    cfg = _build_config(args, _RUN_TASKS[command], defaults)
    y, model, ref = _load_measurement(args, cfg)
    artifacts = run_recovery(cfg, y, model, ref=ref, out_dir=args.out_dir)

    if cfg.noise_sigma is None and artifacts.noise_sigma_used is not None:
        print(f"noise level: {artifacts.noise_sigma_used!r} (estimated)")
    if command == "unmix":
        out = Path(args.out_dir)
        for k, abund in enumerate(artifacts.abundances):
            for c in range(abund.shape[2]):
                mask = threshold_abundance(abund[:, :, c], cfg.abundance_threshold)
                export_csv(mask.astype(np.float64), out / f"material_block{k}_comp{c}.csv")
    if artifacts.report is not None:
        print(artifacts.report.to_text(), end="")
    print(f"artifacts in {args.out_dir}")
    return 0


def _cmd_metrics(args: argparse.Namespace) -> int:
    ref = read_cube(args.ref).data
    est = read_cube(args.est).data
    report = compute_report(ref, est, args.scale_ratio)
    text = report.to_text()
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return 0


def _parse_grid(kind: str, text: str | None):
    if text is None:
        return {
            "input_strategies": FIXED_STRATEGIES + ("learned",),
            "abundance_arch": DEFAULT_ARCH_GRID,
            "rank": DEFAULT_RANK_GRID,
            "blocks": DEFAULT_BLOCK_GRID,
        }[kind]
    items = [part.strip() for part in text.split(",") if part.strip()]
    if not items:
        raise ConfigError("--grid must name at least one cell")
    try:
        if kind == "rank":
            return tuple(int(v) for v in items)
        if kind == "input_strategies":
            return tuple(items)
        if kind == "blocks":
            return tuple((int(v.split(":")[0]), v.split(":")[1]) for v in items)
        parsed = []
        for v in items:
            arch, layers, features = v.split(":")
            parsed.append((arch, int(layers), int(features)))
        return tuple(parsed)
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"bad --grid cell for kind {kind!r}: {text!r}") from exc


def _cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _build_config(args, args.task)
    grid = _parse_grid(args.kind, args.grid)
    y, model, ref = _load_measurement(args, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = sweep(args.kind, cfg, grid, y, model, ref=ref, out_csv=out / "sweep.csv")
    failed = sum(1 for r in rows if r["status"] != "ok")
    print(f"{len(rows)} cells, {failed} failed; results in {out / 'sweep.csv'}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command in _RUN_TASKS:
            return _cmd_run(args, args.command)
        if args.command == "metrics":
            return _cmd_metrics(args)
        return _cmd_sweep(args)
    except SystemExit:
        raise
    except ConfigError as exc:
        print(f"mixturenet: error: {exc}", file=sys.stderr)
        return 1
    except (CubeFormatError, RecoveryDivergedError, OSError, ValueError) as exc:
        print(f"mixturenet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
