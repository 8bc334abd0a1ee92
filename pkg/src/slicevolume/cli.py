"""``slicevolume`` command line: synth-data, train, generate, interpolate, metrics.

Exit codes: 0 ok, 2 config, 3 I/O, 4 divergence, 5 checkpoint.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGENCE, EXIT_CHECKPOINT = 0, 2, 3, 4, 5
TRAINED_RANGE = (0.15, 0.6)
SHEET_SLICES = 8

log = logging.getLogger("slicevolume")


class CLIError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common(p: argparse.ArgumentParser, default_out: str):
    p.add_argument("--seed", type=int, default=None, help="random seed")
    p.add_argument("--deterministic", action="store_true",
                   help="force deterministic kernels (bit-reproducible on CPU)")
    p.add_argument("--device", default=None,
                   help="cpu or gpu:N (default: $SLICEVOLUME_DEVICE, then cpu)")
    p.add_argument("--out-dir", default=None, help=f"output directory (default {default_out})")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slicevolume",
        description="AdaIN-conditioned 3D n-phase volume synthesis from 2D slices.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic grain volume")
    _common(p, "data")
    p.add_argument("--dims", type=_ints, default=[64, 64, 64], help="volume size, e.g. 64,64,64")
    p.add_argument("--voxel-size-um", type=float, default=0.125)
    p.add_argument("--n-phases", type=int, default=3)
    p.add_argument("--mean-diameter-um", type=float, default=0.57)
    p.add_argument("--ln-sigma-g", type=float, default=0.35, help="log geometric std of grain size")
    p.add_argument("--phase-fractions", type=_floats, default=None,
                   help="comma-separated fractions (default 0.8 matrix, rest split evenly)")
    p.add_argument("--calibration-iters", type=int, default=10)
    p.add_argument("--name", default=None, help="file stem (default built from sigma and seed)")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a conditioned model from a JSON run config")
    _common(p, "the config's out_dir")
    p.add_argument("config", help="run configuration JSON")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--steps", type=int, default=None, help="override train.gen_steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample volumes at one scale parameter")
    _common(p, "generated")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--voxel-size-um", type=float, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("interpolate", help="sweep the scale parameter with fixed noise")
    _common(p, "sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--alphas", type=_floats, required=True, help="e.g. 0.15,0.25,0.35,0.45,0.6")
    p.add_argument("--phase", type=int, default=1, help="phase for chord lengths")
    p.add_argument("--voxel-size-um", type=float, default=None)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("metrics", help="microstructure report for a stored volume")
    _common(p, "next to the volume")
    p.add_argument("volume")
    p.add_argument("--r-max", type=int, default=16)
    p.set_defaults(func=cmd_metrics)
    return parser


# --- helpers ----------------------------------------------------------------


def _out_dir(args, default) -> Path:
    out = Path(args.out_dir if args.out_dir is not None else default)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CLIError(EXIT_IO, f"cannot create output directory {out}: {e}") from None
    return out


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


def _alpha_tag(alpha: float) -> str:
    return f"{alpha:.4f}".rstrip("0").rstrip(".").replace("-", "m").replace(".", "p")


def _load_label_volume(path, n_phases: int | None = None):
    from .synthetic import IngestionError, ingest_tiff_stack
    from .volume import VolumeError, load_volume

    path = Path(path)
    try:
        if path.suffix.lower() in (".tif", ".tiff"):
            if n_phases is None:
                import tifffile

                n_phases = max(2, int(np.asarray(tifffile.imread(path)).max()) + 1)
            return ingest_tiff_stack(path, n_phases=n_phases)
        return load_volume(path)
    except (OSError, VolumeError, IngestionError) as e:
        raise CLIError(EXIT_IO, f"cannot load volume {path}: {e}") from None


def _torch_setup(args):
    from .training import resolve_device, set_deterministic

    try:
        device = resolve_device(args.device)
    except ValueError as e:
        raise CLIError(EXIT_CONFIG, str(e)) from None
    set_deterministic(bool(args.deterministic))
    return device


def _load_models(args, device):
    from .checkpoint import CheckpointError, load_checkpoint

    try:
        models, _ = load_checkpoint(args.checkpoint, device=device)
    except (CheckpointError, OSError) as e:
        raise CLIError(EXIT_CHECKPOINT, f"bad checkpoint: {e}") from None
    models.generator.eval()
    return models


def _sample(models, alphas, noise_seed: int, device, same_noise: bool = False):
    """One volume per alpha.  Noise comes from one torch stream seeded with
    ``noise_seed``; with ``same_noise`` every alpha reuses the first draw."""
    import torch

    from .adain import make_code

    g = models.generator
    gen = torch.Generator().manual_seed(int(noise_seed))
    z0 = None
    outs = []
    for a in alphas:
        if z0 is None or not same_noise:
            z0 = g.sample_noise(1, gen)
        with torch.no_grad():
            p = g(z0.to(device), make_code(a, g.cfg.code_dim).to(device)[None])
        outs.append(p[0].cpu().numpy())
    return outs


def write_slice_sheet(labels: np.ndarray, n_phases: int, path, n_slices: int = SHEET_SLICES,
                      gap: int = 2) -> Path:
    """PNG with one row per axis (x, y, z), ``n_slices`` evenly spaced cuts each."""
    from PIL import Image

    from .volume import phase_palette

    pal = phase_palette(n_phases)
    rows = []
    for ax in range(3):
        n = labels.shape[ax]
        idx = np.unique(np.linspace(0, n - 1, n_slices).round().astype(int))
        tiles = [pal[np.take(labels, i, axis=ax)] for i in idx]
        h = max(t.shape[0] for t in tiles)
        row = []
        for t in tiles:
            tile = np.full((h, t.shape[1]), 255, np.uint8)
            tile[: t.shape[0]] = t
            row += [tile, np.full((h, gap), 255, np.uint8)]
        rows.append(np.concatenate(row[:-1], 1))
    w = max(r.shape[1] for r in rows)
    sheet = []
    for r in rows:
        pad = np.full((r.shape[0], w), 255, np.uint8)
        pad[:, : r.shape[1]] = r
        sheet += [pad, np.full((gap, w), 255, np.uint8)]
    path = Path(path)
    Image.fromarray(np.concatenate(sheet[:-1], 0)).save(path)
    return path


# --- commands -----------------------------------------------------------------


def cmd_synth_data(args) -> int:
    from .synthetic import GrainSpec, GrainSpecError, generate_grain_volume, self_check
    from .volume import save_volume

    fr = args.phase_fractions
    if fr is None:
        rest = 0.2 / (args.n_phases - 1) if args.n_phases > 1 else 0.0
        fr = [0.8] + [rest] * (args.n_phases - 1)
    try:
        spec = GrainSpec(dims=tuple(args.dims), voxel_size_um=args.voxel_size_um,
                         n_phases=args.n_phases, mean_diameter_um=args.mean_diameter_um,
                         ln_sigma_g=args.ln_sigma_g, phase_fractions=tuple(fr),
                         seed=_seed(args), calibration_iters=args.calibration_iters)
        v = generate_grain_volume(spec)
    except GrainSpecError as e:
        raise CLIError(EXIT_CONFIG, f"invalid grain spec: {e}") from None
    out = _out_dir(args, "data")
    name = args.name or f"grains_s{_alpha_tag(spec.ln_sigma_g)}_seed{spec.seed}"
    sc = self_check(v, spec)
    try:
        save_volume(v, out / f"{name}.raw")
        manifest_path = out / "manifest.json"
        manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
        manifest[f"{name}.raw"] = {
            "spec": spec.to_dict(),
            "self_check": {"passed": sc.passed, **sc.checks,
                           "fitted_ln_sigma_g": sc.fitted_ln_sigma_g,
                           "fitted_mean_diameter_um": sc.fitted_mean_diameter_um,
                           "n_grains": sc.n_grains},
        }
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except (OSError, json.JSONDecodeError) as e:
        raise CLIError(EXIT_IO, f"cannot write outputs: {e}") from None
    if not sc.passed:
        log.warning("self-check failed for %s: %s", name, sc.checks)
    print(out / f"{name}.raw")
    return EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import CheckpointError
    from .config import load_config
    from .networks import ConfigError
    from .synthetic import make_dataset
    from .training import TrainingAborted, train

    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        raise CLIError(EXIT_CONFIG, str(e)) from None
    tcfg = cfg.train
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.deterministic:
        overrides["deterministic"] = True
    if args.device is not None:
        overrides["device"] = args.device
    if args.steps is not None:
        overrides["gen_steps"] = args.steps
    try:
        tcfg = replace(tcfg, **overrides)
    except ValueError as e:
        raise CLIError(EXIT_CONFIG, str(e)) from None
    cfg.train = tcfg
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    if not cfg.datasets:
        raise CLIError(EXIT_CONFIG, "config: at least one dataset is required")
    datasets = []
    for entry in cfg.datasets:
        v = _load_label_volume(entry.path, cfg.generator.n_phases)
        if v.n_phases != cfg.generator.n_phases:
            raise CLIError(EXIT_CONFIG, f"{entry.path}: {v.n_phases} phases, generator makes "
                                        f"{cfg.generator.n_phases}")
        ax = "xyz".index(entry.axis)
        slices = entry.slices if entry.slices is not None else [v.dims[ax] // 2]
        try:
            datasets.append(make_dataset(v, entry.axis, slices, cfg.critic.patch_size, entry.alpha))
        except (IndexError, ValueError) as e:
            raise CLIError(EXIT_CONFIG, f"{entry.path}: {e}") from None
    out = _out_dir(args, cfg.out_dir)
    try:
        cfg.dump(out / "run_config.json")
    except OSError as e:
        raise CLIError(EXIT_IO, f"cannot write config snapshot: {e}") from None
    try:
        result = train(tcfg, datasets, cfg.generator, cfg.critic, out_dir=out, resume=args.resume)
    except TrainingAborted as e:
        raise CLIError(EXIT_DIVERGENCE, str(e)) from None
    except CheckpointError as e:
        raise CLIError(EXIT_CHECKPOINT, str(e)) from None
    except ValueError as e:
        raise CLIError(EXIT_CONFIG, str(e)) from None
    except OSError as e:
        raise CLIError(EXIT_IO, str(e)) from None
    for p in result.checkpoints[-1:]:
        print(p)
    return EXIT_OK


def cmd_generate(args) -> int:
    from .volume import LabelVolume, save_volume

    if args.count < 0:
        raise CLIError(EXIT_CONFIG, "--count must be >= 0")
    device = _torch_setup(args)
    models = _load_models(args, device)
    if args.count == 0:
        return EXIT_OK
    out = _out_dir(args, "generated")
    probs = _sample(models, [args.alpha] * args.count, _seed(args), device)
    tag = _alpha_tag(args.alpha)
    try:
        for k, p in enumerate(probs):
            labels = np.argmax(p, axis=0).astype(np.uint8)
            v = LabelVolume(labels, p.shape[0], args.voxel_size_um)
            stem = out / f"gen_a{tag}_{k:03d}"
            save_volume(v, stem.with_suffix(".raw"))
            write_slice_sheet(labels, v.n_phases, stem.with_suffix(".png"))
            print(stem.with_suffix(".raw"))
    except OSError as e:
        raise CLIError(EXIT_IO, f"cannot write outputs: {e}") from None
    return EXIT_OK


def sweep_summary(volumes, alphas, phase: int = 1) -> list[dict]:
    """Rows of (alpha, mean chord length, fitted ln sigma_g, extrapolation)."""
    from .metrics import EmptyPhaseError, grain_stats, mean_chord_length_all_axes

    rows = []
    for a, v in zip(alphas, volumes):
        try:
            mcl = mean_chord_length_all_axes(v, phase)
        except EmptyPhaseError:
            mcl = None
        gs = grain_stats(v)
        rows.append({
            "alpha": a,
            "mean_chord_length": mcl,
            "ln_sigma_g": gs.ln_sigma_g,
            "extrapolation": not (TRAINED_RANGE[0] - 1e-9 <= a <= TRAINED_RANGE[1] + 1e-9),
        })
    return rows


def cmd_interpolate(args) -> int:
    from .metrics import metrics_report, write_report
    from .volume import LabelVolume, save_volume

    if len(args.alphas) < 2:
        raise CLIError(EXIT_CONFIG, "--alphas needs at least two values")
    device = _torch_setup(args)
    models = _load_models(args, device)
    if not 0 <= args.phase < models.gen_cfg.n_phases:
        raise CLIError(EXIT_CONFIG, f"--phase must be in [0, {models.gen_cfg.n_phases})")
    out = _out_dir(args, "sweep")
    probs = _sample(models, args.alphas, _seed(args), device, same_noise=True)
    vols = [LabelVolume(np.argmax(p, axis=0).astype(np.uint8), p.shape[0], args.voxel_size_um)
            for p in probs]
    rows = sweep_summary(vols, args.alphas, args.phase)
    try:
        for k, (a, v) in enumerate(zip(args.alphas, vols)):
            stem = out / f"sweep_{k:02d}_a{_alpha_tag(a)}"
            save_volume(v, stem.with_suffix(".raw"))
            write_slice_sheet(v.labels, v.n_phases, stem.with_suffix(".png"))
            write_report(metrics_report(v), stem.with_name(stem.name + "_metrics.json"))
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        (out / "summary.json").write_text(json.dumps(rows, indent=2) + "\n")
    except OSError as e:
        raise CLIError(EXIT_IO, f"cannot write outputs: {e}") from None
    for r in rows:
        flag = "  extrapolation" if r["extrapolation"] else ""
        mcl = "nan" if r["mean_chord_length"] is None else f"{r['mean_chord_length']:.3f}"
        sg = "nan" if r["ln_sigma_g"] is None else f"{r['ln_sigma_g']:.3f}"
        print(f"alpha={r['alpha']:<6g} mcl={mcl} ln_sigma_g={sg}{flag}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    from .metrics import metrics_report, two_point_correlation, write_report
    from .synthetic import GrainSpec, self_check

    path = Path(args.volume)
    v = _load_label_volume(path)
    report = metrics_report(v, r_max=args.r_max)
    manifest = path.parent / "manifest.json"
    if manifest.exists():
        try:
            entry = json.loads(manifest.read_text()).get(path.name)
        except (OSError, json.JSONDecodeError):
            entry = None
        if entry and "spec" in entry:
            spec = entry["spec"]
            spec = GrainSpec(**{**spec, "dims": tuple(spec["dims"]),
                                "phase_fractions": tuple(spec["phase_fractions"])})
            sc = self_check(v, spec)
            report["self_check"] = {"passed": sc.passed, **sc.checks}
    out = _out_dir(args, path.parent)
    stem = path.stem
    try:
        write_report(report, out / f"{stem}_metrics.json")
        r_max = min(args.r_max, min(v.dims) - 1)
        for phase, f in enumerate(report["volume_fractions"]):
            if f > 0:
                two_point_correlation(v, phase, r_max).to_csv(out / f"{stem}_s2_phase{phase}.csv")
    except OSError as e:
        raise CLIError(EXIT_IO, f"cannot write report: {e}") from None
    print(out / f"{stem}_metrics.json")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
