"""Microstructure descriptors: phase fractions, two-point correlation,
chord lengths and connected-component grain statistics."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from .volume import LabelVolume, axis_index


class EmptyPhaseError(ValueError):
    pass


def _labels(v) -> np.ndarray:
    return v.labels if isinstance(v, LabelVolume) else np.asarray(v)


def volume_fractions(v: LabelVolume) -> np.ndarray:
    """Phase fractions; they sum to exactly 1.0 under ``ndarray.sum``.

    Plain ``counts / N`` can miss 1.0 by an ulp, so one nonzero entry is
    nudged by a few ulps (largest phases tried first) to close the sum.
    """
    counts = np.bincount(v.labels.ravel(), minlength=v.n_phases).astype(np.float64)
    fr = counts / counts.sum()
    if fr.sum() == 1.0:
        return fr
    for k in np.argsort(-counts, kind="stable"):
        if counts[k] == 0:
            break
        base = fr[k]
        for direction in (np.inf, -np.inf):
            fr[k] = base
            for _ in range(4):
                fr[k] = np.nextafter(fr[k], direction)
                if fr.sum() == 1.0:
                    return fr
        fr[k] = base
    return fr


@dataclass
class S2Curve:
    radii: np.ndarray
    values: np.ndarray

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "s2"])
            for r, s in zip(self.radii, self.values):
                w.writerow([int(r), f"{float(s):.8g}"])
        return path


def two_point_correlation(v, phase: int, r_max: int) -> S2Curve:
    """Axis-aligned S2(r) for r = 0..r_max, averaged over the array's axes.

    ``v`` may be a LabelVolume or a plain 2D/3D integer array.
    """
    ind = (_labels(v) == phase).astype(np.float64)
    if r_max >= min(ind.shape):
        raise ValueError(f"r_max={r_max} must be smaller than min dim {min(ind.shape)}")
    vals = np.empty(r_max + 1)
    for r in range(r_max + 1):
        per_axis = []
        for ax in range(ind.ndim):
            n = ind.shape[ax]
            a = np.take(ind, np.arange(0, n - r), axis=ax)
            b = np.take(ind, np.arange(r, n), axis=ax)
            per_axis.append(np.mean(a * b))
        vals[r] = np.mean(per_axis)
    return S2Curve(np.arange(r_max + 1), vals)


def chord_counts(v, phase: int, axis) -> tuple[int, int]:
    """(total phase length, number of maximal runs) along ``axis``."""
    ind = np.moveaxis(_labels(v) == phase, axis_index(axis), -1)
    starts = ind.copy()
    starts[..., 1:] &= ~ind[..., :-1]
    return int(ind.sum()), int(starts.sum())


def mean_chord_length(v, phase: int, axis) -> float:
    total, runs = chord_counts(v, phase, axis)
    if runs == 0:
        raise EmptyPhaseError(f"phase {phase} does not occur in the volume")
    return total / runs


def mean_chord_length_all_axes(v, phase: int) -> float:
    """Pooled over every axis of the array: total run length / total runs."""
    arr = _labels(v)
    total = runs = 0
    for ax in range(arr.ndim):
        t, r = chord_counts(arr, phase, ax)
        total += t
        runs += r
    if runs == 0:
        raise EmptyPhaseError(f"phase {phase} does not occur in the volume")
    return total / runs


@dataclass
class GrainReport:
    """Grains are 6-connected same-phase components that do not touch the
    volume boundary; boundary components are truncated and only counted in
    the per-phase breakdown."""

    count: int
    diameters_um: np.ndarray
    mean_diameter_um: float | None
    ln_sigma_g: float | None
    per_phase: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["diameters_um"] = [float(x) for x in self.diameters_um]
        return d


def equivalent_diameter(n_voxels, voxel_size: float = 1.0):
    return (6.0 * np.asarray(n_voxels, dtype=np.float64) / np.pi) ** (1 / 3) * voxel_size


def _components(mask: np.ndarray):
    """Sizes of 6-connected components and a flag for boundary contact."""
    lab, n = ndi.label(mask)
    sizes = np.bincount(lab.ravel(), minlength=n + 1)[1:]
    border = np.zeros(n + 1, dtype=bool)
    for ax in range(mask.ndim):
        for end in (0, -1):
            border[np.take(lab, end, axis=ax)] = True
    return sizes, border[1:]


def grain_stats(v: LabelVolume) -> GrainReport:
    vs = v.voxel_size_um if v.voxel_size_um is not None else 1.0
    all_d = []
    per_phase = {}
    for phase in range(v.n_phases):
        mask = v.labels == phase
        if not mask.any():
            per_phase[phase] = {"n_components": 0, "n_boundary": 0, "count": 0,
                                "mean_diameter_um": None, "ln_sigma_g": None}
            continue
        sizes, border = _components(mask)
        d = equivalent_diameter(sizes[~border], vs)
        all_d.append(d)
        per_phase[phase] = {
            "n_components": int(len(sizes)),
            "n_boundary": int(border.sum()),
            "count": int(len(d)),
            "mean_diameter_um": float(d.mean()) if len(d) else None,
            "ln_sigma_g": float(np.log(d).std()) if len(d) else None,
        }
    d = np.concatenate(all_d) if all_d else np.empty(0)
    return GrainReport(
        count=int(len(d)),
        diameters_um=d,
        mean_diameter_um=float(d.mean()) if len(d) else None,
        ln_sigma_g=float(np.log(d).std()) if len(d) else None,
        per_phase=per_phase,
    )


def metrics_report(v: LabelVolume, r_max: int = 16) -> dict:
    """Full report for one volume; JSON-serializable."""
    r_max = min(r_max, min(v.dims) - 1)
    fr = volume_fractions(v)
    report = {
        "dims": list(v.dims),
        "n_phases": v.n_phases,
        "voxel_size_um": v.voxel_size_um,
        "volume_fractions": [float(f) for f in fr],
        "mean_chord_length": {},
        "s2": {},
    }
    for phase in range(v.n_phases):
        if fr[phase] == 0:
            report["mean_chord_length"][str(phase)] = None
            continue
        report["mean_chord_length"][str(phase)] = {
            ax: mean_chord_length(v, phase, ax) for ax in ("x", "y", "z")
        }
        report["s2"][str(phase)] = [
            float(s) for s in two_point_correlation(v, phase, r_max).values
        ]
    gs = grain_stats(v)
    report["grains"] = {k: val for k, val in gs.to_dict().items() if k != "diameters_um"}
    return report


def write_report(report: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report, indent=2) + "\n")
    return path
