"""Labelled and probabilistic voxel volumes, slicing, patch sampling and file I/O.

Array layout conventions used throughout the package:

* ``LabelVolume.labels`` has shape ``(H, W, D)``, indexed ``[x, y, z]``.
* ``PhaseVolume.values`` is channels-first, ``(C, H, W, D)``, matching torch.
* 2D images (``Slice2D``, ``Patch2D``) are ``(C, A, B)``.

Slicing along axis ``x`` fixes the first spatial index, ``y`` the second and
``z`` the third.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
AXES = ("x", "y", "z")
SUM_TOL = 1e-5


class VolumeError(ValueError):
    """Base class for invalid volume data."""


class InvalidLabelError(VolumeError):
    def __init__(self, index, label, n_phases):
        self.index = tuple(int(i) for i in index)
        self.label = int(label)
        super().__init__(
            f"voxel {self.index} has label {self.label}, expected < n_phases={n_phases}"
        )


class PatchTooLargeError(VolumeError):
    pass


class VolumeFormatError(VolumeError):
    """Malformed or inconsistent volume file."""


class PayloadSizeError(VolumeFormatError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


def axis_index(axis) -> int:
    if isinstance(axis, str):
        try:
            return AXES.index(axis.lower())
        except ValueError:
            raise ValueError(f"unknown axis {axis!r}; expected one of {AXES}") from None
    axis = int(axis)
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    return axis


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Integer phase label per voxel."""

    labels: np.ndarray
    n_phases: int
    voxel_size_um: float | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise VolumeError(f"labels must be a non-empty 3D array, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise VolumeError(f"labels must be integers, got dtype {labels.dtype}")
        if not 2 <= int(self.n_phases) <= 256:
            raise VolumeError(f"n_phases must be in [2, 256] (uint8 labels), got {self.n_phases}")
        if self.voxel_size_um is not None and not self.voxel_size_um > 0:
            raise VolumeError(f"voxel_size_um must be positive, got {self.voxel_size_um}")
        bad = (labels < 0) | (labels >= self.n_phases)
        if bad.any():
            idx = np.argwhere(bad)[0]
            raise InvalidLabelError(idx, labels[tuple(idx)], self.n_phases)
        object.__setattr__(self, "labels", _frozen(labels.astype(np.uint8)))
        object.__setattr__(self, "n_phases", int(self.n_phases))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return (
            self.n_phases == other.n_phases
            and self.voxel_size_um == other.voxel_size_um
            and np.array_equal(self.labels, other.labels)
        )


def _check_simplex(values: np.ndarray, what: str):
    if values.size and (values.min() < 0 or values.max() > 1):
        raise VolumeError(f"{what} values must lie in [0, 1]")
    sums = values.sum(axis=0, dtype=np.float64)
    if sums.size and np.abs(sums - 1).max() > SUM_TOL:
        raise VolumeError(f"{what} channel sums deviate from 1 by {np.abs(sums - 1).max():.3g}")


@dataclass(frozen=True, eq=False)
class PhaseVolume:
    """Per-voxel probability over phases, shape ``(C, H, W, D)``."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 4 or min(values.shape) < 1:
            raise VolumeError(f"values must have shape (C, H, W, D), got {values.shape}")
        _check_simplex(values, "PhaseVolume")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape[1:])

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class Slice2D:
    values: np.ndarray
    phase_typed: bool = True

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3:
            raise VolumeError(f"slice values must have shape (C, A, B), got {values.shape}")
        if self.phase_typed:
            _check_simplex(values, "Slice2D")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(self.values.shape[1:])

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class Patch2D:
    values: np.ndarray
    offset: tuple[int, int] = field(default=(0, 0))

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3 or values.shape[1] != values.shape[2]:
            raise VolumeError(f"patch must be square (C, l, l), got {values.shape}")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def size(self) -> int:
        return self.values.shape[1]


def one_hot_labels(labels: np.ndarray, n_phases: int) -> np.ndarray:
    """Channels-first one-hot float32 array for an integer array of any rank."""
    labels = np.asarray(labels)
    eye = np.eye(n_phases, dtype=np.float32)
    return np.moveaxis(eye[labels], -1, 0)


def one_hot_encode(v: LabelVolume) -> PhaseVolume:
    return PhaseVolume(one_hot_labels(v.labels, v.n_phases))


def decode_argmax(p: PhaseVolume, voxel_size_um: float | None = None) -> LabelVolume:
    # np.argmax returns the first maximal index, which is the tie-break rule
    labels = np.argmax(p.values, axis=0).astype(np.uint8)
    return LabelVolume(labels, max(p.n_channels, 2), voxel_size_um)


def slice_axis(p: PhaseVolume, axis) -> list[Slice2D]:
    ax = axis_index(axis) + 1
    return [Slice2D(np.take(p.values, i, axis=ax)) for i in range(p.values.shape[ax])]


def stack_slices(slices: list[Slice2D], axis) -> PhaseVolume:
    """Inverse of :func:`slice_axis`."""
    ax = axis_index(axis) + 1
    return PhaseVolume(np.stack([s.values for s in slices], axis=ax))


def sample_offsets(shape, l: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """``m`` uniformly drawn top-left corners of ``l x l`` windows in a 2D ``shape``."""
    a, b = shape
    if l > min(a, b):
        raise PatchTooLargeError(f"patch size {l} exceeds image dims {(a, b)}")
    if l < 1 or m < 1:
        raise ValueError(f"need l >= 1 and m >= 1, got l={l}, m={m}")
    rows = rng.integers(0, a - l + 1, size=m)
    cols = rng.integers(0, b - l + 1, size=m)
    return np.stack([rows, cols], axis=1)


def sample_patches(img: Slice2D, l: int, m: int, rng: np.random.Generator) -> list[Patch2D]:
    offsets = sample_offsets(img.dims, l, m, rng)
    return [
        Patch2D(img.values[:, r : r + l, c : c + l], offset=(int(r), int(c)))
        for r, c in offsets
    ]


# --- file I/O -------------------------------------------------------------


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_volume(v: LabelVolume, path) -> Path:
    """Write ``v`` as a raw uint8 payload (x fastest) plus a JSON sidecar.

    Returns the sidecar path.
    """
    path = Path(path)
    meta = {
        "dims": list(v.dims),
        "n_phases": v.n_phases,
        "voxel_size_um": v.voxel_size_um,
        "version": FORMAT_VERSION,
    }
    path.write_bytes(v.labels.astype("<u1").tobytes(order="F"))
    side = sidecar_path(path)
    side.write_text(json.dumps(meta, indent=2) + "\n")
    return side


def load_volume(path) -> LabelVolume:
    path = Path(path)
    side = sidecar_path(path)
    try:
        meta = json.loads(side.read_text())
    except json.JSONDecodeError as e:
        raise VolumeFormatError(f"{side}: malformed header: {e}") from None
    if not isinstance(meta, dict):
        raise VolumeFormatError(f"{side}: header must be a JSON object")
    missing = {"dims", "n_phases", "version"} - meta.keys()
    if missing:
        raise VolumeFormatError(f"{side}: missing keys {sorted(missing)}")
    if meta["version"] != FORMAT_VERSION:
        raise VolumeFormatError(f"{side}: unknown version {meta['version']!r}")
    dims = meta["dims"]
    if (
        not isinstance(dims, list)
        or len(dims) != 3
        or not all(isinstance(d, int) and d >= 1 for d in dims)
    ):
        raise VolumeFormatError(f"{side}: dims must be 3 positive integers, got {dims!r}")
    n_phases = meta["n_phases"]
    if not isinstance(n_phases, int) or not 2 <= n_phases <= 256:
        raise VolumeFormatError(f"{side}: n_phases must be an integer in [2, 256], got {n_phases!r}")
    payload = path.read_bytes()
    expected = int(np.prod(dims))
    if len(payload) != expected:
        raise PayloadSizeError(
            f"{path}: payload has {len(payload)} bytes, dims {dims} need {expected}"
        )
    labels = np.frombuffer(payload, dtype="<u1").reshape(dims, order="F")
    return LabelVolume(labels, n_phases, meta.get("voxel_size_um"))


def phase_palette(n_phases: int) -> np.ndarray:
    """Grey level per phase: evenly spaced from black to white."""
    if n_phases == 3:
        return np.array([0, 128, 255], dtype=np.uint8)
    return np.round(np.linspace(0, 255, n_phases)).astype(np.uint8)


def labels_to_png(labels2d: np.ndarray, n_phases: int, path) -> Path:
    from PIL import Image

    img = phase_palette(n_phases)[np.asarray(labels2d)]
    path = Path(path)
    Image.fromarray(img).save(path)
    return path
