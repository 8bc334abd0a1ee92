"""Run configuration: one JSON document holding the generator, critic and
training settings, the datasets with their scale parameters, and the output
directory.  Unknown keys are rejected by name before any work starts."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .networks import ConfigError, CriticConfig, GeneratorConfig
from .training import TrainConfig
from .volume import AXES

CONFIG_VERSION = 1
_TOP_KEYS = {"version", "generator", "critic", "train", "datasets", "out_dir"}
_DATASET_KEYS = {"path", "alpha", "axis", "slices"}


@dataclass
class DatasetEntry:
    """A label volume on disk, the slices to train on, and its scale parameter.

    ``slices`` lists indices along ``axis``; ``None`` means the middle slice.
    """

    path: str
    alpha: float
    axis: str = "z"
    slices: list[int] | None = None

    def to_dict(self) -> dict:
        return {"path": self.path, "alpha": self.alpha, "axis": self.axis, "slices": self.slices}


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    datasets: list[DatasetEntry] = field(default_factory=list)
    out_dir: str = "runs/default"
    version: int = CONFIG_VERSION

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "generator": self.generator.to_dict(),
            "critic": self.critic.to_dict(),
            "train": self.train.to_dict(),
            "datasets": [d.to_dict() for d in self.datasets],
            "out_dir": self.out_dir,
        }

    def dump(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path


def _check_keys(obj, allowed, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object, got {type(obj).__name__}")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key {unknown[0]!r}")


def _section(cls, obj, where: str):
    names = {f.name for f in fields(cls) if f.init}
    _check_keys(obj, names, where)
    try:
        return cls(**obj)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def _dataset(obj, i: int, base: Path) -> DatasetEntry:
    where = f"datasets[{i}]"
    _check_keys(obj, _DATASET_KEYS, where)
    for key in ("path", "alpha"):
        if key not in obj:
            raise ConfigError(f"{where}: missing key {key!r}")
    alpha = obj["alpha"]
    if isinstance(alpha, bool) or not isinstance(alpha, (int, float)) or not math.isfinite(alpha):
        raise ConfigError(f"{where}: alpha must be a finite number, got {alpha!r}")
    axis = obj.get("axis", "z")
    if axis not in AXES:
        raise ConfigError(f"{where}: axis must be one of {AXES}, got {axis!r}")
    slices = obj.get("slices")
    if slices is not None:
        if not isinstance(slices, list) or not slices or not all(
            isinstance(s, int) and not isinstance(s, bool) for s in slices
        ):
            raise ConfigError(f"{where}: slices must be a non-empty list of integers")
    path = Path(obj["path"])
    if not path.is_absolute():
        path = base / path
    return DatasetEntry(str(path), float(alpha), axis, slices)


def parse_config(obj: dict, base_dir=".") -> RunConfig:
    """Validate a decoded JSON document.  Relative dataset paths resolve
    against ``base_dir`` (the config file's directory)."""
    _check_keys(obj, _TOP_KEYS, "config")
    if obj.get("version") != CONFIG_VERSION:
        raise ConfigError(f"config: version must be {CONFIG_VERSION}, got {obj.get('version')!r}")
    cfg = RunConfig(
        generator=_section(GeneratorConfig, obj.get("generator", {}), "generator"),
        critic=_section(CriticConfig, obj.get("critic", {}), "critic"),
        train=_section(TrainConfig, obj.get("train", {}), "train"),
        datasets=[_dataset(d, i, Path(base_dir)) for i, d in enumerate(obj.get("datasets", []))],
        out_dir=str(obj.get("out_dir", "runs/default")),
    )
    if cfg.critic.patch_size != cfg.generator.output_size():
        raise ConfigError(
            f"critic.patch_size {cfg.critic.patch_size} must equal the generator output "
            f"size {cfg.generator.output_size()}"
        )
    if cfg.critic.in_channels != cfg.generator.n_phases:
        raise ConfigError("critic.channels[0] must equal generator.channels[-1] (phases)")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    return parse_config(obj, path.parent)


def smoke_config(out_dir="runs/smoke", datasets=None, gen_steps: int = 200) -> RunConfig:
    """Reduced 32-voxel model that trains on one CPU core in minutes.

    The critics learn five times faster than the generator and each dataset is
    held for 20 consecutive steps.  With the default equal rates and plain
    round-robin the small model learns to ignore the code within a few hundred
    steps.
    """
    return RunConfig(
        generator=GeneratorConfig(channels=[16, 64, 32, 16, 3], kernels=[4] * 4,
                                  strides=[2] * 4, paddings=[2, 2, 2, 3]),
        critic=CriticConfig(channels=[3, 16, 32, 64, 64], kernels=[4] * 4, strides=[2] * 4,
                            paddings=[1] * 4, patch_size=32),
        train=TrainConfig(gen_steps=gen_steps, checkpoint_interval=max(1, gen_steps // 2),
                          lr_g=2e-4, lr_c=1e-3, dataset_block=20),
        datasets=list(datasets or []),
        out_dir=str(out_dir),
    )
