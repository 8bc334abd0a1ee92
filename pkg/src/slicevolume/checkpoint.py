"""Checkpoint archive: a zip holding ``meta.json`` plus one ``.npy`` entry per
array.  Weights and optimiser moments are little-endian float32.  Entries
carry a fixed timestamp so identical states give identical bytes."""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .networks import CriticConfig, GeneratorConfig
from .training import Models, TrainConfig, TrainRNG
from .volume import AXES

CHECKPOINT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def _npy_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def _weights(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype("<f4") for k, v in module.state_dict().items()}


def _opt_arrays(opt: torch.optim.Optimizer) -> tuple[dict, list]:
    sd = opt.state_dict()
    arrays = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            a = torch.as_tensor(val).detach().cpu().numpy().astype("<f4")
            if key == "step":
                # a reloaded Adam keeps its step counter as shape (1,); store a scalar either way
                a = a.reshape(())
            arrays[f"{idx}/{key}"] = a
    return arrays, sd["param_groups"]


def _groups(models: Models):
    groups = {"generator": models.generator}
    for a, c in zip(AXES, models.critics):
        groups[f"critic_{a}"] = c
    return groups


def _optimizers(models: Models):
    opts = {"opt_g": models.opt_g}
    for a, o in zip(AXES, models.opt_c):
        opts[f"opt_c_{a}"] = o
    return opts


def save_checkpoint(models: Models, rng: TrainRNG, path) -> Path:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    gen_w = _weights(models.generator)
    for k, v in gen_w.items():
        # the code generator is stored as its own weight set
        if k.startswith("code_generator."):
            arrays[f"code_generator/{k[len('code_generator.'):]}"] = v
        else:
            arrays[f"generator/{k}"] = v
    for a, c in zip(AXES, models.critics):
        for k, v in _weights(c).items():
            arrays[f"critic_{a}/{k}"] = v
    opt_groups = {}
    for name, opt in _optimizers(models).items():
        arr, groups = _opt_arrays(opt)
        opt_groups[name] = groups
        for k, v in arr.items():
            arrays[f"{name}/{k}"] = v
    rng_state = rng.get_state()
    arrays["rng/torch"] = rng_state["torch"].astype(np.uint8)
    meta = {
        "version": CHECKPOINT_VERSION,
        "step": models.step,
        "config": {
            "generator": models.gen_cfg.to_dict(),
            "critic": models.critic_cfg.to_dict(),
            "train": models.train_cfg.to_dict(),
        },
        "optimizers": opt_groups,
        "rng": {"numpy": rng_state["numpy"]},
        "arrays": {k: {"shape": list(v.shape), "dtype": v.dtype.str} for k, v in arrays.items()},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr(zipfile.ZipInfo("meta.json", _EPOCH), json.dumps(meta, indent=1, sort_keys=True))
        for k in sorted(arrays):
            info = zipfile.ZipInfo(f"arrays/{k}.npy", _EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, _npy_bytes(arrays[k]))
    tmp.replace(path)
    return path


def read_archive(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            arrays = {}
            for k in meta["arrays"]:
                with zf.open(f"arrays/{k}.npy") as fh:
                    arrays[k] = np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, ValueError) as e:
        raise CheckpointError(f"{path}: not a valid checkpoint: {e}") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
    return meta, arrays


def _state_dict(arrays, prefix):
    return {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix)}


def _load_opt(opt, name, meta, arrays):
    state: dict[int, dict] = {}
    prefix = f"{name}/"
    for k, v in arrays.items():
        if not k.startswith(prefix):
            continue
        idx, key = k[len(prefix):].split("/", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(v.copy())
    opt.load_state_dict({"state": state, "param_groups": meta["optimizers"][name]})


def load_checkpoint(path, device=None, train_cfg: TrainConfig | None = None):
    """Rebuild models and optimisers; returns ``(models, rng_state)``.

    ``train_cfg`` may replace the stored training config (e.g. a longer
    ``gen_steps`` when resuming); learning rates come from the stored
    optimiser state.
    """
    meta, arrays = read_archive(path)
    try:
        cfg = meta["config"]
        gen_cfg = GeneratorConfig(**cfg["generator"])
        critic_cfg = CriticConfig(**cfg["critic"])
        tcfg = train_cfg or TrainConfig(**cfg["train"])
        models = Models(gen_cfg, critic_cfg, tcfg, device)
        gen_sd = _state_dict(arrays, "generator/")
        gen_sd.update({f"code_generator.{k}": v
                       for k, v in _state_dict(arrays, "code_generator/").items()})
        models.generator.load_state_dict(gen_sd)
        for a, c in zip(AXES, models.critics):
            c.load_state_dict(_state_dict(arrays, f"critic_{a}/"))
        for name, opt in _optimizers(models).items():
            _load_opt(opt, name, meta, arrays)
    except (KeyError, TypeError, RuntimeError, ValueError) as e:
        raise CheckpointError(f"{path}: cannot restore models: {e}") from None
    models.step = int(meta["step"])
    rng_state = {"numpy": meta["rng"]["numpy"], "torch": arrays["rng/torch"]}
    return models, rng_state
