"""Adversarial training: every slice of a generated volume is scored by the
critic of its axis against the same number of random real patches."""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .adain import make_code
from .networks import Critic, CriticConfig, Generator, GeneratorConfig
from .volume import AXES, one_hot_labels, sample_offsets

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "axis", "critic_loss", "gp", "gen_loss", "dataset_alpha", "wall_time_s"]
DEVICE_ENV = "SLICEVOLUME_DEVICE"


class DivergenceError(RuntimeError):
    def __init__(self, step, what, value):
        self.step = step
        super().__init__(f"non-finite {what} ({value}) at step {step}")


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gen_steps: int = 1000
    critic_steps: int = 5
    fake_volumes: int = 1
    lr_g: float = 1e-4
    lr_c: float = 1e-4
    betas: tuple[float, float] = (0.0, 0.9)
    gp_lambda: float = 10.0
    seed: int = 0
    device: str | None = None
    deterministic: bool = True
    checkpoint_interval: int = 100
    max_nonfinite: int = 10
    # consecutive generator steps spent on one dataset before moving to the next
    dataset_block: int = 1

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        for name in ("critic_steps", "fake_volumes", "checkpoint_interval", "max_nonfinite",
                     "dataset_block"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.gen_steps < 0:
            raise ValueError("gen_steps must be >= 0")
        if not self.gp_lambda >= 0:
            raise ValueError("gp_lambda must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class Dataset:
    """Real 2D label images sharing ``n_phases``, with a patch size and the
    scale parameter used as this dataset's code."""

    images: list
    n_phases: int
    patch_size: int
    alpha: float
    _onehot: list = field(init=False, repr=False)

    def __post_init__(self):
        if not self.images:
            raise ValueError("dataset needs at least one image")
        if not math.isfinite(self.alpha):
            raise ValueError(f"dataset alpha must be finite, got {self.alpha}")
        imgs = []
        for i, img in enumerate(self.images):
            img = np.asarray(img)
            if img.ndim != 2:
                raise ValueError(f"image {i} must be 2D, got shape {img.shape}")
            if min(img.shape) < self.patch_size:
                raise ValueError(f"image {i} of shape {img.shape} is smaller than patch size {self.patch_size}")
            if img.min() < 0 or img.max() >= self.n_phases:
                raise ValueError(f"image {i} has labels outside [0, {self.n_phases})")
            imgs.append(img)
        self.images = imgs
        self._onehot = [one_hot_labels(img, self.n_phases) for img in imgs]

    def sample(self, m: int, rng: np.random.Generator) -> np.ndarray:
        """``m`` one-hot patches ``(m, n_phases, l, l)``; each draws its image
        uniformly, then its offset uniformly."""
        l = self.patch_size
        which = rng.integers(0, len(self.images), size=m) if len(self.images) > 1 else np.zeros(m, int)
        out = np.empty((m, self.n_phases, l, l), dtype=np.float32)
        for k in np.unique(which):
            idx = np.flatnonzero(which == k)
            offs = sample_offsets(self.images[k].shape, l, len(idx), rng)
            src = self._onehot[k]
            for j, (r, c) in zip(idx, offs):
                out[j] = src[:, r : r + l, c : c + l]
        return out


class TrainRNG:
    """Numpy stream for patch sampling, torch stream for noise and penalty mixing."""

    def __init__(self, seed: int):
        self.np = np.random.default_rng(seed)
        self.torch = torch.Generator().manual_seed(int(seed))

    def get_state(self) -> dict:
        return {"numpy": self.np.bit_generator.state, "torch": self.torch.get_state().numpy()}

    def set_state(self, state: dict):
        self.np.bit_generator.state = state["numpy"]
        self.torch.set_state(torch.from_numpy(np.asarray(state["torch"], dtype=np.uint8)))


def resolve_device(spec: str | None = None) -> torch.device:
    spec = spec or os.environ.get(DEVICE_ENV) or "cpu"
    if spec == "cpu":
        return torch.device("cpu")
    if spec.startswith("gpu"):
        idx = int(spec.split(":", 1)[1]) if ":" in spec else 0
        if not torch.cuda.is_available():
            raise ValueError(f"device {spec!r} requested but no CUDA device is available")
        return torch.device("cuda", idx)
    raise ValueError(f"unknown device {spec!r}; use 'cpu' or 'gpu:N'")


def set_deterministic(flag: bool = True):
    if flag:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
    torch.use_deterministic_algorithms(flag)
    torch.backends.cudnn.benchmark = not flag


class Models:
    """Generator (with its code generator), one critic per axis, optimisers."""

    def __init__(self, gen_cfg: GeneratorConfig, critic_cfg: CriticConfig,
                 train_cfg: TrainConfig, device=None):
        if critic_cfg.patch_size != gen_cfg.output_size():
            raise ValueError(
                f"critic patch size {critic_cfg.patch_size} must equal the generated "
                f"volume edge {gen_cfg.output_size()}"
            )
        if critic_cfg.in_channels != gen_cfg.n_phases:
            raise ValueError("critic input channels must equal the number of phases")
        self.gen_cfg, self.critic_cfg, self.train_cfg = gen_cfg, critic_cfg, train_cfg
        self.device = torch.device(device) if device is not None else torch.device("cpu")
        torch.manual_seed(train_cfg.seed)
        self.generator = Generator(gen_cfg).to(self.device)
        self.critics = nn.ModuleList(Critic(critic_cfg) for _ in AXES).to(self.device)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=train_cfg.lr_g,
                                      betas=train_cfg.betas)
        self.opt_c = [torch.optim.Adam(c.parameters(), lr=train_cfg.lr_c, betas=train_cfg.betas)
                      for c in self.critics]
        self.step = 0


def volume_slices(vol: torch.Tensor, axis: int) -> torch.Tensor:
    """All 2D slices of a ``(B, C, H, W, D)`` batch along spatial ``axis``,
    stacked to ``(B * extent, C, ., .)``."""
    b, c = vol.shape[:2]
    perm = [0, axis + 2, 1] + [2 + a for a in range(3) if a != axis]
    x = vol.permute(*perm)
    return x.reshape(b * x.shape[1], c, *x.shape[3:])


def gradient_penalty(critic: nn.Module, real: torch.Tensor, fake: torch.Tensor,
                     generator: torch.Generator | None = None,
                     create_graph: bool = True) -> torch.Tensor:
    if real.shape != fake.shape:
        raise ValueError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} batches differ")
    eps = torch.rand((real.shape[0],) + (1,) * (real.ndim - 1), generator=generator,
                     dtype=real.dtype).to(real.device)
    u = (eps * real + (1 - eps) * fake).detach().requires_grad_(True)
    (grad,) = torch.autograd.grad(critic(u).sum(), u, create_graph=create_graph)
    return ((grad.flatten(1).norm(dim=1) - 1) ** 2).mean()


def _code_batch(alpha: float, n: int, models: Models) -> torch.Tensor:
    code = make_code(alpha, models.gen_cfg.code_dim).to(models.device)
    return code.expand(n, -1)


def critic_step(dataset: Dataset, models: Models, rng: TrainRNG) -> dict:
    """One update of each axis critic.  Returns pre-update values per axis."""
    cfg = models.train_cfg
    g = models.generator
    n = cfg.fake_volumes
    z = g.sample_noise(n, rng.torch).to(models.device)
    with torch.no_grad():
        fake_vol = g(z, _code_batch(dataset.alpha, n, models))
    out = {}
    for a, axis in enumerate(AXES):
        fake = volume_slices(fake_vol, a)
        real = torch.from_numpy(dataset.sample(fake.shape[0], rng.np)).to(models.device)
        critic = models.critics[a]
        wdist = critic(fake).mean() - critic(real).mean()
        gp = gradient_penalty(critic, real, fake, rng.torch)
        loss = wdist + cfg.gp_lambda * gp
        if not torch.isfinite(loss):
            raise DivergenceError(models.step, f"critic loss on axis {axis}", loss.item())
        opt = models.opt_c[a]
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        out[axis] = {"loss": loss.item(), "gp": gp.item(), "n_fake": fake.shape[0],
                     "n_real": real.shape[0]}
    return out


def generator_step(dataset: Dataset, models: Models, rng: TrainRNG) -> float:
    """Update generator and code generator to raise the critics' scores of the
    slices of a fresh volume, summed over the three axes."""
    cfg = models.train_cfg
    g = models.generator
    n = cfg.fake_volumes
    for c in models.critics:
        c.requires_grad_(False)
    try:
        z = g.sample_noise(n, rng.torch).to(models.device)
        fake_vol = g(z, _code_batch(dataset.alpha, n, models))
        loss = -sum(models.critics[a](volume_slices(fake_vol, a)).mean() for a in range(3))
        if not torch.isfinite(loss):
            raise DivergenceError(models.step, "generator loss", loss.item())
        models.opt_g.zero_grad(set_to_none=True)
        loss.backward()
        models.opt_g.step()
    finally:
        for c in models.critics:
            c.requires_grad_(True)
    return loss.item()


@dataclass
class TrainResult:
    models: Models
    log: list[dict]
    checkpoints: list[Path]


def train(train_cfg: TrainConfig, datasets: list[Dataset], gen_cfg: GeneratorConfig,
          critic_cfg: CriticConfig, out_dir=None, resume=None, log_name="loss_log.csv") -> TrainResult:
    """Round-robin over ``datasets``: each generator step uses one dataset for
    its critic updates and its own update, and the dataset advances every
    ``dataset_block`` steps.  The critics never see the code, so longer blocks
    let them settle on one dataset and hand the generator a sharper per-code
    signal.

    With ``out_dir`` set, checkpoints are written every
    ``checkpoint_interval`` steps and at the end, and the loss log is appended
    to ``<out_dir>/loss_log.csv``.  ``resume`` is a checkpoint path; training
    continues from its step counter up to ``train_cfg.gen_steps``.
    """
    from .checkpoint import load_checkpoint, save_checkpoint

    if not datasets:
        raise ValueError("at least one dataset is required")
    for d in datasets:
        if d.patch_size != critic_cfg.patch_size:
            raise ValueError(f"dataset patch size {d.patch_size} != critic input {critic_cfg.patch_size}")
        if d.n_phases != gen_cfg.n_phases:
            raise ValueError("dataset phases do not match the generator output channels")
    device = resolve_device(train_cfg.device)
    set_deterministic(train_cfg.deterministic)
    rng = TrainRNG(train_cfg.seed)
    if resume is not None:
        models, rng_state = load_checkpoint(resume, device=device, train_cfg=train_cfg)
        rng.set_state(rng_state)
    else:
        models = Models(gen_cfg, critic_cfg, train_cfg, device)

    out_dir = Path(out_dir) if out_dir is not None else None
    writer = None
    fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / log_name
        new = resume is None or not log_path.exists()
        fh = log_path.open("w" if new else "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        if new:
            writer.writeheader()

    rows: list[dict] = []
    ckpts: list[Path] = []
    bad = 0
    t0 = time.perf_counter()
    try:
        while models.step < train_cfg.gen_steps:
            step = models.step
            d = datasets[(step // train_cfg.dataset_block) % len(datasets)]
            try:
                sums = {a: [0.0, 0.0] for a in AXES}
                for _ in range(train_cfg.critic_steps):
                    res = critic_step(d, models, rng)
                    for a in AXES:
                        sums[a][0] += res[a]["loss"]
                        sums[a][1] += res[a]["gp"]
                gen_loss = generator_step(d, models, rng)
                bad = 0
            except DivergenceError as e:
                bad += 1
                log.warning("%s (%d consecutive)", e, bad)
                if bad >= train_cfg.max_nonfinite:
                    raise TrainingAborted(
                        f"training diverged: {bad} consecutive non-finite losses, last at step {step}"
                    ) from e
                models.step += 1
                continue
            wall = time.perf_counter() - t0
            for a in AXES:
                row = {
                    "step": step,
                    "axis": a,
                    "critic_loss": sums[a][0] / train_cfg.critic_steps,
                    "gp": sums[a][1] / train_cfg.critic_steps,
                    "gen_loss": gen_loss,
                    "dataset_alpha": d.alpha,
                    "wall_time_s": round(wall, 3),
                }
                rows.append(row)
                if writer is not None:
                    writer.writerow(row)
            models.step += 1
            if out_dir is not None and (
                models.step % train_cfg.checkpoint_interval == 0 or models.step == train_cfg.gen_steps
            ):
                fh.flush()
                ckpts.append(save_checkpoint(models, rng, out_dir / f"ckpt_{models.step:07d}.zip"))
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(models, rows, ckpts)


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
