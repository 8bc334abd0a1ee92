"""3D transpose-convolutional generator with AdaIN after every hidden
convolution, and the 2D slice critics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .adain import CODE_DIM, DEFAULT_EPS, CodeGenerator, adain_layer_apply
from .volume import Patch2D, PhaseVolume, Slice2D


class ConfigError(ValueError):
    pass


def transpose_conv_size(n: int, k: int, s: int, p: int) -> int:
    return s * (n - 1) + k - 2 * p


def conv_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


@dataclass
class GeneratorConfig:
    """Layer ``i`` maps ``channels[i] -> channels[i + 1]``; ``channels[0]`` is
    the noise depth and ``channels[-1]`` the number of phases."""

    channels: list[int] = field(default_factory=lambda: [64, 512, 256, 128, 64, 3])
    kernels: list[int] = field(default_factory=lambda: [4, 4, 4, 4, 4])
    strides: list[int] = field(default_factory=lambda: [2, 2, 2, 2, 2])
    paddings: list[int] = field(default_factory=lambda: [2, 2, 2, 2, 3])
    seed_size: int = 4
    eps: float = DEFAULT_EPS
    code_dim: int = CODE_DIM
    mlp_width: int = 128
    mlp_depth: int = 3
    noise_low: float = 0.0
    noise_high: float = 1.0

    def __post_init__(self):
        n = self.n_layers
        if n < 1:
            raise ConfigError("generator needs at least one layer")
        for name in ("kernels", "strides", "paddings"):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"generator {name} must have {n} entries")
        if self.n_phases < 2:
            raise ConfigError("last generator layer must output n_phases >= 2 channels")
        if min(self.channels) < 1 or min(self.kernels) < 1 or min(self.strides) < 1:
            raise ConfigError("channels, kernels and strides must be positive")
        if self.noise_high <= self.noise_low:
            raise ConfigError("noise support must be a non-empty interval")
        if min(self.layer_sizes()) < 1:
            raise ConfigError(f"layer arithmetic gives non-positive sizes {self.layer_sizes()}")

    @property
    def n_layers(self) -> int:
        return len(self.channels) - 1

    @property
    def noise_channels(self) -> int:
        return self.channels[0]

    @property
    def n_phases(self) -> int:
        return self.channels[-1]

    def layer_sizes(self) -> list[int]:
        sizes = [self.seed_size]
        for k, s, p in zip(self.kernels, self.strides, self.paddings):
            sizes.append(transpose_conv_size(sizes[-1], k, s, p))
        return sizes

    def output_size(self) -> int:
        return self.layer_sizes()[-1]

    def site_channels(self) -> list[int]:
        return list(self.channels[1:-1])

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CriticConfig:
    """Strided 2D convolutions with LeakyReLU, then an affine map to a scalar."""

    channels: list[int] = field(default_factory=lambda: [3, 64, 128, 256, 512, 512])
    kernels: list[int] = field(default_factory=lambda: [4, 4, 4, 4, 4])
    strides: list[int] = field(default_factory=lambda: [2, 2, 2, 2, 2])
    paddings: list[int] = field(default_factory=lambda: [1, 1, 1, 1, 1])
    patch_size: int = 64
    negative_slope: float = 0.2

    def __post_init__(self):
        n = len(self.channels) - 1
        if n < 1:
            raise ConfigError("critic needs at least one convolution")
        for name in ("kernels", "strides", "paddings"):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"critic {name} must have {n} entries")
        if min(self.layer_sizes()) < 1:
            raise ConfigError(
                f"critic layers reduce a {self.patch_size}px patch to nothing"
            )

    @property
    def in_channels(self) -> int:
        return self.channels[0]

    def layer_sizes(self) -> list[int]:
        sizes = [self.patch_size]
        for k, s, p in zip(self.kernels, self.strides, self.paddings):
            sizes.append(conv_size(sizes[-1], k, s, p))
        return sizes

    def final_size(self) -> int:
        return self.layer_sizes()[-1]

    def to_dict(self) -> dict:
        return asdict(self)


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.convs = nn.ModuleList(
            nn.ConvTranspose3d(cin, cout, k, s, p, bias=False)
            for cin, cout, k, s, p in zip(
                cfg.channels[:-1], cfg.channels[1:], cfg.kernels, cfg.strides, cfg.paddings
            )
        )
        self.code_generator = CodeGenerator(
            cfg.site_channels(), cfg.code_dim, cfg.mlp_width, cfg.mlp_depth
        )

    def sample_noise(self, n: int = 1, generator: torch.Generator | None = None,
                     device=None) -> torch.Tensor:
        cfg = self.cfg
        s = cfg.seed_size
        u = torch.rand((n, cfg.noise_channels, s, s, s), generator=generator,
                       device=device if device is not None else "cpu")
        return cfg.noise_low + (cfg.noise_high - cfg.noise_low) * u

    def styles(self, c: torch.Tensor, n: int):
        styles = self.code_generator(c)
        if styles and styles[0][0].shape[0] != n:
            if styles[0][0].shape[0] != 1:
                raise ValueError(f"{styles[0][0].shape[0]} codes for a batch of {n}")
            styles = [(mu.expand(n, -1), sig.expand(n, -1)) for mu, sig in styles]
        return styles

    def forward(self, z: torch.Tensor, c: torch.Tensor | None = None, styles=None,
                return_features: bool = False):
        """Phase probabilities ``(N, n_phases, L, L, L)``.

        ``styles`` overrides the code generator with explicit per-site
        ``(mu_y, sigma_y)`` pairs.  With ``return_features`` the post-ReLU
        activations of every hidden layer are returned as well.
        """
        cfg = self.cfg
        if z.ndim != 5 or z.shape[1] != cfg.noise_channels:
            raise ValueError(
                f"noise must have shape (N, {cfg.noise_channels}, s, s, s), got {tuple(z.shape)}"
            )
        if styles is None:
            if c is None:
                raise ValueError("either a code vector or explicit styles are required")
            styles = self.styles(c.to(z.dtype), z.shape[0])
        if len(styles) != cfg.n_layers - 1:
            raise ValueError(f"expected {cfg.n_layers - 1} style sites, got {len(styles)}")
        x = z
        feats = []
        for conv, (mu_y, sigma_y) in zip(self.convs[:-1], styles):
            x = F.relu(adain_layer_apply(conv(x), mu_y, sigma_y, cfg.eps))
            feats.append(x)
        out = torch.softmax(self.convs[-1](x), dim=1)
        return (out, feats) if return_features else out


class Critic(nn.Module):
    def __init__(self, cfg: CriticConfig):
        super().__init__()
        self.cfg = cfg
        self.convs = nn.ModuleList(
            nn.Conv2d(cin, cout, k, s, p)
            for cin, cout, k, s, p in zip(
                cfg.channels[:-1], cfg.channels[1:], cfg.kernels, cfg.strides, cfg.paddings
            )
        )
        f = cfg.final_size()
        self.fc = nn.Linear(cfg.channels[-1] * f * f, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        l = self.cfg.patch_size
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels or x.shape[2:] != (l, l):
            raise ValueError(
                f"critic expects (N, {self.cfg.in_channels}, {l}, {l}) input, got {tuple(x.shape)}"
            )
        for conv in self.convs:
            x = F.leaky_relu(conv(x), self.cfg.negative_slope)
        return self.fc(x.flatten(1)).squeeze(1)


def generator_forward(z, c, generator: Generator) -> torch.Tensor:
    return generator(z, c)


def to_phase_volume(out: torch.Tensor) -> PhaseVolume:
    """First sample of a generator batch as a PhaseVolume."""
    return PhaseVolume(out[0].detach().cpu().float().numpy())


def critic_forward(patch, critic: Critic) -> torch.Tensor:
    if isinstance(patch, (Patch2D, Slice2D)):
        patch = torch.from_numpy(np.array(patch.values))
    param = next(critic.parameters())
    x = torch.as_tensor(patch).to(param.dtype)
    single = x.ndim == 3
    score = critic(x[None] if single else x)
    return score[0] if single else score


@dataclass
class LayerCoverage:
    kernel: int
    stride: int
    padding: int
    stride_lt_kernel: bool
    kernel_divisible: bool
    padding_covers_edges: bool
    counts: list[int]
    uniform: bool

    @property
    def passed(self) -> bool:
        return (self.stride_lt_kernel or self.kernel == self.stride) and self.kernel_divisible \
            and self.padding_covers_edges and self.uniform


@dataclass
class CoverageReport:
    layers: list[LayerCoverage]

    @property
    def passed(self) -> bool:
        return all(layer.passed for layer in self.layers)


def contribution_counts(n_in: int, k: int, s: int, p: int) -> np.ndarray:
    """How many kernel taps land on each output site of a 1D transpose
    convolution, after cropping ``p`` sites from each end."""
    full = np.zeros(s * (n_in - 1) + k, dtype=np.int64)
    for i in range(n_in):
        full[i * s : i * s + k] += 1
    return full[p : len(full) - p] if p else full


def check_uniform_coverage(cfg: GeneratorConfig) -> CoverageReport:
    """Flag layers whose transpose convolution leaves uneven (checkerboard)
    coverage.  Counts are per axis; the 3D count is their outer product, so a
    constant 1D profile means a constant 3D one."""
    layers = []
    sizes = cfg.layer_sizes()
    for n_in, k, s, p in zip(sizes[:-1], cfg.kernels, cfg.strides, cfg.paddings):
        counts = contribution_counts(n_in, k, s, p)
        layers.append(LayerCoverage(
            kernel=k, stride=s, padding=p,
            stride_lt_kernel=s < k,
            kernel_divisible=k % s == 0,
            padding_covers_edges=p >= k - s,
            counts=counts.tolist(),
            uniform=len(counts) > 0 and bool((counts == counts[0]).all()),
        ))
    return CoverageReport(layers)
