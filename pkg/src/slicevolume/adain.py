"""Adaptive instance normalisation and the code -> style MLP.

Feature maps are channels-first torch tensors ``(N, C, *spatial)``.  Style
parameters for one AdaIN site are a pair ``(mu_y, sigma_y)`` of ``(N, C)``
tensors.
"""
from __future__ import annotations

import torch
from torch import nn

CODE_DIM = 128
DEFAULT_EPS = 1e-5


def instance_stats(x: torch.Tensor, dim=None):
    """Mean and population standard deviation over ``dim`` (default: all)."""
    x = torch.as_tensor(x)
    if dim is None:
        dim = tuple(range(x.ndim))
    mu = x.mean(dim=dim, keepdim=True)
    sigma = ((x - mu) ** 2).mean(dim=dim, keepdim=True).sqrt()
    return mu, sigma


def adain(x, mu_y, sigma_y, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Re-normalise a single channel to mean ``mu_y`` and std ``sigma_y``."""
    x = torch.as_tensor(x)
    mu, sigma = instance_stats(x)
    return sigma_y * (x - mu) / (sigma + eps) + mu_y


def adain_layer_apply(X: torch.Tensor, mu_y: torch.Tensor, sigma_y: torch.Tensor,
                      eps: float = DEFAULT_EPS) -> torch.Tensor:
    """AdaIN applied to every channel of every sample independently."""
    if X.ndim < 3:
        raise ValueError(f"expected (N, C, *spatial) features, got shape {tuple(X.shape)}")
    n, c = X.shape[:2]
    if mu_y.shape != (n, c) or sigma_y.shape != (n, c):
        raise ValueError(
            f"style parameters {tuple(mu_y.shape)}/{tuple(sigma_y.shape)} do not match "
            f"features with N={n}, C={c}"
        )
    spatial = tuple(range(2, X.ndim))
    mu, sigma = instance_stats(X, spatial)
    view = (n, c) + (1,) * len(spatial)
    return sigma_y.view(view) * (X - mu) / (sigma + eps) + mu_y.view(view)


def make_code(alpha: float, length: int = CODE_DIM, dtype=torch.float32) -> torch.Tensor:
    return torch.full((length,), float(alpha), dtype=dtype)


class CodeGenerator(nn.Module):
    """Shared ReLU trunk with one affine head per AdaIN site.

    Head ``s`` emits ``2 * C_s`` numbers: the first half is ``mu_y``, the
    second ``sigma_y``.
    """

    def __init__(self, site_channels, code_dim: int = CODE_DIM, width: int = 128,
                 depth: int = 3, init_std: float = 0.02):
        super().__init__()
        self.site_channels = [int(c) for c in site_channels]
        self.code_dim = code_dim
        layers = []
        d_in = code_dim
        for _ in range(depth):
            layers += [nn.Linear(d_in, width), nn.ReLU()]
            d_in = width
        self.trunk = nn.Sequential(*layers)
        self.heads = nn.ModuleList(nn.Linear(d_in, 2 * c) for c in self.site_channels)
        self.reset_parameters(init_std)

    def reset_parameters(self, init_std: float = 0.02):
        # Standard uniform init for the trunk.  The random biases matter: with
        # zero biases the trunk is positively homogeneous in alpha, the styles
        # come out proportional across codes, and the next AdaIN cancels the
        # common scale.  Small heads keep the initial styles near (0, 1).
        for m in self.trunk:
            if isinstance(m, nn.Linear):
                m.reset_parameters()
        for head in self.heads:
            nn.init.normal_(head.weight, 0.0, init_std)
            nn.init.zeros_(head.bias)
        with torch.no_grad():
            for head, c in zip(self.heads, self.site_channels):
                head.bias[c:] = 1.0

    def forward(self, c: torch.Tensor):
        if c.ndim == 1:
            c = c.unsqueeze(0)
        if c.shape[-1] != self.code_dim:
            raise ValueError(f"code must have {self.code_dim} entries, got {c.shape[-1]}")
        h = self.trunk(c)
        styles = []
        for head, ch in zip(self.heads, self.site_channels):
            out = head(h)
            styles.append((out[:, :ch], out[:, ch:]))
        return styles


def code_generator_forward(c: torch.Tensor, code_generator: CodeGenerator):
    return code_generator(c)
