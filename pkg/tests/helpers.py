"""Central finite differences for gradient checks."""
import torch


def central_diff(f, x: torch.Tensor, h: float = 1e-4) -> torch.Tensor:
    """d sum(f(x)) / dx, elementwise, by central differences of step ``h``."""
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = f(x).sum().item()
            flat[i] = old - h
            down = f(x).sum().item()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
    return g


def analytic_grad(f, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x).sum(), x)
    return g


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(a.norm().item(), b.norm().item(), 1e-12))
