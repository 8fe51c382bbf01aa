"""Central finite differences against autograd, for small float64 modules."""

from __future__ import annotations

from typing import Callable

import torch

from .errors import ConfigError


def fd_relative_error(
    loss_fn: Callable[[], torch.Tensor],
    params: list[torch.Tensor],
    eps: float = 1e-6,
    max_params: int = 1000,
) -> float:
    """Relative error |g_auto - g_fd| / (|g_auto| + |g_fd|) over all parameters jointly.

    ``loss_fn`` must be deterministic and recompute the loss from ``params``.
    """
    params = [p for p in params if p.requires_grad]
    n = sum(p.numel() for p in params)
    if n > max_params:
        raise ConfigError(f"finite-difference check limited to {max_params} parameters, got {n}")
    if any(p.dtype != torch.float64 for p in params):
        raise ConfigError("finite-difference checks need float64 parameters")
    for p in params:
        p.grad = None
    loss_fn().backward()
    auto = torch.cat([(p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1) for p in params])
    fd = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss_fn().item()
                flat[i] = old - eps
                down = loss_fn().item()
                flat[i] = old
                fd.append((up - down) / (2 * eps))
    fd = torch.tensor(fd, dtype=torch.float64)
    denom = (auto.norm() + fd.norm()).item()
    return 0.0 if denom == 0 else (auto - fd).norm().item() / denom
