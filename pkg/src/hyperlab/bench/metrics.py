"""Two-sample distances between point clouds."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from ..errors import InputError


def _as2d(a) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(a, dtype=np.float64))
    if t.dim() == 1:
        t = t[:, None]
    if t.dim() != 2:
        raise InputError("samples must be an [n, d] array")
    return t


def _mean_pdist(a: torch.Tensor, b: torch.Tensor, chunk: int = 2048) -> float:
    """Mean Euclidean distance over all pairs (a_i, b_j), chunked to bound memory."""
    total = 0.0
    for i in range(0, a.shape[0], chunk):
        total += torch.cdist(a[i : i + chunk], b).sum().item()
    return total / (a.shape[0] * b.shape[0])


def _order(a: torch.Tensor, b: torch.Tensor):
    """Canonical argument order so that d(A, B) and d(B, A) run identical arithmetic."""
    ka = (a.shape[0], a.numpy().tobytes())
    kb = (b.shape[0], b.numpy().tobytes())
    return (a, b) if ka <= kb else (b, a)


def energy_distance(A, B) -> float:
    """Energy distance between the empirical distributions of A and B.

    V-statistic form 2 E|X - Y| - E|X - X'| - E|Y - Y'| with all pairs
    (including i = j), so identical sample sets give exactly 0 and the value
    is never negative.
    """
    a, b = _as2d(A), _as2d(B)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise InputError("energy distance needs at least 2 samples per set")
    if a.shape[1] != b.shape[1]:
        raise InputError("sample dimensions differ")
    a, b = _order(a, b)
    ed = 2 * _mean_pdist(a, b) - _mean_pdist(a, a) - _mean_pdist(b, b)
    return max(ed, 0.0)


def sliced_wasserstein(A, B, n_proj: int = 64, seed: int = 0) -> float:
    """Sliced 2-Wasserstein distance over ``n_proj`` random unit directions."""
    a, b = _as2d(A), _as2d(B)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise InputError("sliced Wasserstein needs at least 2 samples per set")
    a, b = _order(a, b)
    d = a.shape[1]
    g = torch.Generator().manual_seed(seed)
    dirs = torch.randn(d, n_proj, generator=g, dtype=torch.float64)
    dirs = dirs / dirs.norm(dim=0, keepdim=True)
    pa, _ = torch.sort(a @ dirs, dim=0)
    pb, _ = torch.sort(b @ dirs, dim=0)
    if pa.shape[0] != pb.shape[0]:
        q = torch.linspace(0, 1, max(pa.shape[0], pb.shape[0]), dtype=torch.float64)
        pa = torch.quantile(pa, q, dim=0)
        pb = torch.quantile(pb, q, dim=0)
    return float(torch.sqrt(((pa - pb) ** 2).mean()).item())


@dataclass
class DistMetricReport:
    energy: float
    sliced_w2: float
    n_a: int
    n_b: int
    seeds: list[int] = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def dist_report(A, B, seeds=(), n_proj: int = 64) -> DistMetricReport:
    return DistMetricReport(
        energy=energy_distance(A, B),
        sliced_w2=sliced_wasserstein(A, B, n_proj=n_proj),
        n_a=len(A),
        n_b=len(B),
        seeds=list(seeds),
    )
