"""Low-dimensional conditional datasets standing in for images and prompts.

Generation: an 8-mode ring mixture. A label ("caption") names the true mode
with probability ``1 - label_noise`` and a random other mode otherwise, so
the class-conditional distribution is itself multimodal and guidance has
something to sharpen.

Editing: a source point from the mixture plus an instruction mode ``c``;
the edited point lies a random fraction of the way from the source towards
the instruction's mode centre. Staying close to the source and reaching the
instructed mode pull in opposite directions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import InputError


@dataclass(frozen=True)
class MixtureSpec:
    n_modes: int = 8
    radius: float = 4.0
    mode_scale: float = 0.35
    label_noise: float = 0.4
    edit_jitter: float = 0.05

    @property
    def dim(self) -> int:
        return 2

    def centers(self) -> np.ndarray:
        ang = 2 * np.pi * np.arange(self.n_modes) / self.n_modes
        return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


@dataclass
class GenBatch:
    x: torch.Tensor  # [n, 2]
    label: torch.Tensor  # [n] caption label
    mode: torch.Tensor  # [n] true mode


@dataclass
class EditBatch:
    src: torch.Tensor
    label: torch.Tensor  # instruction mode
    x: torch.Tensor  # edited target


def sample_mixture(spec: MixtureSpec, n: int, rng: np.random.Generator, labels=None) -> GenBatch:
    """Draw ``n`` points. With ``labels`` given, draw from p(x | label)."""
    if n < 1:
        raise InputError("need at least one sample")
    K = spec.n_modes
    if labels is None:
        mode = rng.integers(K, size=n)
        flip = rng.random(n) < spec.label_noise
        other = (mode + rng.integers(1, K, size=n)) % K
        label = np.where(flip, other, mode)
    else:
        label = np.broadcast_to(np.asarray(labels), (n,)).astype(int)
        if label.min() < 0 or label.max() >= K:
            raise InputError("unknown condition label")
        flip = rng.random(n) < spec.label_noise
        other = (label + rng.integers(1, K, size=n)) % K
        mode = np.where(flip, other, label)
    x = spec.centers()[mode] + spec.mode_scale * rng.standard_normal((n, 2))
    return GenBatch(
        x=torch.from_numpy(x).float(),
        label=torch.from_numpy(np.ascontiguousarray(label)).long(),
        mode=torch.from_numpy(mode).long(),
    )


def sample_edits(spec: MixtureSpec, n: int, rng: np.random.Generator, src=None, labels=None) -> EditBatch:
    K = spec.n_modes
    if src is None:
        src = sample_mixture(spec, n, rng).x.numpy().astype(np.float64)
    else:
        src = np.asarray(src, dtype=np.float64).reshape(n, 2)
    label = rng.integers(K, size=n) if labels is None else np.broadcast_to(np.asarray(labels), (n,)).astype(int)
    u = rng.random((n, 1))
    x = src + u * (spec.centers()[label] - src) + spec.edit_jitter * rng.standard_normal((n, 2))
    return EditBatch(
        src=torch.from_numpy(src).float(),
        label=torch.from_numpy(np.ascontiguousarray(label)).long(),
        x=torch.from_numpy(x).float(),
    )


def sample_moons(n: int, rng: np.random.Generator, noise: float = 0.08) -> GenBatch:
    """Two interleaved half circles, labelled by moon, scaled to the ring's size."""
    lab = rng.integers(2, size=n)
    th = np.pi * rng.random(n)
    x = np.where(
        lab[:, None] == 0,
        np.stack([np.cos(th), np.sin(th)], 1),
        np.stack([1 - np.cos(th), 0.5 - np.sin(th)], 1),
    )
    x = 2.5 * (x - np.array([0.5, 0.25])) + noise * rng.standard_normal((n, 2))
    t = torch.from_numpy(lab).long()
    return GenBatch(x=torch.from_numpy(x).float(), label=t, mode=t.clone())
