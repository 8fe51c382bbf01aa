"""Shared evaluation protocol for flow stages.

Generation mode, labels uniform over modes, text scale 1, compared against
fresh mixture draws. Noise, labels and reference data all come from one
seeded generator, so paired comparisons across stages see the same x_T.
"""

from __future__ import annotations

import numpy as np
import torch

from ..checkpoint import StageCheckpoint
from ..flow.core import FlowNet, GuidanceCondition, euler_sample, load_flow, spec_of
from ..flow.data import MixtureSpec, sample_mixture
from .metrics import DistMetricReport, dist_report, energy_distance
from .nfe import STAGE_NFE


def protocol_inputs(spec: MixtureSpec, n: int, seed: int):
    rng = np.random.default_rng(seed)
    xT = torch.from_numpy(rng.standard_normal((n, spec.dim))).float()
    labels = torch.from_numpy(rng.integers(spec.n_modes, size=n))
    return xT, labels


def heldout(spec: MixtureSpec, n: int, seed: int) -> np.ndarray:
    return sample_mixture(spec, n, np.random.default_rng(10_000_019 + seed)).x.numpy()


def generate(model: FlowNet, spec: MixtureSpec, n: int, seed: int, nfe: int, shift: float = 3.0, w_text: float = 1.0):
    xT, labels = protocol_inputs(spec, n, seed)
    traj = euler_sample(model, xT, nfe, shift, GuidanceCondition(labels, w_text=w_text))
    return traj.x_0.numpy(), labels.numpy(), traj


def stage_nfe(ckpt: StageCheckpoint) -> int:
    return int(ckpt.extra.get("nfe", STAGE_NFE[ckpt.stage]))


def distance_to_data(ckpt: StageCheckpoint, n: int, seed: int, nfe: int | None = None, shift: float = 3.0) -> float:
    spec = spec_of(ckpt)
    x, _, _ = generate(load_flow(ckpt), spec, n, seed, nfe or stage_nfe(ckpt), shift)
    return energy_distance(x, heldout(spec, n, seed))


def noise_baseline(spec: MixtureSpec, n: int, seed: int) -> float:
    xT, _ = protocol_inputs(spec, n, seed)
    return energy_distance(xT.numpy(), heldout(spec, n, seed))


def stage_report(ckpt: StageCheckpoint, n: int, seed: int, against: np.ndarray, nfe: int | None = None, shift: float = 3.0) -> DistMetricReport:
    spec = spec_of(ckpt)
    x, _, _ = generate(load_flow(ckpt), spec, n, seed, nfe or stage_nfe(ckpt), shift)
    return dist_report(x, against, seeds=[seed])
