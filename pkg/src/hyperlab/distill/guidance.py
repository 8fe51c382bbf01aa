"""Stage 1: fold classifier-free guidance into one forward pass.

The student is the teacher network plus two scale encoders (same
architecture as the timestep encoder) whose outputs are added to the time
embedding. It regresses the teacher's guided velocity at random scales.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from ..checkpoint import StageCheckpoint, child_ancestors, module_tensors, require_parent
from ..errors import InputError, TrainingError
from ..flow.core import (
    FlowNet,
    FlowNetConfig,
    GuidanceCondition,
    cfg_velocity,
    euler_sample,
    interpolate,
    load_flow,
    shift_time,
    spec_of,
    student_velocity,
)
from ..flow.data import MixtureSpec, sample_edits, sample_mixture


@dataclass
class CfgDistillConfig:
    steps: int = 3000
    batch: int = 512
    lr: float = 1e-3
    shift: float = 3.0
    w_text_range: tuple[float, float] = (1.0, 5.0)
    w_img_range: tuple[float, float] = (1.0, 2.5)
    edit_fraction: float = 0.5
    interval: tuple[float, float] = (0.4, 1.0)
    log_every: int = 500


def sample_scales(n: int, rng: np.random.Generator, lo: float, hi: float) -> torch.Tensor:
    return torch.from_numpy(rng.uniform(lo, hi, size=n)).float()


def student_from_teacher(teacher_ckpt: StageCheckpoint) -> FlowNet:
    """Teacher weights plus zeroed scale encoders: starts as the conditional teacher."""
    net = FlowNetConfig(**{**teacher_ckpt.config["net"], "guidance_embed": True})
    student = FlowNet(net)
    teacher_ckpt.load_into(student, strict=False)
    student.zero_guidance_encoders()
    return student


def _targets(teacher: FlowNet, student: FlowNet, xt, t, label, src, wt, wi, interval):
    """Teacher guided velocity and student prediction for a generation or editing block."""
    if src is None:
        g = GuidanceCondition(label, w_text=wt, mode="gen")
    else:
        g = GuidanceCondition(label, w_text=wt, w_img=wi, src=src, mode="edit", interval=interval)
    with torch.no_grad():
        target = cfg_velocity(teacher, xt, t, g)
    return target, student_velocity(student, xt, t, g)


def distill_cfg(teacher_ckpt: StageCheckpoint | None, seed: int, cfg: CfgDistillConfig | None = None) -> StageCheckpoint:
    if teacher_ckpt is None:
        raise InputError("guidance distillation needs a trained teacher")
    require_parent("cfg", teacher_ckpt)
    cfg = cfg or CfgDistillConfig()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    spec = spec_of(teacher_ckpt)
    teacher = load_flow(teacher_ckpt)
    for p in teacher.parameters():
        p.requires_grad_(False)
    student = student_from_teacher(teacher_ckpt)
    opt = torch.optim.Adam(student.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.steps)

    n_edit = int(round(cfg.batch * cfg.edit_fraction))
    n_gen = cfg.batch - n_edit
    curve, window = [], []
    for step in range(cfg.steps):
        loss = 0.0
        for n, edit in ((n_gen, False), (n_edit, True)):
            if n == 0:
                continue
            if edit:
                b = sample_edits(spec, n, rng)
                src = b.src
                wi = sample_scales(n, rng, *cfg.w_img_range)
            else:
                b = sample_mixture(spec, n, rng)
                src = wi = None
            wt = sample_scales(n, rng, *cfg.w_text_range)
            t = shift_time(torch.from_numpy(rng.random(n)).float(), cfg.shift)
            xT = torch.from_numpy(rng.standard_normal((n, 2))).float()
            xt = interpolate(b.x, xT, t)
            target, pred = _targets(teacher, student, xt, t, b.label, src, wt, wi, cfg.interval)
            loss = loss + ((pred - target) ** 2).sum(-1).sum() / cfg.batch
        if not torch.isfinite(loss):
            raise TrainingError("non-finite guidance distillation loss", step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        window.append(loss.item())
        if len(window) == cfg.log_every:
            curve.append(float(np.mean(window)))
            window = []
    return StageCheckpoint(
        stage="cfg",
        tensors=module_tensors(student),
        config={"net": asdict(student.cfg), "spec": asdict(spec), "distill": asdict(cfg)},
        seed=seed,
        ancestors=child_ancestors(teacher_ckpt),
        metrics={"loss_curve": curve},
    )


# -- controllability ------------------------------------------------------------


def adherence_score(samples, c, spec: MixtureSpec | None = None) -> float:
    """Fraction of samples whose nearest mode centre is the centre of ``c``."""
    spec = spec or MixtureSpec()
    x = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    if len(x) == 0:
        raise InputError("adherence of an empty sample set is undefined")
    c = np.broadcast_to(np.asarray(c), (len(x),))
    if c.min() < 0 or c.max() >= spec.n_modes:
        raise InputError("unknown condition label")
    d = ((x[:, None, :] - spec.centers()[None]) ** 2).sum(-1)
    return float((d.argmin(1) == c).mean())


def guided_samples(model: FlowNet, g: GuidanceCondition, n: int, seed: int, nfe: int = 50, shift: float = 3.0):
    gen = torch.Generator().manual_seed(seed)
    xT = torch.randn(n, 2, generator=gen)
    return euler_sample(model, xT, nfe, shift, g).x_0


def adherence_curve(model: FlowNet, spec: MixtureSpec, w_texts, seed: int, n: int = 2000, nfe: int = 50, shift: float = 3.0):
    labels = torch.from_numpy(np.random.default_rng(seed).integers(spec.n_modes, size=n))
    out = []
    for w in w_texts:
        x = guided_samples(model, GuidanceCondition(labels, w_text=float(w)), n, seed, nfe, shift)
        out.append(adherence_score(x.numpy(), labels.numpy(), spec))
    return out


def edit_distance_curve(
    model: FlowNet,
    spec: MixtureSpec,
    w_imgs,
    seed: int,
    n: int = 2000,
    w_text: float = 3.0,
    nfe: int = 50,
    shift: float = 3.0,
):
    """Mean distance from edited output to its source, one value per image scale."""
    rng = np.random.default_rng(seed)
    src = sample_mixture(spec, n, rng).x
    labels = torch.from_numpy(rng.integers(spec.n_modes, size=n))
    out = []
    for w in w_imgs:
        g = GuidanceCondition(labels, w_text=w_text, w_img=float(w), src=src, mode="edit")
        x = guided_samples(model, g, n, seed, nfe, shift)
        out.append(float((x - src).norm(dim=-1).mean()))
    return out
