"""Stage 2: trajectory segmented consistency distillation, adversarial loss only.

The flow is cut into three segments on the shifted time axis. The student
learns to jump from any t to the lower boundary of its segment in one Euler
step; a multi-head discriminator compares those jumps with the teacher ODE
integrated over the same interval. There is no regression term.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..checkpoint import StageCheckpoint, child_ancestors, module_tensors, require_parent
from ..errors import ConfigError, InputError, TrainingError
from ..flow.core import (
    FlowNet,
    FlowNetConfig,
    GuidanceCondition,
    interpolate,
    load_flow,
    shift_time,
    spec_of,
    time_grid,
    velocity_fn,
)
from ..flow.data import sample_mixture


class SegmentGrid:
    """Boundaries of ``n`` equal segments of the unshifted axis, mapped through the shift.

    A time equal to an interior boundary belongs to the segment below it, so
    segment k covers (b[k+1], b[k]]. t = 0 is assigned to the last segment
    with a zero-length jump.
    """

    def __init__(self, n_segments: int = 3, shift: float = 3.0):
        if n_segments < 1:
            raise ConfigError("need at least one segment")
        self.n = n_segments
        self.shift = shift
        self.boundaries = time_grid(n_segments, shift)

    def index(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if ((t < 0) | (t > 1)).any():
            raise InputError("t must lie in [0, 1]")
        inner = self.boundaries[1:-1]
        return (t[..., None] <= inner).sum(-1)

    def lower(self, t) -> np.ndarray:
        return self.boundaries[self.index(t) + 1]

    def upper(self, t) -> np.ndarray:
        return self.boundaries[self.index(t)]


def consistency_jump(model_or_fn, x: torch.Tensor, t, g: GuidanceCondition | None, grid: SegmentGrid):
    """One Euler step from t to the lower boundary of t's segment. Returns (x_lo, lo)."""
    t = torch.as_tensor(t, dtype=x.dtype)
    if t.dim() == 0:
        t = t.expand(x.shape[0])
    lo = torch.from_numpy(grid.lower(t.detach().numpy())).to(x.dtype)
    v_fn = velocity_fn(model_or_fn, g) if isinstance(model_or_fn, FlowNet) else model_or_fn
    v = v_fn(x, t)
    return x - (t - lo)[:, None] * v, lo


class RandomFeatures(nn.Module):
    """Frozen random Fourier feature map sqrt(2/m) cos(x W + b)."""

    def __init__(self, in_dim: int, width: int = 64, scale: float = 1.0, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.register_buffer("W", torch.randn(in_dim, width, generator=g) * scale)
        self.register_buffer("b", 2 * np.pi * torch.rand(width, generator=g))
        self.width = width

    def forward(self, x):
        return (2.0 / self.width) ** 0.5 * torch.cos(x @ self.W + self.b)


class MultiHeadDiscriminator(nn.Module):
    """Conditional MLP backbone with one real/fake head per backbone depth.

    The backbone is a FlowNet trunk (time and class embeddings enter exactly
    as in the generator). Heads are zero-initialised, so a fresh
    discriminator outputs 0 for every input.
    """

    def __init__(self, backbone: FlowNet, heads: int = 3, feature_map: nn.Module | None = None):
        super().__init__()
        depth = backbone.cfg.depth
        if not 1 <= heads <= depth + 1:
            raise ConfigError(f"heads must be in [1, {depth + 1}] for a depth-{depth} backbone")
        self.backbone = backbone
        self.feature_map = feature_map
        if feature_map is not None:
            for p in feature_map.parameters():
                p.requires_grad_(False)
        self.depths = list(range(depth + 1 - heads, depth + 1))
        self.heads = nn.ModuleList(nn.Linear(backbone.cfg.hidden, 1) for _ in range(heads))
        for h in self.heads:
            nn.init.zeros_(h.weight)
            nn.init.zeros_(h.bias)

    @classmethod
    def from_flow(cls, ckpt: StageCheckpoint, heads: int = 3, feature_map: nn.Module | None = None):
        """Backbone copied from a trained flow network (trainable from there on)."""
        net = FlowNetConfig(**{**ckpt.config["net"], "guidance_embed": False})
        if feature_map is not None:
            net = FlowNetConfig(**{**asdict(net), "dim": feature_map.width})
        backbone = FlowNet(net)
        if feature_map is None:
            ckpt.load_into(backbone, strict=False)
        return cls(backbone, heads, feature_map)

    def forward(self, x, t, c) -> torch.Tensor:
        if self.feature_map is not None:
            x = self.feature_map(x)
        feats = self.backbone.features(x, t, c)
        return torch.cat([h(F.silu(feats[d])) for h, d in zip(self.heads, self.depths)], dim=-1)


def discriminate(d: MultiHeadDiscriminator, x, t, c) -> torch.Tensor:
    """Per-head logits [n, H]."""
    return d(x, t, c)


def d_loss_nonsat(real_logits, fake_logits):
    """Logistic discriminator loss, summed over heads, mean over the batch."""
    return (F.softplus(-real_logits) + F.softplus(fake_logits)).sum(-1).mean()


def g_loss_nonsat(fake_logits):
    return F.softplus(-fake_logits).sum(-1).mean()


def discriminator_accuracy(d: MultiHeadDiscriminator, real, fake, t, c) -> float:
    """Balanced accuracy of the head-summed logit, with logit >= 0 read as "real"."""
    with torch.no_grad():
        r = d(real, t, c).sum(-1) >= 0
        f = d(fake, t, c).sum(-1) < 0
    return 0.5 * (r.float().mean().item() + f.float().mean().item())


def spread(x: torch.Tensor) -> float:
    return float(x.std(0).mean())


class CollapseGuard:
    """Abort when generated spread stays below ``ratio`` of data spread for ``patience`` steps."""

    def __init__(self, ratio: float = 0.01, patience: int = 500):
        self.ratio, self.patience = ratio, patience
        self.run = 0

    def update(self, fs: float, rs: float, step: int) -> None:
        self.run = self.run + 1 if fs < self.ratio * rs else 0
        if self.run >= self.patience:
            raise TrainingError(
                f"mode collapse: generated spread {fs:.3g} < {self.ratio:g} x data spread {rs:.3g} "
                f"for {self.patience} steps",
                step,
            )


@dataclass
class TscdConfig:
    steps: int = 1500
    batch: int = 256
    lr_g: float = 1e-4
    lr_d: float = 1e-3
    heads: int = 3
    n_segments: int = 3
    shift: float = 3.0
    teacher_substeps: int = 8
    w_text: float = 1.0
    collapse_ratio: float = 0.01
    collapse_patience: int = 500
    log_every: int = 100


def teacher_boundary(teacher: FlowNet, x, t, lo, g: GuidanceCondition, substeps: int):
    """Teacher ODE from per-row t to per-row lo with ``substeps`` equal Euler steps."""
    v_fn = velocity_fn(teacher, g)
    dt = (t - lo) / substeps
    cur = t.clone()
    with torch.no_grad():
        for _ in range(substeps):
            x = x - dt[:, None] * v_fn(x, cur)
            cur = cur - dt
    return x


def sample_times(n: int, rng: np.random.Generator, shift: float) -> torch.Tensor:
    """t on the shifted schedule, in (0, 1]."""
    u = 1.0 - rng.random(n)
    return torch.from_numpy(shift_time(u, shift)).float()


def train_tscd(
    student_ckpt: StageCheckpoint,
    teacher_ckpt: StageCheckpoint,
    seed: int,
    cfg: TscdConfig | None = None,
) -> StageCheckpoint:
    require_parent("tscd", student_ckpt)
    cfg = cfg or TscdConfig()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    spec = spec_of(teacher_ckpt)
    teacher = load_flow(teacher_ckpt)
    for p in teacher.parameters():
        p.requires_grad_(False)
    student = load_flow(student_ckpt)
    student.train()
    disc = MultiHeadDiscriminator.from_flow(teacher_ckpt, cfg.heads)
    grid = SegmentGrid(cfg.n_segments, cfg.shift)
    opt_g = torch.optim.Adam(student.parameters(), lr=cfg.lr_g, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_d, betas=(0.5, 0.999))
    guard = CollapseGuard(cfg.collapse_ratio, cfg.collapse_patience)

    losses = {"adv_d": [], "adv_g": []}
    win = {"adv_d": [], "adv_g": []}
    segment_counts = set()
    for step in range(cfg.steps):
        b = sample_mixture(spec, cfg.batch, rng)
        xT = torch.from_numpy(rng.standard_normal((cfg.batch, 2))).float()
        t = sample_times(cfg.batch, rng, cfg.shift)
        xt = interpolate(b.x, xT, t)
        g = GuidanceCondition(b.label, w_text=cfg.w_text)
        lo = torch.from_numpy(grid.lower(t.numpy())).float()
        real = teacher_boundary(teacher, xt, t, lo, g, cfg.teacher_substeps)
        fake, _ = consistency_jump(student, xt, t, g, grid)
        segment_counts.add(grid.n)

        ld = d_loss_nonsat(disc(real, lo, b.label), disc(fake.detach(), lo, b.label))
        opt_d.zero_grad()
        ld.backward()
        opt_d.step()

        lg = g_loss_nonsat(disc(fake, lo, b.label))
        if not (torch.isfinite(ld) and torch.isfinite(lg)):
            raise TrainingError("non-finite adversarial loss", step)
        opt_g.zero_grad()
        lg.backward()
        opt_g.step()
        guard.update(spread(fake.detach()), spread(real), step)

        win["adv_d"].append(ld.item())
        win["adv_g"].append(lg.item())
        if len(win["adv_d"]) == cfg.log_every:
            for k in losses:
                losses[k].append(float(np.mean(win[k])))
                win[k] = []
    student.eval()
    return StageCheckpoint(
        stage="tscd",
        tensors=module_tensors(student),
        config={"net": asdict(student.cfg), "spec": asdict(spec), "distill": asdict(cfg)},
        seed=seed,
        ancestors=child_ancestors(student_ckpt),
        metrics={"losses": losses, "segment_counts": sorted(segment_counts)},
        extra={"boundaries": grid.boundaries.tolist(), "heads": cfg.heads},
    )
