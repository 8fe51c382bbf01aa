"""Rectified-flow teacher, guidance combination, timestep shift and Euler sampler.

Time runs from t = 1 (pure noise x_T) to t = 0 (data x_0), with
x_t = (1 - t) x_0 + t x_T and constant velocity v = x_T - x_0.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..checkpoint import StageCheckpoint, module_tensors
from ..errors import ConfigError, InputError, TrainingError
from .data import MixtureSpec, sample_edits, sample_mixture, sample_moons


class SamplerError(TrainingError):
    pass


# -- flow algebra ------------------------------------------------------------


def velocity_target(x0, xT):
    return xT - x0


def interpolate(x0, xT, t):
    t = torch.as_tensor(t, dtype=x0.dtype)
    if t.dim() == 1:
        t = t[:, None]
    return (1 - t) * x0 + t * xT


def x0_from_velocity(xt, t, v):
    t = torch.as_tensor(t, dtype=xt.dtype)
    if t.dim() == 1:
        t = t[:, None]
    return xt - t * v


def shift_time(t, s: float):
    """Flow timestep shift t' = s t / (1 + (s - 1) t); pushes steps towards noise."""
    if s < 1:
        raise ConfigError(f"timestep shift must be >= 1, got {s}")
    if isinstance(t, torch.Tensor):
        return s * t / (1 + (s - 1) * t)
    t = np.asarray(t, dtype=np.float64)
    if ((t < 0) | (t > 1)).any():
        raise InputError("t must lie in [0, 1]")
    out = s * t / (1 + (s - 1) * t)
    return float(out) if out.ndim == 0 else out


def time_grid(nfe: int, shift: float = 1.0) -> np.ndarray:
    """Decreasing grid from 1 to 0 with ``nfe`` steps, warped by ``shift``."""
    if nfe < 1:
        raise ConfigError("nfe must be >= 1")
    u = 1.0 - np.arange(nfe + 1) / nfe
    g = shift_time(u, shift)
    g[0], g[-1] = 1.0, 0.0
    return g


# -- networks ----------------------------------------------------------------


def sinusoidal(t: torch.Tensor, dim: int, scale: float = 1000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    ang = scale * t.reshape(-1, 1) * freqs
    return torch.cat([torch.cos(ang), torch.sin(ang)], dim=-1)


class ScalarEncoder(nn.Module):
    """Sinusoidal features -> 2-layer MLP; the timestep encoder architecture."""

    def __init__(self, hidden: int, freq_dim: int = 32, scale: float = 1000.0):
        super().__init__()
        self.freq_dim, self.scale = freq_dim, scale
        self.lin1 = nn.Linear(freq_dim, hidden)
        self.lin2 = nn.Linear(hidden, hidden)

    def forward(self, t):
        return self.lin2(F.silu(self.lin1(sinusoidal(t, self.freq_dim, self.scale))))


@dataclass(frozen=True)
class FlowNetConfig:
    dim: int = 2
    hidden: int = 128
    depth: int = 3
    n_classes: int = 8
    freq_dim: int = 32
    guidance_embed: bool = False  # stage-1 student: w_text / w_img encoders


class FlowNet(nn.Module):
    """Conditional velocity MLP.

    Conditioning: class label (index ``n_classes`` is the null label), an
    optional editing source point (NaN rows = null source), a task flag and,
    for guidance-distilled students, the two guidance scales. All conditions
    are embedded to ``hidden`` and summed with the time embedding.
    """

    def __init__(self, cfg: FlowNetConfig):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden
        self.x_in = nn.Linear(cfg.dim, h)
        self.t_enc = ScalarEncoder(h, cfg.freq_dim)
        self.c_emb = nn.Embedding(cfg.n_classes + 1, h)
        self.task_emb = nn.Embedding(2, h)
        self.src_in = nn.Linear(cfg.dim, h)
        self.src_null = nn.Parameter(torch.zeros(h))
        self.trunk = nn.ModuleList(nn.Linear(h, h) for _ in range(cfg.depth))
        self.out = nn.Linear(h, cfg.dim)
        if cfg.guidance_embed:
            # scales are embedded raw, like the timestep (1..5 -> scale 1)
            self.wt_enc = ScalarEncoder(h, cfg.freq_dim, scale=1.0)
            self.wi_enc = ScalarEncoder(h, cfg.freq_dim, scale=1.0)
            self.wi_null = nn.Parameter(torch.zeros(h))
        self.evals = 0

    @property
    def null_label(self) -> int:
        return self.cfg.n_classes

    def zero_guidance_encoders(self) -> None:
        for enc in (self.wt_enc, self.wi_enc):
            nn.init.zeros_(enc.lin2.weight)
            nn.init.zeros_(enc.lin2.bias)

    def _cond(self, t, c, src=None, task=None, w_text=None, w_img=None):
        n = t.shape[0]
        h = self.t_enc(t) + self.c_emb(c)
        if src is None:
            h = h + self.src_null
            task = torch.zeros(n, dtype=torch.long) if task is None else task
        else:
            null = torch.isnan(src).any(-1, keepdim=True)
            h = h + torch.where(null, self.src_null, self.src_in(torch.nan_to_num(src)))
            task = torch.ones(n, dtype=torch.long) if task is None else task
        h = h + self.task_emb(task)
        if self.cfg.guidance_embed:
            wt = torch.ones(n, dtype=t.dtype) if w_text is None else w_text
            h = h + self.wt_enc(wt.reshape(-1))
            if w_img is None:
                h = h + self.wi_null
            else:
                wi = w_img.reshape(-1)
                h = h + torch.where(torch.isnan(wi)[:, None], self.wi_null, self.wi_enc(torch.nan_to_num(wi, nan=1.0)))
        return h

    def features(self, x, t, c, src=None, task=None, w_text=None, w_img=None) -> list[torch.Tensor]:
        """Hidden activations after the input layer and after every trunk layer."""
        t = _as_time(t, x)
        c = _as_label(c, x)
        h = self.x_in(x) + self._cond(t, c, src, task, w_text, w_img)
        feats = [h]
        for lin in self.trunk:
            h = h + lin(F.silu(h))
            feats.append(h)
        return feats

    def forward(self, x, t, c, src=None, task=None, w_text=None, w_img=None):
        self.evals += 1
        h = self.features(x, t, c, src, task, w_text, w_img)[-1]
        return self.out(F.silu(h))


def _as_time(t, x):
    t = torch.as_tensor(t, dtype=x.dtype)
    if t.dim() == 0:
        t = t.expand(x.shape[0])
    return t.reshape(-1)


def _as_label(c, x):
    c = torch.as_tensor(c, dtype=torch.long)
    if c.dim() == 0:
        c = c.expand(x.shape[0])
    return c


# -- guidance ----------------------------------------------------------------


@dataclass
class GuidanceCondition:
    """Condition + guidance scales for one batch.

    ``mode`` is "gen" (text guidance only) or "edit" (dual text/image guidance,
    only inside ``interval``; outside it the fully conditional branch is used).
    """

    c: torch.Tensor | int
    w_text: float | torch.Tensor = 1.0
    w_img: float | torch.Tensor = 1.0
    src: torch.Tensor | None = None
    mode: str = "gen"
    interval: tuple[float, float] = (0.4, 1.0)

    def __post_init__(self):
        if self.mode not in ("gen", "edit"):
            raise InputError(f"unknown guidance mode {self.mode!r}")
        if self.mode == "edit" and self.src is None:
            raise InputError("editing guidance needs a source condition")
        if torch.as_tensor(self.w_text).min() < 1 or torch.as_tensor(self.w_img).min() < 1:
            raise ConfigError("guidance scales must be >= 1")
        lo, hi = self.interval
        if not 0 <= lo < hi <= 1:
            raise ConfigError("cfg interval must satisfy 0 <= lo < hi <= 1")


def _col(w, x):
    w = torch.as_tensor(w, dtype=x.dtype)
    return w.reshape(-1, 1) if w.dim() else w


def cfg_velocity(model: FlowNet, x, t, g: GuidanceCondition):
    """Classifier-free guided velocity of a teacher that accepts null conditions.

    Written as cond + (w - 1) * (cond - uncond) so scale 1 returns the
    conditional branch bit-exactly.
    """
    t = _as_time(t, x)
    c = _as_label(g.c, x)
    null_c = torch.full_like(c, model.null_label)
    wt = _col(g.w_text, x)
    if g.mode == "gen":
        v_c = model(x, t, c)
        if torch.all(torch.as_tensor(g.w_text) == 1):
            return v_c
        v_u = model(x, t, null_c)
        return v_c + (wt - 1) * (v_c - v_u)
    src = g.src
    null_src = torch.full_like(src, float("nan"))
    v_cs = model(x, t, c, src)
    lo, hi = g.interval
    inside = ((t >= lo) & (t <= hi)).reshape(-1, 1)
    if not inside.any():
        return v_cs
    wi = _col(g.w_img, x)
    v_us = model(x, t, null_c, src)
    v_uu = model(x, t, null_c, null_src, task=torch.ones_like(c))
    guided = v_cs + (wt - 1) * (v_cs - v_us) + (wi - 1) * (v_us - v_uu)
    return torch.where(inside, guided, v_cs)


def _per_row(w, x):
    w = torch.as_tensor(w, dtype=x.dtype)
    return w.expand(x.shape[0]) if w.dim() == 0 else w.reshape(-1)


def student_velocity(model: FlowNet, x, t, g: GuidanceCondition):
    """Single forward pass of a guidance-embedded student."""
    t = _as_time(t, x)
    c = _as_label(g.c, x)
    wt = _per_row(g.w_text, x)
    if g.mode == "gen":
        return model(x, t, c, w_text=wt)
    return model(x, t, c, g.src, w_text=wt, w_img=_per_row(g.w_img, x))


def velocity_fn(model: FlowNet, g: GuidanceCondition) -> Callable:
    """Bind a model and guidance into v(x, t): CFG for teachers, one pass for students."""
    if model.cfg.guidance_embed:
        return lambda x, t: student_velocity(model, x, t, g)
    return lambda x, t: cfg_velocity(model, x, t, g)


# -- sampler -----------------------------------------------------------------


@dataclass
class FlowTrajectory:
    states: torch.Tensor  # [nfe + 1, n, d], states[0] = x_T
    times: np.ndarray  # [nfe + 1], strictly decreasing from 1 to 0
    nfe: int
    model_evals: int = 0
    guidance: GuidanceCondition | None = None
    tag: int = -1  # caller-assigned identity, used for reuse bookkeeping

    def __post_init__(self):
        if len(self.states) != self.nfe + 1 or len(self.times) != self.nfe + 1:
            raise InputError("trajectory length must be nfe + 1")
        if not np.all(np.diff(self.times) < 0):
            raise InputError("trajectory times must be strictly decreasing")

    @property
    def x_T(self):
        return self.states[0]

    @property
    def x_0(self):
        return self.states[-1]


def integrate(v_fn: Callable, x, times, start: int = 0):
    """Euler-integrate from ``times[start]`` to the end of ``times``. Keeps autograd."""
    states = [x]
    for i in range(start, len(times) - 1):
        v = v_fn(x, float(times[i]))
        x = x - float(times[i] - times[i + 1]) * v
        if not torch.isfinite(x).all():
            raise SamplerError("non-finite sampler state", i)
        states.append(x)
    return states


def euler_sample(v_fn: Callable, x_T: torch.Tensor, nfe: int, shift: float = 1.0, guidance=None) -> FlowTrajectory:
    """Sample with ``nfe`` Euler steps on the shift-warped grid, storing every state.

    ``v_fn`` is a velocity callable, or a FlowNet (then ``guidance`` is required).
    """
    if isinstance(v_fn, FlowNet):
        if guidance is None:
            raise InputError("a guidance condition is required to sample a FlowNet")
        model = v_fn
        v_fn = velocity_fn(model, guidance)
        before = model.evals
    else:
        model = None
    times = time_grid(nfe, shift)
    with torch.no_grad():
        states = integrate(v_fn, x_T, times)
    evals = (model.evals - before) if model is not None else nfe
    return FlowTrajectory(torch.stack(states), times, nfe, evals, guidance)


def sampler_signature(shift: float) -> str:
    """Content hash identifying the sampler (function and grid warp), independent of nfe."""
    desc = {"fn": f"{euler_sample.__module__}.{euler_sample.__qualname__}", "update": "x - dt * v", "shift": float(shift)}
    return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()


# -- teacher training ---------------------------------------------------------


@dataclass
class TeacherTrainConfig:
    data: str = "mixture"  # "mixture" | "moons"
    steps: int = 4000
    batch: int = 512
    lr: float = 2e-3
    cond_dropout: float = 0.1
    edit_fraction: float = 0.5
    log_every: int = 500
    spec: dict = field(default_factory=lambda: asdict(MixtureSpec()))
    net: dict = field(default_factory=lambda: asdict(FlowNetConfig()))


def teacher_batch(tc: TeacherTrainConfig, rng: np.random.Generator, spec: MixtureSpec, n_classes: int):
    """x_0, label, source (NaN = none), task for one mixed generation/editing batch."""
    n = tc.batch
    if tc.data == "moons":
        b = sample_moons(n, rng)
        return b.x, b.label, torch.full((n, 2), float("nan")), torch.zeros(n, dtype=torch.long)
    n_edit = int(round(n * tc.edit_fraction))
    g = sample_mixture(spec, n - n_edit, rng)
    e = sample_edits(spec, n_edit, rng)
    x0 = torch.cat([g.x, e.x])
    label = torch.cat([g.label, e.label])
    src = torch.cat([torch.full((n - n_edit, 2), float("nan")), e.src])
    task = torch.cat([torch.zeros(n - n_edit, dtype=torch.long), torch.ones(n_edit, dtype=torch.long)])
    return x0, label, src, task


def flow_matching_loss(model: FlowNet, x0, label, src, task, rng: np.random.Generator, dropout: float):
    n = x0.shape[0]
    xT = torch.from_numpy(rng.standard_normal(x0.shape)).to(x0.dtype)
    t = torch.from_numpy(rng.random(n)).to(x0.dtype)
    drop_c = torch.from_numpy(rng.random(n) < dropout)
    drop_s = torch.from_numpy(rng.random(n) < dropout)
    label = torch.where(drop_c, torch.full_like(label, model.null_label), label)
    src = torch.where(drop_s[:, None], torch.full_like(src, float("nan")), src)
    v = model(interpolate(x0, xT, t), t, label, src, task)
    return ((v - velocity_target(x0, xT)) ** 2).sum(-1).mean()


def train_teacher(tc: TeacherTrainConfig, seed: int, dtype=torch.float32) -> StageCheckpoint:
    spec = MixtureSpec(**tc.spec)
    net_cfg = FlowNetConfig(**{**tc.net, "n_classes": 2 if tc.data == "moons" else spec.n_modes})
    if tc.data not in ("mixture", "moons"):
        raise ConfigError(f"unknown dataset {tc.data!r}")
    torch.manual_seed(seed)
    model = FlowNet(net_cfg).to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, tc.steps)
    rng = np.random.default_rng(seed)
    curve, window = [], []
    for step in range(tc.steps):
        x0, label, src, task = teacher_batch(tc, rng, spec, net_cfg.n_classes)
        loss = flow_matching_loss(model, x0.to(dtype), label, src.to(dtype), task, rng, tc.cond_dropout)
        if not torch.isfinite(loss):
            raise TrainingError("non-finite flow-matching loss", step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        window.append(loss.item())
        if len(window) == tc.log_every:
            curve.append(float(np.mean(window)))
            window = []
    return StageCheckpoint(
        stage="teacher",
        tensors=module_tensors(model),
        config={"net": asdict(net_cfg), "train": asdict(tc), "spec": asdict(spec)},
        seed=seed,
        metrics={"loss_curve": curve},
    )


def load_flow(ckpt: StageCheckpoint, dtype=torch.float32) -> FlowNet:
    model = FlowNet(FlowNetConfig(**ckpt.config["net"])).to(dtype)
    ckpt.load_into(model)
    model.eval()
    return model


def spec_of(ckpt: StageCheckpoint) -> MixtureSpec:
    return MixtureSpec(**ckpt.config["spec"])
