"""Stage 3: distribution matching distillation along the generator's own ODE.

Each iteration samples one gradient-free 6-NFE Euler trajectory from the
generator. The fake model is fitted on straight-line interpolations between
that trajectory's endpoints (velocity target x_T - x_0). The generator is
then re-run with gradients from the saved grid state just above a random t,
and its endpoint is pushed along the DMD direction computed at a fresh t'.
"""

from __future__ import annotations

import copy
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from ..checkpoint import StageCheckpoint, child_ancestors, module_tensors, require_parent
from ..errors import ConfigError, InputError, LineageError, TrainingError
from ..flow.data import sample_mixture
from ..flow.core import (
    FlowNet,
    FlowTrajectory,
    GuidanceCondition,
    euler_sample,
    integrate,
    interpolate,
    load_flow,
    sampler_signature,
    shift_time,
    spec_of,
    velocity_fn,
    velocity_target,
    x0_from_velocity,
)
from .adversarial import CollapseGuard, spread

NORMAL_DRAWS = frozenset({"standard_normal", "normal", "multivariate_normal", "lognormal"})


class AuditedRNG:
    """Proxy for ``np.random.Generator`` that counts every sampling call by method name."""

    def __init__(self, rng: np.random.Generator):
        self._rng = rng
        self.calls: Counter = Counter()

    def __getattr__(self, name):
        attr = getattr(self._rng, name)
        if not callable(attr):
            return attr

        def counted(*args, **kwargs):
            self.calls[name] += 1
            return attr(*args, **kwargs)

        return counted

    def normal_draws(self) -> int:
        return sum(self.calls[k] for k in NORMAL_DRAWS)


# -- restart rule ----------------------------------------------------------------


def restart_index(u, nfe: int) -> np.ndarray:
    """Grid index of the saved state to restart from for grid coordinate u in (0, 1].

    u in (k/nfe, (k+1)/nfe] restarts at the state for (k+1)/nfe, i.e. index
    nfe - (k+1) of a trajectory that starts at x_T (index 0).
    """
    u = np.asarray(u, dtype=np.float64)
    if ((u <= 0) | (u > 1)).any():
        raise InputError("restart coordinate must lie in (0, 1]; t = 0 has no interval above it")
    # the tolerance absorbs rounding at grid points; at least one step is always regenerated
    steps = np.maximum(np.ceil(nfe * u - 1e-9), 1)
    return (nfe - steps).astype(int)


def generator_restart(traj: FlowTrajectory, u):
    """(state, time) of the restart grid point for scalar u."""
    i = int(restart_index(u, traj.nfe))
    return traj.states[i], float(traj.times[i])


# -- updates ---------------------------------------------------------------------


def fake_update(
    traj: FlowTrajectory,
    fake: FlowNet,
    g: GuidanceCondition,
    rng,
    fake_t: str = "uniform",
    shift: float = 3.0,
    reads: list | None = None,
):
    """Flow-matching loss of the fake model on endpoint interpolations of ``traj``.

    Only t is drawn here; the inputs are built from the trajectory's own x_T
    and x_0, so no fresh noise enters.
    """
    if reads is not None:
        reads.append(("fake", traj.tag))
    x0, xT = traj.x_0, traj.x_T
    n = x0.shape[0]
    t = torch.from_numpy(1.0 - rng.random(n)).to(x0.dtype)
    if fake_t == "shifted":
        t = shift_time(t, shift)
    elif fake_t != "uniform":
        raise ConfigError(f"unknown fake-update time sampling {fake_t!r}")
    xt = interpolate(x0, xT, t)
    v = velocity_fn(fake, g)(xt, t)
    return ((v - velocity_target(x0, xT)) ** 2).sum(-1).mean()


def _subset(g: GuidanceCondition, rows) -> GuidanceCondition:
    def pick(v):
        v = torch.as_tensor(v)
        return v[rows] if v.dim() else v

    src = None if g.src is None else g.src[rows]
    return GuidanceCondition(pick(g.c), pick(g.w_text), pick(g.w_img), src, g.mode, g.interval)


def regenerate(traj: FlowTrajectory, generator: FlowNet, g: GuidanceCondition, u) -> torch.Tensor:
    """Gradient-enabled Euler integration from each row's restart state down to x_0."""
    idx = restart_index(u, traj.nfe)
    parts = []
    for i in np.unique(idx):
        rows = torch.from_numpy(np.nonzero(idx == i)[0])
        x = traj.states[int(i)][rows].detach()
        x0 = integrate(velocity_fn(generator, _subset(g, rows)), x, traj.times, start=int(i))[-1]
        parts.append((rows, x0))
    order = torch.cat([r for r, _ in parts])
    stacked = torch.cat([x for _, x in parts])
    return stacked[torch.argsort(order)]


def dmd_direction(x0_hat, xT, t2, real: FlowNet, fake: FlowNet, g: GuidanceCondition, eps: float = 1e-8, normalizer: str = "dmd"):
    """DMD gradient g at x_t' built from the generator endpoint (all under no_grad)."""
    with torch.no_grad():
        x0_hat = x0_hat.detach()
        xt = interpolate(x0_hat, xT, t2)
        real_x0 = x0_from_velocity(xt, t2, velocity_fn(real, g)(xt, t2))
        fake_x0 = x0_from_velocity(xt, t2, velocity_fn(fake, g)(xt, t2))
        diff = fake_x0 - real_x0
        if normalizer == "dmd":
            scale = (x0_hat - real_x0).abs().mean(-1, keepdim=True) + eps
        elif normalizer == "mean_norm":
            scale = diff.norm(dim=-1).mean() + eps
        else:
            raise ConfigError(f"unknown normalizer {normalizer!r}")
        return diff / scale


def pseudo_loss(x0_hat, grad):
    """0.5 |x0 - sg(x0 - g)|^2, whose gradient w.r.t. x0 is exactly g (per row, mean over batch)."""
    return 0.5 * ((x0_hat - (x0_hat - grad).detach()) ** 2).sum(-1).mean()


def generator_update(traj, u, t2, real, fake, generator, g, eps: float = 1e-8, normalizer: str = "dmd", reads=None):
    """Pseudo-loss for one generator step, or None when the direction is non-finite."""
    if reads is not None:
        reads.append(("gen", traj.tag))
    x0_hat = regenerate(traj, generator, g, u)
    t2 = torch.as_tensor(t2, dtype=x0_hat.dtype)
    grad = dmd_direction(x0_hat, traj.x_T, t2, real, fake, g, eps, normalizer)
    if not torch.isfinite(grad).all():
        return None
    return pseudo_loss(x0_hat, grad)


# -- training --------------------------------------------------------------------


@dataclass
class DmdoConfig:
    iters: int = 3000
    batch: int = 256
    nfe: int = 6
    shift: float = 3.0
    lr: float = 5e-5
    lr_fake: float = 2.5e-4
    w_text: float = 1.0
    eps: float = 1e-8
    normalizer: str = "dmd"  # "dmd" | "mean_norm"
    fake_t: str = "uniform"  # "uniform" | "shifted"
    # "reflow": the real model is first fitted on straight interpolations of
    # its own ODE pairs, the same coupling the fake model sees; "independent":
    # the guidance-distilled student is used as is
    real_coupling: str = "reflow"
    reflow_pairs: int = 100_000
    reflow_nfe: int = 50
    reflow_steps: int = 4000
    reflow_lr: float = 1e-3
    cosine: bool = True
    collapse_ratio: float = 0.01
    collapse_patience: int = 500
    log_every: int = 50


def reflow_real(real: FlowNet, cfg: DmdoConfig, seed: int, n_modes: int) -> FlowNet:
    """Copy of ``real`` refitted on (x_T, ODE(x_T)) pairs from its own guided sampler.

    The generator update queries the real model at straight-line points between
    a trajectory's endpoints. A flow trained on independent noise/data pairs
    answers those queries with a posterior mean, which drags samples towards
    mode averages; refitting on the deterministic coupling removes that shift.
    """
    rng = np.random.default_rng([seed, 7])
    n = cfg.reflow_pairs
    xT = torch.from_numpy(rng.standard_normal((n, 2))).float()
    labels = torch.from_numpy(rng.integers(n_modes, size=n))
    x0 = euler_sample(real, xT, cfg.reflow_nfe, cfg.shift, GuidanceCondition(labels, w_text=cfg.w_text)).x_0
    model = copy.deepcopy(real)
    for p in model.parameters():
        p.requires_grad_(True)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.reflow_lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.reflow_steps)
    for step in range(cfg.reflow_steps):
        i = torch.from_numpy(rng.integers(n, size=cfg.batch * 2))
        t = torch.from_numpy(rng.random(len(i))).float()
        xt = interpolate(x0[i], xT[i], t)
        g = GuidanceCondition(labels[i], w_text=cfg.w_text)
        loss = ((velocity_fn(model, g)(xt, t) - velocity_target(x0[i], xT[i])) ** 2).sum(-1).mean()
        if not torch.isfinite(loss):
            raise TrainingError("non-finite reflow loss", step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@dataclass
class DmdoAudit:
    iterations: int = 0
    trajectories: int = 0
    skipped: int = 0
    fake_normal_draws: int = 0
    fake_torch_rng_touched: int = 0
    reads: list = field(default_factory=list)  # (update kind, trajectory tag) in call order

    def reuse_violations(self) -> int:
        """Iterations whose two updates did not both read that iteration's own trajectory."""
        bad = 0
        for i in range(self.iterations):
            if self.reads[2 * i : 2 * i + 2] != [("fake", i), ("gen", i)]:
                bad += 1
        return bad


def train_dmdo(
    student_ckpt: StageCheckpoint,
    real_ckpt: StageCheckpoint,
    seed: int,
    cfg: DmdoConfig | None = None,
    audit: DmdoAudit | None = None,
) -> StageCheckpoint:
    require_parent("dmdo", student_ckpt)
    if real_ckpt.stage != "cfg":
        raise LineageError(f"the real model must be the guidance-distilled student, got {real_ckpt.stage!r}")
    if real_ckpt.digest() not in {a["hash"] for a in student_ckpt.ancestors}:
        raise LineageError("the real model is not an ancestor of this student")
    cfg = cfg or DmdoConfig()
    audit = audit if audit is not None else DmdoAudit()
    torch.manual_seed(seed)
    rng = AuditedRNG(np.random.default_rng(seed))
    spec = spec_of(student_ckpt)
    real = load_flow(real_ckpt)
    for p in real.parameters():
        p.requires_grad_(False)
    if cfg.real_coupling == "reflow":
        real = reflow_real(real, cfg, seed, spec.n_modes)
    elif cfg.real_coupling != "independent":
        raise ConfigError(f"unknown real-model coupling {cfg.real_coupling!r}")
    generator = load_flow(student_ckpt)
    fake = load_flow(student_ckpt)
    opt_g = torch.optim.Adam(generator.parameters(), lr=cfg.lr)
    opt_f = torch.optim.Adam(fake.parameters(), lr=cfg.lr_fake)
    scheds = []
    if cfg.cosine:
        scheds = [torch.optim.lr_scheduler.CosineAnnealingLR(o, cfg.iters) for o in (opt_g, opt_f)]
    guard = CollapseGuard(cfg.collapse_ratio, cfg.collapse_patience)
    data_spread = spread(sample_mixture(spec, 4096, np.random.default_rng(seed + 1)).x)

    curves = {"fake": [], "dmd": []}
    win = {"fake": [], "dmd": []}
    for it in range(cfg.iters):
        xT = torch.from_numpy(rng.standard_normal((cfg.batch, 2))).float()
        labels = torch.from_numpy(rng.integers(spec.n_modes, size=cfg.batch))
        g = GuidanceCondition(labels, w_text=cfg.w_text)
        traj = euler_sample(generator, xT, cfg.nfe, cfg.shift, g)
        traj.tag = audit.trajectories
        audit.trajectories += 1

        before = rng.normal_draws()
        torch_state = torch.random.get_rng_state()
        lf = fake_update(traj, fake, g, rng, cfg.fake_t, cfg.shift, audit.reads)
        audit.fake_normal_draws += rng.normal_draws() - before
        audit.fake_torch_rng_touched += int(not torch.equal(torch_state, torch.random.get_rng_state()))
        if not torch.isfinite(lf):
            raise TrainingError("non-finite fake-model loss", it)
        opt_f.zero_grad()
        lf.backward()
        opt_f.step()

        u = 1.0 - rng.random(cfg.batch)
        t2 = torch.from_numpy(1.0 - rng.random(cfg.batch)).float()
        lg = generator_update(traj, u, t2, real, fake, generator, g, cfg.eps, cfg.normalizer, audit.reads)
        if lg is None:
            audit.skipped += 1
        else:
            opt_g.zero_grad()
            lg.backward()
            opt_g.step()
            win["dmd"].append(lg.item())
        for s in scheds:
            s.step()
        guard.update(spread(traj.x_0), data_spread, it)
        audit.iterations += 1
        win["fake"].append(lf.item())
        if len(win["fake"]) == cfg.log_every:
            for k in curves:
                curves[k].append(float(np.mean(win[k])) if win[k] else float("nan"))
                win[k] = []
    generator.eval()
    return StageCheckpoint(
        stage="dmdo",
        tensors=module_tensors(generator),
        config={"net": asdict(generator.cfg), "spec": asdict(spec), "distill": asdict(cfg)},
        seed=seed,
        ancestors=child_ancestors(student_ckpt),
        metrics={
            "losses": curves,
            "iterations": audit.iterations,
            "trajectories": audit.trajectories,
            "skipped": audit.skipped,
            "fake_normal_draws": audit.fake_normal_draws,
            "fake_torch_rng_touched": audit.fake_torch_rng_touched,
            "reuse_violations": audit.reuse_violations(),
        },
        extra={"sampler": sampler_signature(cfg.shift), "nfe": cfg.nfe},
    )
