"""Stages 4 and 5: one-step generator.

ADP pits a 1-NFE generator against the endpoints of 6-NFE trajectories using
two discriminators, one on raw coordinates and one on a frozen random
feature embedding. ReFL then fine-tunes the generator against a toy reward
through a thresholded ReLU loss.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from ..bench.metrics import energy_distance
from ..checkpoint import StageCheckpoint, child_ancestors, module_tensors, require_parent
from ..errors import ConfigError, StageOrderError, TrainingError
from ..flow.core import FlowNet, GuidanceCondition, euler_sample, interpolate, load_flow, spec_of, velocity_fn
from ..flow.data import MixtureSpec, sample_mixture
from .adversarial import (
    CollapseGuard,
    MultiHeadDiscriminator,
    RandomFeatures,
    d_loss_nonsat,
    g_loss_nonsat,
    sample_times,
    spread,
)


class DualDiscriminator(nn.Module):
    """Discriminator A on the sample itself, B on a frozen random-feature view of it."""

    def __init__(self, flow_ckpt: StageCheckpoint, heads: int = 3, feature_width: int = 64, feature_seed: int = 0):
        super().__init__()
        self.pixel = MultiHeadDiscriminator.from_flow(flow_ckpt, heads)
        self.latent = MultiHeadDiscriminator.from_flow(
            flow_ckpt, heads, RandomFeatures(flow_ckpt.config["net"]["dim"], feature_width, seed=feature_seed)
        )

    def forward(self, x, t, c):
        return self.pixel(x, t, c), self.latent(x, t, c)


@dataclass(frozen=True)
class ToyReward:
    """r(x, c) = 10 exp(-|x - mu_c|^2 / (2 sigma^2)), sigma = the mixture's mode scale."""

    spec: MixtureSpec = MixtureSpec()

    def __call__(self, x: torch.Tensor, c) -> torch.Tensor:
        mu = torch.as_tensor(self.spec.centers(), dtype=x.dtype)[torch.as_tensor(c, dtype=torch.long)]
        return 10.0 * torch.exp(-((x - mu) ** 2).sum(-1) / (2 * self.spec.mode_scale**2))


@dataclass(frozen=True)
class RewardLossConfig:
    alpha_d: float = 6.0

    def loss(self, r: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.alpha_d - r)


def one_step(generator: FlowNet, x_t, t, g: GuidanceCondition):
    """x0 prediction x_t - t v(x_t, t) from a single network evaluation."""
    t = torch.as_tensor(t, dtype=x_t.dtype)
    tt = t.expand(x_t.shape[0]) if t.dim() == 0 else t
    return x_t - tt[:, None] * velocity_fn(generator, g)(x_t, tt)


def sample_one_step(generator: FlowNet, x_T, g: GuidanceCondition):
    """The 1-NFE generation path: Euler with a single step from pure noise."""
    return euler_sample(generator, x_T, 1, 1.0, g)


# -- ADP -----------------------------------------------------------------------


@dataclass
class AdpConfig:
    steps: int = 3000
    batch: int = 256
    lr_g: float = 5e-5
    lr_d: float = 1e-3
    heads: int = 3
    feature_width: int = 64
    nfe: int = 6
    shift: float = 3.0
    w_text: float = 1.0
    eval_every: int = 200
    eval_n: int = 1000
    cosine: bool = True  # decay both learning rates to zero; constant rates drift after the optimum
    collapse_ratio: float = 0.01
    collapse_patience: int = 500
    log_every: int = 100


def adp_step(sixnfe: FlowNet, generator: FlowNet, disc: DualDiscriminator, opt_g, opt_d, rng, cfg: AdpConfig, spec: MixtureSpec):
    """One discriminator and one generator update. Returns losses and provenance audit."""
    n = cfg.batch
    xT = torch.from_numpy(rng.standard_normal((n, 2))).float()
    labels = torch.from_numpy(rng.integers(spec.n_modes, size=n))
    g = GuidanceCondition(labels, w_text=cfg.w_text)
    traj = euler_sample(sixnfe, xT, cfg.nfe, cfg.shift, g)
    real = traj.x_0
    t = sample_times(n, rng, cfg.shift)
    xt = interpolate(real, traj.x_T, t)
    before = generator.evals
    fake = one_step(generator, xt, t, g)
    gen_evals = generator.evals - before

    ra, rb = disc(real, t, labels)
    fa, fb = disc(fake.detach(), t, labels)
    ld = d_loss_nonsat(ra, fa) + d_loss_nonsat(rb, fb)
    opt_d.zero_grad()
    ld.backward()
    opt_d.step()

    fa, fb = disc(fake, t, labels)
    lg = g_loss_nonsat(fa) + g_loss_nonsat(fb)
    opt_g.zero_grad()
    lg.backward()
    opt_g.step()
    return {
        "adv_d": ld.item(),
        "adv_g": lg.item(),
        "gen_evals": gen_evals,
        "paired": bool(torch.equal(xt, interpolate(traj.x_0, traj.x_T, t))),
        "real_is_endpoint": bool(torch.equal(real, traj.states[-1])),
        "fake_spread": spread(fake.detach()),
        "real_spread": spread(real),
    }


def one_step_distance(generator: FlowNet, spec: MixtureSpec, n: int, seed: int, w_text: float = 1.0) -> float:
    rng = np.random.default_rng(seed)
    labels = torch.from_numpy(rng.integers(spec.n_modes, size=n))
    xT = torch.from_numpy(rng.standard_normal((n, 2))).float()
    x = sample_one_step(generator, xT, GuidanceCondition(labels, w_text=w_text)).x_0
    ref = sample_mixture(spec, n, rng).x
    return energy_distance(x.numpy(), ref.numpy())


def train_adp(sixnfe_ckpt: StageCheckpoint, seed: int, cfg: AdpConfig | None = None) -> StageCheckpoint:
    """Fixed-budget ADP run; the generator starts from the 6-NFE model's weights."""
    require_parent("adp", sixnfe_ckpt)
    cfg = cfg or AdpConfig()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    spec = spec_of(sixnfe_ckpt)
    sixnfe = load_flow(sixnfe_ckpt)
    for p in sixnfe.parameters():
        p.requires_grad_(False)
    generator = load_flow(sixnfe_ckpt)
    generator.train()
    disc = DualDiscriminator(sixnfe_ckpt, cfg.heads, cfg.feature_width, feature_seed=seed)
    opt_g = torch.optim.Adam(generator.parameters(), lr=cfg.lr_g, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam([p for p in disc.parameters() if p.requires_grad], lr=cfg.lr_d, betas=(0.5, 0.999))
    scheds = [torch.optim.lr_scheduler.CosineAnnealingLR(o, cfg.steps) for o in (opt_g, opt_d)] if cfg.cosine else []
    guard = CollapseGuard(cfg.collapse_ratio, cfg.collapse_patience)
    feat_before = {k: v.clone() for k, v in disc.latent.feature_map.state_dict().items()}

    losses = {"adv_d": [], "adv_g": []}
    win = {"adv_d": [], "adv_g": []}
    ed_curve = [one_step_distance(generator, spec, cfg.eval_n, 10_000 + seed, cfg.w_text)]
    audit = {"gen_evals_max": 0, "unpaired": 0, "real_not_endpoint": 0}
    for step in range(cfg.steps):
        out = adp_step(sixnfe, generator, disc, opt_g, opt_d, rng, cfg, spec)
        for sc in scheds:
            sc.step()
        if not np.isfinite(out["adv_d"]) or not np.isfinite(out["adv_g"]):
            raise TrainingError("non-finite adversarial loss", step)
        guard.update(out["fake_spread"], out["real_spread"], step)
        audit["gen_evals_max"] = max(audit["gen_evals_max"], out["gen_evals"])
        audit["unpaired"] += int(not out["paired"])
        audit["real_not_endpoint"] += int(not out["real_is_endpoint"])
        for k in win:
            win[k].append(out[k])
        if len(win["adv_d"]) == cfg.log_every:
            for k in losses:
                losses[k].append(float(np.mean(win[k])))
                win[k] = []
        if (step + 1) % cfg.eval_every == 0:
            ed_curve.append(one_step_distance(generator, spec, cfg.eval_n, 10_000 + seed, cfg.w_text))
    frozen = all(torch.equal(feat_before[k], v) for k, v in disc.latent.feature_map.state_dict().items())
    generator.eval()
    return StageCheckpoint(
        stage="adp",
        tensors=module_tensors(generator),
        config={"net": asdict(generator.cfg), "spec": asdict(spec), "distill": asdict(cfg)},
        seed=seed,
        ancestors=child_ancestors(sixnfe_ckpt),
        metrics={"losses": losses, "ed_curve": ed_curve, "audit": audit, "feature_map_frozen": frozen},
        extra={"stage_order": ["adp"]},
    )


# -- ReFL ----------------------------------------------------------------------


@dataclass
class ReflConfig:
    steps: int = 50
    batch: int = 256
    lr: float = 1e-5
    alpha_d: float = 6.0
    w_text: float = 1.0
    adv_weight: float = 0.0  # mixing weight for an ADP term; 0 = reward only
    log_every: int = 50


def refl_step(generator: FlowNet, reward: ToyReward, rcfg: RewardLossConfig, rng, n: int, w_text: float = 1.0):
    """Reward loss of one-step samples from pure noise (generation mode)."""
    xT = torch.from_numpy(rng.standard_normal((n, 2))).float()
    labels = torch.from_numpy(rng.integers(reward.spec.n_modes, size=n))
    x0 = one_step(generator, xT, 1.0, GuidanceCondition(labels, w_text=w_text))
    r = reward(x0, labels)
    return rcfg.loss(r).mean(), r


def mean_reward(generator: FlowNet, reward: ToyReward, n: int, seed: int, w_text: float = 1.0) -> float:
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        _, r = refl_step(generator, reward, RewardLossConfig(), rng, n, w_text)
    return float(r.mean())


def train_refl(adp_ckpt: StageCheckpoint, seed: int, cfg: ReflConfig | None = None) -> StageCheckpoint:
    if adp_ckpt.stage != "adp":
        raise StageOrderError(f"reward fine-tuning must follow ADP, got a {adp_ckpt.stage!r} checkpoint")
    require_parent("refl", adp_ckpt)
    cfg = cfg or ReflConfig()
    if cfg.adv_weight != 0.0:
        raise ConfigError("mixing an adversarial term into ReFL is a recorded option but not implemented")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    spec = spec_of(adp_ckpt)
    generator = load_flow(adp_ckpt)
    generator.train()
    reward = ToyReward(spec)
    rcfg = RewardLossConfig(cfg.alpha_d)
    opt = torch.optim.Adam(generator.parameters(), lr=cfg.lr)
    curve, win = [], []
    for step in range(cfg.steps):
        loss, _ = refl_step(generator, reward, rcfg, rng, cfg.batch, cfg.w_text)
        if not torch.isfinite(loss):
            raise TrainingError("non-finite reward loss", step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        win.append(loss.item())
        if len(win) == cfg.log_every:
            curve.append(float(np.mean(win)))
            win = []
    generator.eval()
    return StageCheckpoint(
        stage="refl",
        tensors=module_tensors(generator),
        config={"net": asdict(generator.cfg), "spec": asdict(spec), "distill": asdict(cfg)},
        seed=seed,
        ancestors=child_ancestors(adp_ckpt),
        metrics={"loss_curve": curve},
        extra={"stage_order": list(adp_ckpt.extra.get("stage_order", ["adp"])) + ["refl"]},
    )


def train_onestep(
    sixnfe_ckpt: StageCheckpoint,
    seed: int,
    adp: AdpConfig | None = None,
    refl: ReflConfig | None = None,
) -> tuple[StageCheckpoint, StageCheckpoint]:
    """ADP then ReFL. Returns both checkpoints; the second is the 1-NFE model."""
    adp_ckpt = train_adp(sixnfe_ckpt, seed, adp)
    return adp_ckpt, train_refl(adp_ckpt, seed, refl)
