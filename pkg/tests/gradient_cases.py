"""Float64 finite-difference cases, one per trainable module and objective.

Each builder returns ``(loss_fn, params)`` with every input fixed up front so
repeated calls of ``loss_fn`` are deterministic. All configs stay under the
1k-parameter limit of :func:`hyperlab.numerics.fd_relative_error`.
"""

from __future__ import annotations

import numpy as np
import torch

from hyperlab.distill.adversarial import (
    MultiHeadDiscriminator,
    RandomFeatures,
    SegmentGrid,
    consistency_jump,
    d_loss_nonsat,
    g_loss_nonsat,
)
from hyperlab.distill.dmdo import fake_update, regenerate
from hyperlab.distill.onestep import RewardLossConfig, ToyReward, one_step
from hyperlab.flow.core import FlowNet, FlowNetConfig, GuidanceCondition, euler_sample, interpolate, student_velocity
from hyperlab.flow.data import MixtureSpec
from hyperlab.lm.draft import DraftConfig, DraftNet, draft_loss_from_logits, draft_objective
from hyperlab.lm.target import TargetConfig, TargetLM, lm_loss

F64 = torch.float64
MICRO_LM = TargetConfig(num_layers=3, dim=4, heads=1, vocab=6, max_seq=8, mlp_ratio=1, feature_layers=(0, 1, 2))


def _flow(seed, guidance_embed=False, dim=2):
    torch.manual_seed(seed)
    cfg = FlowNetConfig(dim=dim, hidden=6, depth=2, n_classes=3, freq_dim=4, guidance_embed=guidance_embed)
    return FlowNet(cfg).to(F64)  # scale encoders stay random, so their gradients are not trivially zero


def _trainable(m):
    return [p for p in m.parameters() if p.requires_grad]


def _tokens(seed, b=2, s=6, vocab=6):
    return torch.randint(0, vocab, (b, s), generator=torch.Generator().manual_seed(seed))


def target_lm():
    torch.manual_seed(0)
    model = TargetLM(MICRO_LM).to(F64)
    toks = _tokens(1)
    return (lambda: lm_loss(model, toks)), _trainable(model)


def draft_net():
    torch.manual_seed(0)
    target = TargetLM(MICRO_LM).to(F64)
    for p in target.parameters():
        p.requires_grad_(False)
    draft = DraftNet(target, DraftConfig(zero_init=False, ttt_steps=2))
    toks = _tokens(2)
    return (lambda: draft_objective(draft, toks)), _trainable(draft)


def draft_loss_logits():
    g = torch.Generator().manual_seed(3)
    t = torch.randn(4, 6, generator=g, dtype=F64)
    d = torch.randn(4, 6, generator=g, dtype=F64, requires_grad=True)
    mask = torch.tensor([1.0, 1.0, 0.0, 1.0], dtype=F64)
    return (lambda: draft_loss_from_logits(t, d, 0.1, mask)), [d]


def _flow_batch(seed, n=6):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(n, 2, generator=g, dtype=F64)
    t = torch.rand(n, generator=g, dtype=F64) * 0.9 + 0.05
    c = torch.arange(n) % 4  # includes the null label 3
    src = torch.randn(n, 2, generator=g, dtype=F64)
    src[::2] = float("nan")
    return x, t, c, src


def flow_teacher():
    net = _flow(0)
    x, t, c, src = _flow_batch(4)
    v = torch.randn(6, 2, generator=torch.Generator().manual_seed(5), dtype=F64)
    task = torch.tensor([0, 1, 0, 1, 0, 1])
    return (lambda: ((net(x, t, c, src, task) - v) ** 2).sum(-1).mean()), _trainable(net)


def cfg_student():
    net = _flow(1, guidance_embed=True)
    x, t, c, src = _flow_batch(6)
    c = c % 3
    wt = torch.linspace(1, 5, 6, dtype=F64)
    wi = torch.linspace(1, 2.5, 6, dtype=F64)
    v = torch.randn(6, 2, generator=torch.Generator().manual_seed(7), dtype=F64)
    gen = GuidanceCondition(c, w_text=wt)
    edit = GuidanceCondition(c, w_text=wt, w_img=wi, src=torch.nan_to_num(src), mode="edit")

    def loss():
        a = student_velocity(net, x, t, gen)
        b = student_velocity(net, x, t, edit)
        return ((a - v) ** 2).sum(-1).mean() + ((b - v) ** 2).sum(-1).mean()

    return loss, _trainable(net)


def _disc(seed, feature_map=None):
    torch.manual_seed(seed)
    dim = 2 if feature_map is None else feature_map.width
    backbone = FlowNet(FlowNetConfig(dim=dim, hidden=6, depth=2, n_classes=3, freq_dim=4)).to(F64)
    d = MultiHeadDiscriminator(backbone, heads=3, feature_map=feature_map).to(F64)
    for h in d.heads:  # zero heads would make every backbone gradient vanish
        torch.nn.init.normal_(h.weight)
    return d


def tscd_discriminator():
    d = _disc(2)
    x, t, c, _ = _flow_batch(8)
    c = c % 3
    fake = x + 0.3
    return (lambda: d_loss_nonsat(d(x, t, c), d(fake, t, c))), _trainable(d)


def tscd_generator():
    d = _disc(3)
    for p in d.parameters():
        p.requires_grad_(False)
    gen = _flow(4, guidance_embed=True)
    x, t, c, _ = _flow_batch(9)
    g = GuidanceCondition(c % 3)
    grid = SegmentGrid(3, 3.0)

    def loss():
        fake, lo = consistency_jump(gen, x, t, g, grid)
        return g_loss_nonsat(d(fake, lo, c % 3))

    return loss, _trainable(gen)


def latent_discriminator():
    d = _disc(5, RandomFeatures(2, 5, seed=1).to(F64))
    x, t, c, _ = _flow_batch(10)
    c = c % 3
    return (lambda: d_loss_nonsat(d(x, t, c), d(x * 0.5, t, c))), _trainable(d)


def dmdo_fake():
    gen, fake = _flow(6, True), _flow(7, True)
    g = GuidanceCondition(torch.arange(6) % 3)
    traj = euler_sample(gen, torch.randn(6, 2, generator=torch.Generator().manual_seed(11), dtype=F64), 6, 3.0, g)
    return (lambda: fake_update(traj, fake, g, np.random.default_rng(0))), _trainable(fake)


def dmdo_generator():
    gen = _flow(8, True)
    g = GuidanceCondition(torch.arange(6) % 3)
    traj = euler_sample(gen, torch.randn(6, 2, generator=torch.Generator().manual_seed(12), dtype=F64), 6, 3.0, g)
    u = np.array([1.0, 0.9, 0.6, 0.5, 0.2, 0.05])
    w = torch.randn(6, 2, generator=torch.Generator().manual_seed(13), dtype=F64)
    return (lambda: (regenerate(traj, gen, g, u) * w).sum()), _trainable(gen)


def adp_generator():
    d = _disc(9)
    for p in d.parameters():
        p.requires_grad_(False)
    gen = _flow(10, True)
    x, t, c, _ = _flow_batch(14)
    xT = torch.randn(6, 2, generator=torch.Generator().manual_seed(15), dtype=F64)
    g = GuidanceCondition(c % 3)

    def loss():
        fake = one_step(gen, interpolate(x, xT, t), t, g)
        return g_loss_nonsat(d(fake, t, c % 3))

    return loss, _trainable(gen)


def refl_generator():
    gen = _flow(11, True)
    spec = MixtureSpec(n_modes=3, radius=0.5, mode_scale=1.0)
    reward = ToyReward(spec)
    rcfg = RewardLossConfig(9.5)  # keeps every sample below the threshold so the gate is open
    xT = torch.randn(6, 2, generator=torch.Generator().manual_seed(16), dtype=F64)
    c = torch.arange(6) % 3
    g = GuidanceCondition(c)
    return (lambda: rcfg.loss(reward(one_step(gen, xT, 1.0, g), c)).mean()), _trainable(gen)


CASES = {
    "target_lm": target_lm,
    "draft_net": draft_net,
    "draft_loss_logits": draft_loss_logits,
    "flow_teacher": flow_teacher,
    "cfg_student": cfg_student,
    "tscd_discriminator": tscd_discriminator,
    "tscd_generator": tscd_generator,
    "latent_discriminator": latent_discriminator,
    "dmdo_fake": dmdo_fake,
    "dmdo_generator": dmdo_generator,
    "adp_generator": adp_generator,
    "refl_generator": refl_generator,
}
