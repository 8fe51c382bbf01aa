"""
One evaluation per sample
=========================

Adversarial pretraining fits a 1-step generator to the 6-step model's
trajectory endpoints, with one discriminator on flow features and one on a
frozen random-feature map. Reward fine-tuning then pushes samples towards
their labelled mode. Run 03_few_step_distillation.py first.
"""

import torch

from hyperlab.bench.evaluate import distance_to_data, generate
from hyperlab.checkpoint import StageCheckpoint
from hyperlab.distill.onestep import AdpConfig, ReflConfig, ToyReward, mean_reward, train_adp, train_refl
from hyperlab.flow.core import load_flow, spec_of
from hyperlab.plotting import emit_plot

torch.set_num_threads(1)

dmdo = StageCheckpoint.load("dmdo_demo.ckpt")
adp = train_adp(dmdo, 0, AdpConfig(steps=400))
refl = train_refl(adp, 0, ReflConfig(steps=100))

n = 5000
reward = ToyReward(spec_of(adp))
for name, ck in (("dmdo@6", dmdo), ("adp@1", adp), ("refl@1", refl)):
    line = f"{name:7s} distance {distance_to_data(ck, n, 1):.5f}"
    if ck.stage != "dmdo":
        line += f"  mean reward {mean_reward(load_flow(ck), reward, n, 1):.4f}"
    print(line)

panels = {}
for name, ck in (("6-NFE", dmdo), ("1-NFE", refl)):
    panels[name] = generate(load_flow(ck), spec_of(ck), 2000, 0, nfe=6 if ck is dmdo else 1)[0]
print("wrote", emit_plot(panels, "one_step.png", centers=spec_of(dmdo).centers()))
