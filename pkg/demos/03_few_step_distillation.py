"""
From 50 steps to 3 and 6
=========================

Segmented consistency distillation gives a 3-jump sampler. Distribution
matching on the generator's own ODE trajectories then trains a 6-step Euler
sampler against a real model. The fake model reuses the same trajectories,
which the audit counters confirm.
"""

import torch

from hyperlab.bench.evaluate import distance_to_data
from hyperlab.distill.adversarial import TscdConfig, train_tscd
from hyperlab.distill.dmdo import DmdoAudit, DmdoConfig, train_dmdo
from hyperlab.distill.guidance import CfgDistillConfig, distill_cfg
from hyperlab.flow.core import TeacherTrainConfig, train_teacher

torch.set_num_threads(1)

teacher = train_teacher(TeacherTrainConfig(steps=1500), seed=0)
student = distill_cfg(teacher, 0, CfgDistillConfig(steps=1000))
tscd = train_tscd(student, teacher, 0, TscdConfig(steps=400))
audit = DmdoAudit()
dmdo = train_dmdo(tscd, student, 0, DmdoConfig(iters=300, reflow_pairs=20_000, reflow_steps=800), audit=audit)

n = 5000
print("teacher@50", round(distance_to_data(teacher, n, 1, nfe=50), 5))
print("tscd@3    ", round(distance_to_data(tscd, n, 1), 5))
print("dmdo@6    ", round(distance_to_data(dmdo, n, 1), 5))
print("lineage   ", " -> ".join(a["stage"] for a in dmdo.ancestors), "-> dmdo")
print("audit: iterations", audit.iterations, "trajectories", audit.trajectories,
      "fresh noise in fake updates", audit.fake_normal_draws, "reuse violations", audit.reuse_violations())
dmdo.save("dmdo_demo.ckpt")
