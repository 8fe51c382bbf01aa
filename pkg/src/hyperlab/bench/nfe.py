"""Function-evaluation accounting for samplers and distilled stages."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from ..errors import InputError
from ..flow.core import FlowNet, FlowNetConfig, GuidanceCondition, euler_sample

# sampling steps each stage is built for
STAGE_NFE = {"teacher": 50, "cfg": 50, "tscd": 3, "dmdo": 6, "adp": 1, "refl": 1}


@dataclass
class SpeedupRow:
    name: str
    baseline_nfe: int
    distilled_nfe: int
    speedup: float

    def to_dict(self):
        return asdict(self)


def speedup(baseline_nfe: int, distilled_nfe: int) -> float:
    """Ratio of function evaluations, reported to two decimals."""
    if baseline_nfe < 1 or distilled_nfe < 1:
        raise InputError("NFE counts must be positive")
    return round(baseline_nfe / distilled_nfe, 2)


def nfe_speedup_table(entries) -> list[SpeedupRow]:
    """``entries``: iterable of (name, baseline_nfe, distilled_nfe)."""
    return [SpeedupRow(n, int(b), int(d), speedup(b, d)) for n, b, d in entries]


def measured_evals(model: FlowNet, g: GuidanceCondition, nfe: int, shift: float = 3.0) -> int:
    """Network evaluations one sampler call spends, counted on the model itself."""
    x = torch.zeros(len(g.c), model.cfg.dim)  # one state per condition row
    return euler_sample(model, x, nfe, shift, g).model_evals


def guided_baselines(steps: int = 50, shift: float = 3.0, w_text: float = 4.0, w_img: float = 1.5) -> dict[str, int]:
    """Evaluation counts of the guided teacher sampler for generation and for editing.

    Generation runs conditional and unconditional branches at every step;
    editing runs three branches inside the guidance interval and one outside.
    """
    net = FlowNet(FlowNetConfig())
    c = torch.zeros(1, dtype=torch.long)
    gen = GuidanceCondition(c, w_text=w_text)
    edit = GuidanceCondition(c, w_text=w_text, w_img=w_img, src=torch.zeros(1, 2), mode="edit")
    return {"generation": measured_evals(net, gen, steps, shift), "editing": measured_evals(net, edit, steps, shift)}


def stage_table(student_nfe: int = 6, steps: int = 50, shift: float = 3.0) -> list[SpeedupRow]:
    """Speedups of a guidance-distilled ``student_nfe`` sampler over the guided teacher."""
    base = guided_baselines(steps, shift)
    return nfe_speedup_table([(k, v, student_nfe) for k, v in base.items()])
