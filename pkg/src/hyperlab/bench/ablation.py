"""Draft ablation suite: four training variants, identical budgets and seeds."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..checkpoint import StageCheckpoint
from ..errors import HyperlabError, InputError
from ..lm.draft import DraftConfig, DraftTrainConfig, load_draft, train_draft
from ..lm.speculative import measure_acceptance
from ..lm.target import TargetLM

VARIANTS = ("full", "no_zero_init", "no_ce", "no_zero_init_no_ce")

# published reference values (acceptance length, 10-alpha)
REFERENCE = {
    "full": (3.7709, 0.7452),
    "no_zero_init": (2.8273, 0.6494),
    "no_ce": (3.6642, 0.7365),
    "no_zero_init_no_ce": (3.4832, 0.7207),
}


@dataclass
class AblationCell:
    variant: str
    seed: int
    tau: float | None
    alpha: float | None
    status: str = "ok"
    error: str | None = None


@dataclass
class AblationMatrix:
    cells: list[AblationCell]
    budget: dict = field(default_factory=dict)

    def values(self, variant: str, metric: str = "tau") -> list[float]:
        return [getattr(c, metric) for c in self.cells if c.variant == variant and c.status == "ok"]

    def median(self, variant: str, metric: str = "tau") -> float:
        v = self.values(variant, metric)
        return float(np.median(v)) if v else float("nan")

    def verdicts(self) -> dict[str, bool]:
        """The two orderings the suite checks, on per-variant medians."""
        m = {v: self.median(v) for v in VARIANTS}
        return {
            "full_gt_no_zero_init": bool(m["full"] > m["no_zero_init"]),
            "both_removed_gt_no_zero_init": bool(m["no_zero_init_no_ce"] > m["no_zero_init"]),
        }

    def to_dict(self) -> dict:
        return {
            "cells": [asdict(c) for c in self.cells],
            "budget": self.budget,
            "medians": {v: {"tau": self.median(v), "alpha": self.median(v, "alpha")} for v in VARIANTS},
            "verdicts": self.verdicts(),
            "reference": {v: {"tau": r[0], "alpha": r[1]} for v, r in REFERENCE.items()},
        }


def run_ablation_suite(
    target_ckpt: StageCheckpoint,
    target: TargetLM,
    train_data: list[list[int]],
    prompts: list[list[int]],
    seeds,
    train_cfg: DraftTrainConfig | None = None,
    k: int = 10,
    max_new: int = 48,
    variants=VARIANTS,
    trainer=train_draft,
) -> AblationMatrix:
    """Train every variant for every seed and measure acceptance on ``prompts``.

    A variant that fails to train is recorded as a failed cell; the suite
    carries on with the rest.
    """
    if not prompts:
        raise InputError("the ablation suite needs evaluation prompts")
    train_cfg = train_cfg or DraftTrainConfig()
    cells = []
    for seed in seeds:
        for name in variants:
            try:
                ckpt = trainer(target_ckpt, target, train_data, DraftConfig.ablation(name), seed, train_cfg)
                rep = measure_acceptance(target, load_draft(ckpt, target), prompts, k=k, max_new=max_new)
                cells.append(AblationCell(name, int(seed), rep.tau, rep.alpha_mean))
            except HyperlabError as e:
                cells.append(AblationCell(name, int(seed), None, None, "failed", str(e)))
    budget = {**asdict(train_cfg), "k": k, "max_new": max_new, "n_prompts": len(prompts)}
    return AblationMatrix(cells, budget)
