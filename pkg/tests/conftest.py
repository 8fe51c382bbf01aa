from __future__ import annotations

import numpy as np
import pytest
import torch

from hyperlab.flow.core import FlowNet, FlowNetConfig, TeacherTrainConfig, train_teacher
from hyperlab.lm.corpus import generate_corpus
from hyperlab.lm.target import TargetConfig, TargetLM, TargetTrainConfig, train_target

torch.set_num_threads(1)

TINY_LM = TargetConfig(num_layers=3, dim=16, heads=2, vocab=24, max_seq=64, feature_layers=(0, 1, 2))


def make_target(cfg: TargetConfig = TINY_LM, seed: int = 0, dtype=torch.float32) -> TargetLM:
    torch.manual_seed(seed)
    model = TargetLM(cfg).to(dtype).eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def make_flow(seed: int = 0, guidance_embed: bool = False, dtype=torch.float32, **kw) -> FlowNet:
    torch.manual_seed(seed)
    cfg = FlowNetConfig(**{"hidden": 16, "depth": 2, "n_classes": 8, "freq_dim": 8, "guidance_embed": guidance_embed, **kw})
    return FlowNet(cfg).to(dtype)


@pytest.fixture
def tiny_target() -> TargetLM:
    return make_target()


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(120, 40, vocab=24, seed=3, n_states=8, token_pool=12)


@pytest.fixture(scope="session")
def small_target_ckpt(small_corpus):
    """A briefly trained 3-layer target: enough structure for nontrivial drafts."""
    return train_target(small_corpus, TINY_LM, seed=0, train_cfg=TargetTrainConfig(steps=150, batch=16, seq_len=32))


@pytest.fixture(scope="session")
def small_teacher_ckpt():
    tc = TeacherTrainConfig(steps=150, batch=128, net={**FlowNetConfig(hidden=32, depth=2).__dict__})
    return train_teacher(tc, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_chain(small_teacher_ckpt):
    """teacher -> cfg -> tscd -> dmdo -> adp -> refl with minimal budgets."""
    from hyperlab.distill.adversarial import TscdConfig, train_tscd
    from hyperlab.distill.dmdo import DmdoAudit, DmdoConfig, train_dmdo
    from hyperlab.distill.guidance import CfgDistillConfig, distill_cfg
    from hyperlab.distill.onestep import AdpConfig, ReflConfig, train_onestep

    cfg = distill_cfg(small_teacher_ckpt, 0, CfgDistillConfig(steps=20, batch=64))
    tscd = train_tscd(cfg, small_teacher_ckpt, 0, TscdConfig(steps=10, batch=32))
    audit = DmdoAudit()
    dmdo = train_dmdo(
        tscd, cfg, 0, DmdoConfig(iters=5, batch=32, reflow_pairs=256, reflow_nfe=4, reflow_steps=5), audit=audit
    )
    adp, refl = train_onestep(dmdo, 0, AdpConfig(steps=4, batch=32, eval_every=2, eval_n=64), ReflConfig(steps=3, batch=32))
    return {"teacher": small_teacher_ckpt, "cfg": cfg, "tscd": tscd, "dmdo": dmdo, "adp": adp, "refl": refl, "audit": audit}


# -- acceptance reporting -----------------------------------------------------

CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``criterion(ok, detail)`` records one PASS/FAIL line for the calling test.

    A test that raises before reporting is listed as FAIL with its exception.
    The lines are repeated in the terminal summary.
    """
    lines = request.config.stash.setdefault(CRITERIA, {})
    title = request.node.name.removeprefix("test_")

    def report(ok: bool, detail: str) -> bool:
        lines[title] = f"{'PASS' if ok else 'FAIL'}  {title}: {detail}"
        print(lines[title])
        return ok

    yield report
    if title not in lines:
        lines[title] = f"FAIL  {title}: did not complete"


def pytest_runtest_makereport(item, call):
    lines = item.config.stash.get(CRITERIA, None)
    title = item.name.removeprefix("test_")
    if lines is not None and call.excinfo is not None and title not in lines and call.when == "call":
        lines[title] = f"FAIL  {title}: {call.excinfo.typename}: {call.excinfo.value}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for title in sorted(lines):
            terminalreporter.write_line(lines[title])
