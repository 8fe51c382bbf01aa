from __future__ import annotations

import numpy as np
import torch
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperlab.bench.ablation import AblationMatrix, run_ablation_suite
from hyperlab.bench.evaluate import heldout, noise_baseline, protocol_inputs
from hyperlab.bench.metrics import dist_report, energy_distance, sliced_wasserstein
from hyperlab.bench.nfe import guided_baselines, measured_evals, nfe_speedup_table, speedup, stage_table
from hyperlab.checkpoint import StageCheckpoint
from hyperlab.errors import InputError, TrainingError
from hyperlab.flow.core import FlowNet, FlowNetConfig, GuidanceCondition
from hyperlab.flow.data import MixtureSpec

clouds = st.integers(0, 10_000).map(lambda s: np.random.default_rng(s).normal(size=(30, 2)))


@settings(max_examples=30, deadline=None)
@given(a=clouds, b=clouds)
def test_energy_distance_symmetric_and_non_negative(a, b):
    assert energy_distance(a, b) == energy_distance(b, a)
    assert energy_distance(a, b) >= 0.0
    assert energy_distance(a, a) == 0.0


@settings(max_examples=20, deadline=None)
@given(a=clouds, seed=st.integers(0, 100))
def test_energy_distance_permutation_invariant(a, seed):
    b = a + 1.0
    p = np.random.default_rng(seed).permutation(len(a))
    assert energy_distance(a[p], b) == pytest.approx(energy_distance(a, b), abs=1e-12)


def test_energy_distance_matches_direct_formula():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(40, 2)), rng.normal(1.0, 1.0, size=(50, 2))

    def mean_dist(x, y):
        return np.mean([np.linalg.norm(u - v) for u in x for v in y])

    want = 2 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)
    assert energy_distance(a, b) == pytest.approx(want, rel=1e-8)  # cdist uses a matmul expansion


def test_energy_distance_grows_with_offset():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(2000, 2))
    near = energy_distance(a, rng.normal(size=(2000, 2)) + [0.2, 0])
    far = energy_distance(a, rng.normal(size=(2000, 2)) + [1.0, 0])
    assert near < far


def test_sliced_wasserstein_shift():
    # W2 of a translation by delta along each unit direction is |<delta, e>|
    a = np.random.default_rng(0).normal(size=(500, 2))
    d = sliced_wasserstein(a, a + [3.0, 0.0], n_proj=256)
    assert 1.9 < d < 2.3  # sqrt(E cos^2) * 3 = 2.12
    assert sliced_wasserstein(a, a) == 0.0


def test_metric_input_checks():
    with pytest.raises(InputError):
        energy_distance(np.zeros((1, 2)), np.zeros((5, 2)))
    with pytest.raises(InputError):
        energy_distance(np.zeros((3, 2)), np.zeros((3, 3)))
    r = dist_report(np.zeros((3, 2)), np.ones((3, 2)), seeds=[1])
    assert r.to_dict()["seeds"] == [1]


def test_protocol_is_paired():
    spec = MixtureSpec()
    a, la = protocol_inputs(spec, 100, 3)
    b, lb = protocol_inputs(spec, 100, 3)
    assert (a == b).all() and (la == lb).all()
    assert not np.array_equal(heldout(spec, 100, 3), heldout(spec, 100, 4))
    assert noise_baseline(spec, 500, 0) > 1.0


# -- NFE accounting --------------------------------------------------------------


def test_speedup_rounding():
    assert speedup(100, 6) == 16.67
    assert speedup(132, 6) == 22.0
    with pytest.raises(InputError):
        speedup(0, 6)


def test_guided_baselines_match_grid_count():
    # steps whose start time lies in [0.4, 1] on the shift-3 grid, counted directly
    u = 1 - np.arange(50) / 50
    t = 3 * u / (1 + 2 * u)
    inside = int(((t >= 0.4) & (t <= 1.0)).sum())
    assert inside == 41
    assert guided_baselines() == {"generation": 2 * 50, "editing": 3 * inside + (50 - inside)}


@pytest.mark.parametrize("rows", [1, 4])
def test_measured_evals_on_batched_condition(rows):
    net = FlowNet(FlowNetConfig(dim=2, hidden=8, depth=1, n_classes=3, guidance_embed=True))
    g = GuidanceCondition(torch.zeros(rows, dtype=torch.long), w_text=4.0)
    assert measured_evals(net, g, 6) == 6


def test_stage_table():
    rows = {r.name: r for r in stage_table()}
    assert rows["generation"].speedup == 16.67
    assert rows["editing"].speedup == 22.0
    assert nfe_speedup_table([("x", 10, 5)])[0].to_dict() == {"name": "x", "baseline_nfe": 10, "distilled_nfe": 5, "speedup": 2.0}


# -- ablation matrix ---------------------------------------------------------------


def _stub_trainer(scores):
    """Fake draft trainer: returns a checkpoint tagging the variant; evaluation is patched."""

    def trainer(target_ckpt, target, data, cfg, seed, train_cfg):
        name = _variant(cfg)
        if scores[name] is None:
            raise TrainingError("diverged", 0)
        return StageCheckpoint("draft", {}, extra={"name": name, "seed": seed})

    return trainer


def _variant(cfg):
    return {(True, False): "full", (False, False): "no_zero_init", (True, True): "no_ce", (False, True): "no_zero_init_no_ce"}[
        (cfg.zero_init, cfg.ce_weight == 0.0)
    ]


def test_ablation_suite_records_failures(monkeypatch):
    import hyperlab.bench.ablation as ab

    scores = {"full": 3.0, "no_zero_init": 2.0, "no_ce": 2.9, "no_zero_init_no_ce": None}

    class Rep:
        def __init__(self, tau):
            self.tau, self.alpha_mean = tau, tau / 4

    monkeypatch.setattr(ab, "load_draft", lambda ck, target: ck)
    monkeypatch.setattr(ab, "measure_acceptance", lambda t, d, p, k, max_new: Rep(scores[d.extra["name"]] + 0.01 * d.extra["seed"]))
    m = run_ablation_suite(None, None, [[1, 2, 3]], [[1]], seeds=[0, 1, 2], trainer=_stub_trainer(scores))
    assert len(m.cells) == 12
    assert [c.status for c in m.cells if c.variant == "no_zero_init_no_ce"] == ["failed"] * 3
    assert m.median("full") == pytest.approx(3.01)
    assert m.verdicts() == {"full_gt_no_zero_init": True, "both_removed_gt_no_zero_init": False}
    assert m.to_dict()["reference"]["full"]["tau"] == 3.7709
    with pytest.raises(InputError):
        run_ablation_suite(None, None, [[1]], [], seeds=[0])


def test_ablation_matrix_median():
    from hyperlab.bench.ablation import AblationCell

    m = AblationMatrix([AblationCell("full", s, t, 0.5) for s, t in enumerate([1.0, 5.0, 2.0])])
    assert m.median("full") == 2.0
    assert np.isnan(m.median("no_ce"))
