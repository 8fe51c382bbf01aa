"""Command-line entry point: ``hyperlab <subcommand> [flags]``.

Every subcommand prints a JSON summary on stdout. Errors print a JSON object
on stderr and exit with the code carried by the exception class
(2 usage/config, 3 missing artifact, 4 lineage, 5 numeric failure).
"""

from __future__ import annotations

import argparse
import fcntl
import hashlib
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import StageCheckpoint
from .errors import ConfigError, HyperlabError, InputError, MissingArtifactError

STAGES = ("cfg", "tscd", "dmdo", "adp", "refl")
VARIANTS = ("full", "no_zero_init", "no_ce", "no_zero_init_no_ce")


# -- run configuration --------------------------------------------------------


def _typed(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; values are JSON when they parse."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = _typed(v)
    return out


@dataclass
class RunConfig:
    subcommand: str
    seed: int
    params: dict = field(default_factory=dict)

    def to_text(self) -> str:
        items = {"subcommand": self.subcommand, "seed": self.seed, **self.params}
        return "".join(f"{k} = {json.dumps(items[k], sort_keys=True)}\n" for k in sorted(items))

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        d = parse_config_text(text)
        return cls(d.pop("subcommand"), int(d.pop("seed")), d)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


@contextmanager
def run_lock(directory: Path):
    """Advisory exclusive lock on ``directory``; a second concurrent run there fails fast."""
    directory.mkdir(parents=True, exist_ok=True)
    fd = os.open(directory / ".hyperlab.lock", os.O_CREAT | os.O_RDWR, 0o644)
    try:
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise ConfigError(f"{directory} is in use by another run") from None
        yield
    finally:
        os.close(fd)


def _load(path) -> StageCheckpoint:
    if path is None:
        raise ConfigError("a checkpoint path is required")
    return StageCheckpoint.load(path)


def _read_lines(path) -> list[list[int]]:
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"no such file: {p}")
    try:
        return [[int(t) for t in line.split()] for line in p.read_text().splitlines() if line.strip()]
    except ValueError:
        raise InputError(f"{p}: expected whitespace-separated integer tokens") from None


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_samples(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"no such file: {p}")
    return np.asarray(json.loads(p.read_text())["samples"], dtype=np.float64)


# -- subcommands --------------------------------------------------------------


def cmd_train_target(a, rc):
    from .lm.corpus import SyntheticCorpus, generate_corpus
    from .lm.target import TargetConfig, TargetTrainConfig, train_target

    if a.corpus:
        corpus = SyntheticCorpus.load(a.corpus, a.vocab, a.seed)
    else:
        corpus = generate_corpus(a.n_seq, a.seq_len, a.vocab, a.seed, latent_split=a.latent_split)
    if a.corpus_out:
        corpus.save(a.corpus_out)
    cfg = TargetConfig(num_layers=a.layers, dim=a.dim, heads=a.heads, vocab=a.vocab, latent_split=a.latent_split)
    tc = TargetTrainConfig(steps=a.steps, batch=a.batch, seq_len=a.seq_len, lr=a.lr)
    ckpt = train_target(corpus, cfg, a.seed, tc)
    ckpt.extra["run_config"] = rc.digest()
    return {"checkpoint": ckpt.save(a.out), "metrics": {k: ckpt.metrics[k] for k in ("heldout_ppl", "unigram_ppl")}}


def cmd_gen_answers(a, rc):
    from .lm.target import generate_self_answers, load_target

    target = load_target(_load(a.target))
    prompts = [p[: a.prompt_len] for p in _read_lines(a.prompts)]
    out = []
    for i in range(0, len(prompts), 200):
        out += generate_self_answers(target, prompts[i : i + 200], a.max_new, a.seed, a.temperature)
    Path(a.out).write_text("".join(" ".join(map(str, s)) + "\n" for s in out))
    return {"sequences": len(out), "sha256": hashlib.sha256(Path(a.out).read_bytes()).hexdigest()}


def cmd_train_draft(a, rc):
    from .lm.draft import DraftConfig, DraftTrainConfig, train_draft
    from .lm.target import load_target

    tck = _load(a.target)
    target = load_target(tck)
    data = _read_lines(a.data)
    tc = DraftTrainConfig(steps=a.steps, batch=a.batch, lr=a.lr)
    ckpt = train_draft(tck, target, data, DraftConfig.ablation(a.variant, ttt_steps=a.ttt_steps), a.seed, tc)
    ckpt.extra["run_config"] = rc.digest()
    return {"checkpoint": ckpt.save(a.out), "final_loss": ckpt.metrics["loss_curve"][-1:]}


def cmd_bench_spec(a, rc):
    from .lm.draft import load_draft
    from .lm.speculative import estimate_speedup, measure_acceptance
    from .lm.target import load_target

    target = load_target(_load(a.target))
    draft = load_draft(_load(a.draft), target)
    prompts = [p[: a.prompt_len] for p in _read_lines(a.prompts)]
    rep = measure_acceptance(target, draft, prompts, k=a.k, max_new=a.max_new)
    report = {
        **rep.to_dict(),
        "speedup_estimate": estimate_speedup(rep, a.cost_ratio, a.k),
        "config_hash": rc.digest(),
        "seed": a.seed,
    }
    if a.report:
        _write_json(a.report, report)
    return {"tau": rep.tau, "tau_without_bonus": rep.tau_without_bonus, "alpha_mean": rep.alpha_mean}


def cmd_train_teacher(a, rc):
    from .flow.core import TeacherTrainConfig, train_teacher

    ckpt = train_teacher(TeacherTrainConfig(data=a.data, steps=a.steps, batch=a.batch, lr=a.lr), a.seed)
    ckpt.extra["run_config"] = rc.digest()
    return {"checkpoint": ckpt.save(a.out), "final_loss": ckpt.metrics["loss_curve"][-1:]}


def cmd_distill(a, rc):
    from .checkpoint import require_parent

    st = a.stage
    if st == "cfg":
        from .distill.guidance import CfgDistillConfig, distill_cfg

        kw = {"shift": a.shift} | ({"steps": a.steps} if a.steps else {})
        ckpt = distill_cfg(_load(a.teacher), a.seed, CfgDistillConfig(**kw))
    elif st == "tscd":
        from .distill.adversarial import TscdConfig, train_tscd

        student = _load(a.student)
        require_parent("tscd", student)
        kw = {"heads": a.heads, "shift": a.shift} | ({"steps": a.steps} if a.steps else {})
        ckpt = train_tscd(student, _load(a.teacher), a.seed, TscdConfig(**kw))
    elif st == "dmdo":
        from .distill.dmdo import DmdoConfig, train_dmdo

        student = _load(a.student)
        require_parent("dmdo", student)
        kw = {"nfe": a.nfe, "shift": a.shift} | ({"iters": a.iters} if a.iters else {})
        kw |= {k: v for k, v in (("reflow_pairs", a.reflow_pairs), ("reflow_steps", a.reflow_steps)) if v}
        ckpt = train_dmdo(student, _load(a.real), a.seed, DmdoConfig(**kw))
    elif st == "adp":
        from .distill.onestep import AdpConfig, train_adp

        student = _load(a.student)
        require_parent("adp", student)
        kw = {"heads": a.heads, "shift": a.shift} | ({"steps": a.steps} if a.steps else {})
        ckpt = train_adp(student, a.seed, AdpConfig(**kw))
    else:
        from .distill.onestep import ReflConfig, train_refl

        student = _load(a.student)
        require_parent("refl", student)
        kw = {"alpha_d": a.alpha_d} | ({"steps": a.steps} if a.steps else {})
        ckpt = train_refl(student, a.seed, ReflConfig(**kw))
    ckpt.extra["run_config"] = rc.digest()
    return {"stage": st, "checkpoint": ckpt.save(a.out), "lineage": ckpt.lineage}


def _sample_ckpt(ckpt, a, n, seed, nfe=None):
    from .bench.evaluate import stage_nfe
    from .flow.core import GuidanceCondition, euler_sample, load_flow, spec_of
    from .flow.data import sample_mixture

    model = load_flow(ckpt)
    spec = spec_of(ckpt)
    rng = np.random.default_rng(seed)
    xT = torch.from_numpy(rng.standard_normal((n, spec.dim))).float()
    if getattr(a, "label", None) is None:
        labels = torch.from_numpy(rng.integers(model.cfg.n_classes, size=n))
    else:
        labels = torch.full((n,), int(a.label))
    if getattr(a, "edit", False):
        src = sample_mixture(spec, n, rng).x
        g = GuidanceCondition(labels, w_text=a.w_text, w_img=a.w_img, src=src, mode="edit")
    else:
        g = GuidanceCondition(labels, w_text=getattr(a, "w_text", 1.0))
    nfe = nfe or getattr(a, "nfe", None) or stage_nfe(ckpt)
    return euler_sample(model, xT, nfe, a.shift, g), labels, spec


def cmd_sample(a, rc):
    ckpt = _load(a.ckpt)
    traj, labels, spec = _sample_ckpt(ckpt, a, a.n, a.seed)
    x = traj.x_0.numpy()
    out = {
        "samples": x.tolist(),
        "labels": labels.tolist(),
        "nfe": traj.nfe,
        "model_evals": traj.model_evals,
        "stage": ckpt.stage,
        "config_hash": rc.digest(),
        "seed": a.seed,
    }
    if a.out:
        _write_json(a.out, out)
    if a.plot:
        from .plotting import emit_plot

        shown = traj.states[:, :32].numpy()
        emit_plot({f"{ckpt.stage} ({traj.nfe} NFE)": x}, a.plot, {f"{ckpt.stage} ({traj.nfe} NFE)": shown}, spec.centers())
    return {"n": len(x), "nfe": traj.nfe, "model_evals": traj.model_evals}


def cmd_eval(a, rc):
    from .bench.evaluate import heldout
    from .bench.metrics import dist_report
    from .flow.core import spec_of

    ckpt = _load(a.ckpt)
    traj, _, spec = _sample_ckpt(ckpt, a, a.n, a.seed)
    if a.against == "data":
        ref = heldout(spec_of(ckpt), a.n, a.seed)
    else:
        teacher = _load(a.teacher)
        ref = _sample_ckpt(teacher, a, a.n, a.seed, nfe=a.teacher_nfe)[0].x_0.numpy()
    rep = dist_report(traj.x_0.numpy(), ref, seeds=[a.seed])
    metrics = {"energy": rep.energy, "sw": rep.sliced_w2}
    chosen = metrics if a.metric == "both" else {a.metric: metrics[a.metric]}
    report = {
        **chosen,
        "n": a.n,
        "nfe": traj.nfe,
        "against": a.against,
        "stage": ckpt.stage,
        "config_hash": rc.digest(),
        "seed": a.seed,
    }
    if a.report:
        _write_json(a.report, report)
    return chosen


def cmd_ablate(a, rc):
    from .bench.ablation import run_ablation_suite
    from .lm.draft import DraftTrainConfig
    from .lm.target import load_target

    if a.suite != "table1":
        raise ConfigError(f"unknown suite {a.suite!r}")
    tck = _load(a.target)
    target = load_target(tck)
    data = _read_lines(a.data)
    prompts = [p[: a.prompt_len] for p in _read_lines(a.prompts)]
    seeds = [a.seed + i for i in range(a.seeds)]
    m = run_ablation_suite(tck, target, data, prompts, seeds, DraftTrainConfig(steps=a.steps), k=a.k)
    report = {**m.to_dict(), "config_hash": rc.digest(), "seeds": seeds}
    if a.report:
        _write_json(a.report, report)
    return {"medians": report["medians"], "verdicts": report["verdicts"]}


def cmd_plot(a, rc):
    from .flow.data import MixtureSpec
    from .plotting import emit_plot

    panels = {}
    for path in a.samples or []:
        panels[Path(path).stem] = _read_samples(path)
    for flag, nfe, title in ((a.teacher, 50, "teacher, 50 steps"), (a.six_nfe, 6, "6-NFE"), (a.one_nfe, 1, "1-NFE")):
        if flag:
            traj, _, _ = _sample_ckpt(_load(flag), a, a.n, a.seed, nfe=nfe)
            panels[title] = traj.x_0.numpy()
    emit_plot(panels, a.out, centers=MixtureSpec().centers())
    return {"panels": list(panels), "sha256": hashlib.sha256(Path(a.out).read_bytes()).hexdigest()}


# -- parser -------------------------------------------------------------------


def _seed_default() -> int:
    try:
        return int(os.environ.get("HYPERLAB_SEED", "0"))
    except ValueError:
        raise ConfigError("HYPERLAB_SEED must be an integer") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hyperlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        s = sub.add_parser(name, help=help_, description=help_)
        s.add_argument("--seed", type=int, default=None, help="root seed (default: $HYPERLAB_SEED or 0)")
        s.add_argument("--config", default=None, help="flat key = value file; flags override it")
        s.set_defaults(func=fn)
        return s

    s = add("train-target", cmd_train_target, "train the target language model on a grammar corpus")
    s.add_argument("--corpus", help="token-line corpus file (default: generate one)")
    s.add_argument("--corpus-out")
    s.add_argument("--n-seq", type=int, default=2000)
    s.add_argument("--seq-len", type=int, default=64)
    s.add_argument("--vocab", type=int, default=256)
    s.add_argument("--latent-split", type=int, default=None)
    s.add_argument("--layers", type=int, default=6)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--steps", type=int, default=1500)
    s.add_argument("--batch", type=int, default=32)
    s.add_argument("--lr", type=float, default=3e-3)
    s.add_argument("--out", required=True)

    s = add("gen-answers", cmd_gen_answers, "continue prompts with the target to build draft training data")
    s.add_argument("--target", required=True)
    s.add_argument("--prompts", required=True)
    s.add_argument("--prompt-len", type=int, default=16)
    s.add_argument("--max-new", type=int, default=48)
    s.add_argument("--temperature", type=float, default=0.0)
    s.add_argument("--out", required=True)

    s = add("train-draft", cmd_train_draft, "train a draft network on self-generated answers")
    s.add_argument("--target", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--variant", choices=VARIANTS, default="full")
    s.add_argument("--steps", type=int, default=1500)
    s.add_argument("--batch", type=int, default=16)
    s.add_argument("--lr", type=float, default=3e-3)
    s.add_argument("--ttt-steps", type=int, default=3)
    s.add_argument("--out", required=True)

    s = add("bench-spec", cmd_bench_spec, "measure acceptance length of speculative greedy decoding")
    s.add_argument("--target", required=True)
    s.add_argument("--draft", required=True)
    s.add_argument("--prompts", required=True)
    s.add_argument("--prompt-len", type=int, default=16)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--max-new", type=int, default=48)
    s.add_argument("--cost-ratio", type=float, default=0.0, help="draft cost per step relative to the target")
    s.add_argument("--report")

    s = add("train-teacher", cmd_train_teacher, "train the conditional rectified-flow teacher")
    s.add_argument("--data", choices=("mixture", "moons"), default="mixture")
    s.add_argument("--steps", type=int, default=4000)
    s.add_argument("--batch", type=int, default=512)
    s.add_argument("--lr", type=float, default=2e-3)
    s.add_argument("--out", required=True)

    s = add("distill", cmd_distill, "run one distillation stage")
    s.add_argument("--stage", choices=STAGES, required=True)
    s.add_argument("--teacher")
    s.add_argument("--student", help="parent checkpoint of the stage")
    s.add_argument("--real", help="guidance-distilled student used as the real model (dmdo)")
    s.add_argument("--heads", type=int, default=3)
    s.add_argument("--nfe", type=int, default=6)
    s.add_argument("--iters", type=int, default=None)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--shift", type=float, default=3.0)
    s.add_argument("--reflow-pairs", type=int, default=None, help="ODE pairs for refitting the real model (dmdo)")
    s.add_argument("--reflow-steps", type=int, default=None)
    s.add_argument("--alpha-d", type=float, default=6.0)
    s.add_argument("--out", required=True)

    def sampling_flags(s):
        s.add_argument("--nfe", type=int, default=None, help="default: the stage's own step count")
        s.add_argument("--w-text", type=float, default=1.0)
        s.add_argument("--w-img", type=float, default=1.0)
        s.add_argument("--edit", action="store_true", help="editing mode with mixture sources")
        s.add_argument("--label", type=int, default=None, help="fixed class (default: uniform)")
        s.add_argument("--shift", type=float, default=3.0)
        s.add_argument("--n", type=int, default=5000)

    s = add("sample", cmd_sample, "draw samples from a flow checkpoint")
    s.add_argument("--ckpt", required=True)
    sampling_flags(s)
    s.add_argument("--out")
    s.add_argument("--plot")

    s = add("eval", cmd_eval, "distributional distance of a stage's samples")
    s.add_argument("--ckpt", required=True)
    sampling_flags(s)
    s.add_argument("--metric", choices=("energy", "sw", "both"), default="energy")
    s.add_argument("--against", choices=("data", "teacher"), default="data")
    s.add_argument("--teacher")
    s.add_argument("--teacher-nfe", type=int, default=50)
    s.add_argument("--report")

    s = add("ablate", cmd_ablate, "train and compare the four draft variants")
    s.add_argument("--suite", default="table1")
    s.add_argument("--seeds", type=int, default=3)
    s.add_argument("--target", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--prompts", required=True)
    s.add_argument("--prompt-len", type=int, default=16)
    s.add_argument("--steps", type=int, default=1500)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--report")

    s = add("plot", cmd_plot, "scatter panels from sample files or checkpoints")
    s.add_argument("--samples", nargs="*")
    s.add_argument("--teacher")
    s.add_argument("--six-nfe")
    s.add_argument("--one-nfe")
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--shift", type=float, default=3.0)
    s.add_argument("--w-text", type=float, default=1.0)
    s.add_argument("--out", required=True)
    return p


def _outputs(a) -> list[str]:
    return [v for k in ("out", "report", "plot", "corpus_out") if (v := getattr(a, k, None))]


def parse(argv) -> tuple[argparse.Namespace, RunConfig]:
    parser = build_parser()
    a = parser.parse_args(argv)
    if a.config:
        p = Path(a.config)
        if not p.exists():
            raise MissingArtifactError(f"no such config file: {p}")
        values = parse_config_text(p.read_text())
        sub = parser._subparsers._group_actions[0].choices[a.command]
        known = {act.dest for act in sub._actions}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        sub.set_defaults(**values)
        a = parser.parse_args(argv)
    if a.seed is None:
        a.seed = _seed_default()
    # output locations do not change results, so they stay out of the run digest
    skip = {"func", "command", "seed", "config", "out", "report", "plot", "corpus_out"}
    params = {k: v for k, v in sorted(vars(a).items()) if k not in skip}
    return a, RunConfig(a.command, a.seed, params)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        a, rc = parse(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except HyperlabError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return e.exit_code
    try:
        dirs = sorted({Path(o).resolve().parent for o in _outputs(a)})
        torch.manual_seed(a.seed)
        with _locks(dirs):
            result = a.func(a, rc)
        print(json.dumps({"command": a.command, "config_hash": rc.digest(), **result}, sort_keys=True))
        return 0
    except HyperlabError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(json.dumps({"error": "OSError", "message": str(e)}), file=sys.stderr)
        return 1


@contextmanager
def _locks(dirs):
    if not dirs:
        yield
        return
    with run_lock(dirs[0]), _locks(dirs[1:]):
        yield


if __name__ == "__main__":
    sys.exit(main())
