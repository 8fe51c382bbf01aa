"""Chain speculative decoding with greedy verification.

Sessions are advanced in lock-step batches: every round each active session
drafts ``k`` tokens, the target scores committed + drafted tokens in one
forward pass, and the longest agreeing prefix plus one bonus token is
committed. Greedy verification makes the output identical to plain greedy
decoding of the target, whatever the draft proposes.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from ..errors import ConfigError, InputError, ProtocolError
from .draft import DraftNet
from .target import TargetLM


@dataclass
class RoundRecord:
    proposed: int
    accepted: int
    bonus: int
    proposals: list[int]


@dataclass
class SpecSession:
    committed: list[int]
    prompt_len: int
    # target features for committed[:-1]; the last committed token is the
    # not-yet-verified bonus token
    features: torch.Tensor | None = None
    chain: list[int] = field(default_factory=list)
    rounds: list[RoundRecord] = field(default_factory=list)
    stream: int = 0

    @property
    def generated(self) -> int:
        return len(self.committed) - self.prompt_len

    def output(self, max_new: int | None = None) -> list[int]:
        if max_new is None:
            return list(self.committed)
        return self.committed[: self.prompt_len + max_new]


@torch.no_grad()
def start_sessions(target: TargetLM, prompts: list[list[int]]) -> list[SpecSession]:
    """Prefill: one target pass per prompt yields features and the first token."""
    if not prompts or any(len(p) == 0 for p in prompts):
        raise InputError("prompts must be a non-empty list of non-empty sequences")
    width = max(len(p) for p in prompts)
    batch = torch.tensor([list(p) + [0] * (width - len(p)) for p in prompts], dtype=torch.long)
    target.check_tokens(batch)
    logits, feats = target(batch)
    out = []
    for i, p in enumerate(prompts):
        n = len(p)
        first = int(torch.argmax(logits[i, n - 1]))
        out.append(SpecSession(committed=list(p) + [first], prompt_len=n, features=feats[i, :n], stream=i))
    return out


@torch.no_grad()
def draft_chains(draft: DraftNet, sessions: list[SpecSession], k: int) -> list[list[int]]:
    """Greedy chain of ``k`` draft tokens for every session (batched)."""
    if k < 1:
        raise ProtocolError("k must be >= 1")
    max_seq = draft.target.cfg.max_seq
    for s in sessions:
        if len(s.committed) + k > max_seq:
            raise ProtocolError(f"drafting {k} tokens would exceed the context budget of {max_seq}")
    B = len(sessions)
    anchors = [s.features.shape[0] - 1 for s in sessions]
    W = max(anchors) + 1
    L, D = sessions[0].features.shape[-2:]
    feats = torch.zeros(B, W, L, D, dtype=sessions[0].features.dtype)
    toks = torch.zeros(B, W, dtype=torch.long)
    for b, s in enumerate(sessions):
        n = anchors[b] + 1
        feats[b, :n] = s.features
        toks[b, :n] = torch.tensor(s.committed[1 : n + 1])
    f_in = draft.features_to_input(feats)
    x = draft.draft_input(f_in, draft.target.embed(toks))
    h, real_kv = draft.run_layers(x, keep_kv=True)
    rows = torch.arange(B)
    a = torch.tensor(anchors)
    hidden = h[rows, a]
    real_valid = torch.arange(W)[None, :] <= a[:, None]  # [B, W]
    chain_kv: list[list[tuple]] = [[] for _ in draft.layers]
    proposals = [torch.argmax(draft.logits(hidden), -1)]
    for j in range(1, k):
        xj = draft.draft_input(hidden, draft.target.embed(proposals[-1]))[:, None]
        mask = torch.cat([real_valid, torch.ones(B, j, dtype=torch.bool)], dim=1)[:, None, None, :]
        for li, layer in enumerate(draft.layers):
            ks = [real_kv[li][0]] + [kv[0] for kv in chain_kv[li]]
            vs = [real_kv[li][1]] + [kv[1] for kv in chain_kv[li]]
            xj, kv = layer(xj, mask=mask, extra_kv=(torch.cat(ks, 2), torch.cat(vs, 2)), return_kv=True)
            chain_kv[li].append(kv)
        hidden = xj[:, 0]
        proposals.append(torch.argmax(draft.logits(hidden), -1))
    out = torch.stack(proposals, 1).tolist()
    for s, c in zip(sessions, out):
        s.chain = c
    return out


@torch.no_grad()
def verify_greedy(target: TargetLM, sessions: list[SpecSession], proposals: list[list[int]]) -> list[tuple[int, int]]:
    """Score committed + proposals in one target pass; commit prefix + bonus.

    Returns ``(accepted, bonus)`` per session.
    """
    if any(len(p) == 0 for p in proposals):
        raise InputError("proposals must be non-empty")
    seqs = [s.committed + list(p) for s, p in zip(sessions, proposals)]
    width = max(len(q) for q in seqs)
    batch = torch.tensor([q + [0] * (width - len(q)) for q in seqs], dtype=torch.long)
    target.check_tokens(batch)
    logits, feats = target(batch)
    greedy = torch.argmax(logits, -1)
    results = []
    for b, (s, p) in enumerate(zip(sessions, proposals)):
        c = len(s.committed) - 1
        n = 0
        while n < len(p) and int(greedy[b, c + n]) == p[n]:
            n += 1
        bonus = int(greedy[b, c + n])
        s.committed = s.committed + list(p[:n]) + [bonus]
        s.features = feats[b, : c + n + 1]
        s.rounds.append(RoundRecord(proposed=len(p), accepted=n, bonus=bonus, proposals=list(p)))
        s.chain = []
        results.append((n, bonus))
    return results


def speculative_generate(
    target: TargetLM,
    draft: DraftNet,
    prompts: list[list[int]],
    max_new: int,
    k: int = 10,
    batch: int = 32,
) -> list[SpecSession]:
    """Generate ``max_new`` tokens per prompt; returns the finished sessions."""
    if max_new < 1:
        raise InputError("max_new must be >= 1")
    if max(len(p) for p in prompts) + max_new + k > target.cfg.max_seq:
        raise ProtocolError("prompt + max_new + k exceeds the target context")
    done: list[SpecSession] = []
    for lo in range(0, len(prompts), batch):
        sessions = start_sessions(target, prompts[lo : lo + batch])
        for i, s in enumerate(sessions):
            s.stream = lo + i
        active = [s for s in sessions if s.generated < max_new]
        while active:
            props = draft_chains(draft, active, k)
            verify_greedy(target, active, props)
            active = [s for s in active if s.generated < max_new]
        done.extend(sessions)
    return done


@dataclass
class AcceptanceReport:
    k: int
    tau: float
    tau_without_bonus: float
    alpha: list[float | None]  # conditional acceptance per depth 1..k
    alpha_mean: float  # "k-alpha": mean over depths with at least one attempt
    reached: list[int]
    accepted: list[int]
    rounds: int
    round_log: list[list[dict]]

    def to_dict(self) -> dict:
        return asdict(self)


def report_from_log(round_log: list[list[dict]], k: int) -> AcceptanceReport:
    reached = np.zeros(k, dtype=int)
    accepted = np.zeros(k, dtype=int)
    ns = []
    for rounds in round_log:
        for r in rounds:
            n, m = r["accepted"], r["proposed"]
            ns.append(n)
            # depth d (1-based) is attempted when all shallower drafts were accepted
            for d in range(min(n + 1, m)):
                reached[d] += 1
            accepted[:n] += 1
    if not ns:
        raise InputError("no speculative rounds recorded")
    alpha = [float(accepted[d] / reached[d]) if reached[d] else None for d in range(k)]
    defined = [x for x in alpha if x is not None]
    return AcceptanceReport(
        k=k,
        tau=float(np.mean(ns)) + 1.0,
        tau_without_bonus=float(np.mean(ns)),
        alpha=alpha,
        alpha_mean=float(np.mean(defined)) if defined else math.nan,
        reached=reached.tolist(),
        accepted=accepted.tolist(),
        rounds=len(ns),
        round_log=round_log,
    )


def measure_acceptance(
    target: TargetLM,
    draft: DraftNet,
    prompts: list[list[int]],
    k: int = 10,
    max_new: int = 48,
    batch: int = 32,
) -> AcceptanceReport:
    if not prompts:
        raise InputError("measure_acceptance needs at least one prompt")
    sessions = speculative_generate(target, draft, prompts, max_new, k, batch)
    log = [[asdict(r) for r in s.rounds] for s in sessions]
    return report_from_log(log, k)


def estimate_speedup(tau: float | AcceptanceReport, cost_ratio: float, k: int) -> float:
    """Tokens per unit of target-equivalent compute: tau / (1 + k * c)."""
    if isinstance(tau, AcceptanceReport):
        tau = tau.tau
    if not 0 <= cost_ratio <= 1:
        raise ConfigError("cost ratio must lie in [0, 1]")
    if tau < 1:
        raise ConfigError("tau must be >= 1")
    return tau / (1 + k * cost_ratio)
