"""Draft head with meta-query feature aggregation.

Data flow for one sequence::

    target layer features f_i [L, D] per token
      -> cross-attention with learnable meta queries f_q [Q, D]
      -> flatten + concat(low, mid, high) residual        F_c  [S, Q*D]
      -> fc1 -> aggregation decoder layer (Dec)           F_in [S, D]
      -> fc2(concat(F_in[p], emb(token[p+1])))            draft input
      -> N draft decoder layers (copied from the target) -> frozen norm + LM head

At zero-init the cross-attention output projection, Dec's output projections,
fc1 and fc2 are all zero, so F_c equals the EAGLE-3 style residual, F_in is 0
and the draft layers see an all-zero input.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..checkpoint import StageCheckpoint, child_ancestors, module_tensors, require_parent
from ..errors import ConfigError, InputError, ProtocolError, TrainingError
from .layers import DecoderLayer, causal_mask
from .target import TargetLM

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class DraftConfig:
    num_layers: int = 2
    num_queries: int = 3
    ce_weight: float = 0.1
    zero_init: bool = True
    # unrolled self-feeding steps during training (0 = depth-1 teacher forcing only)
    ttt_steps: int = 3
    dec_causal: bool = True

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError("draft needs at least one decoder layer")
        if self.ce_weight < 0:
            raise ConfigError("ce_weight must be non-negative")
        if self.num_queries != 3:
            raise ConfigError("direct residual wiring needs Q*D == 3*D, i.e. num_queries == 3")
        if self.ttt_steps < 0:
            raise ConfigError("ttt_steps must be >= 0")

    @classmethod
    def ablation(cls, name: str, **kw) -> "DraftConfig":
        flags = {
            "full": {},
            "no_zero_init": {"zero_init": False},
            "no_ce": {"ce_weight": 0.0},
            "no_zero_init_no_ce": {"zero_init": False, "ce_weight": 0.0},
        }
        if name not in flags:
            raise ConfigError(f"unknown ablation {name!r}")
        return cls(**{**kw, **flags[name]})


class MetaQueryAttention(nn.Module):
    """Shared meta queries attend over one token's stack of L layer features."""

    def __init__(self, dim: int, heads: int, num_queries: int):
        super().__init__()
        self.heads = heads
        self.queries = nn.Parameter(torch.randn(num_queries, dim) * 0.5)
        self.norm_kv = nn.LayerNorm(dim)
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        """feats [..., L, D] -> attention output [..., Q, D] (before flattening)."""
        *lead, L, D = feats.shape
        H, dh = self.heads, D // self.heads
        kv = self.norm_kv(feats)
        k = self.k_proj(kv).view(*lead, L, H, dh).transpose(-2, -3)  # [..., H, L, dh]
        v = self.v_proj(kv).view(*lead, L, H, dh).transpose(-2, -3)
        q = self.q_proj(self.queries).view(-1, H, dh).transpose(0, 1)  # [H, Q, dh]
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)  # [..., H, Q, L]
        out = (att @ v).transpose(-2, -3).reshape(*lead, -1, D)  # [..., Q, D]
        return self.out_proj(out)


@dataclass
class DraftState:
    """Per-layer key/value cache of one chain-decoding session."""

    kv: list[list[tuple[torch.Tensor, torch.Tensor]]]
    length: int = 0
    last_hidden: torch.Tensor | None = None

    @classmethod
    def empty(cls, num_layers: int) -> "DraftState":
        return cls(kv=[[] for _ in range(num_layers)])

    def layer_kv(self, i: int):
        if not self.kv[i]:
            return None
        ks, vs = zip(*self.kv[i])
        return torch.cat(ks, dim=2), torch.cat(vs, dim=2)


class DraftNet(nn.Module):
    def __init__(self, target: TargetLM, cfg: DraftConfig | None = None):
        super().__init__()
        cfg = cfg or DraftConfig()
        tc = target.cfg
        if cfg.num_layers > tc.num_layers:
            raise ConfigError("draft cannot copy more layers than the target has")
        self.cfg = cfg
        self.dim = tc.dim
        # kept outside the module tree: frozen, shared, never saved with the draft
        self._target = (target,)
        self.levels = tc.levels
        self.ca = MetaQueryAttention(tc.dim, tc.heads, cfg.num_queries)
        self.dec = DecoderLayer(tc.dim, tc.heads, tc.mlp_ratio)
        self.fc1 = nn.Linear(cfg.num_queries * tc.dim, tc.dim)
        self.fc2 = nn.Linear(2 * tc.dim, tc.dim)
        self.layers = nn.ModuleList(copy.deepcopy(layer) for layer in target.layers[tc.num_layers - cfg.num_layers :])
        for p in self.layers.parameters():
            p.requires_grad_(True)
        if cfg.zero_init:
            self.apply_zero_init()
        else:
            # plain small-random init for the new projections
            for lin in (self.ca.out_proj, self.fc1, self.fc2):
                nn.init.normal_(lin.weight, std=1.0 / math.sqrt(lin.in_features))
                nn.init.zeros_(lin.bias)
        self.to(next(target.parameters()).dtype)

    @property
    def target(self) -> TargetLM:
        return self._target[0]

    def apply_zero_init(self) -> None:
        nn.init.zeros_(self.ca.out_proj.weight)
        nn.init.zeros_(self.ca.out_proj.bias)
        self.dec.zero_output_projections()
        for lin in (self.fc1, self.fc2):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    # -- intermediate layer ---------------------------------------------

    def residual(self, feats: torch.Tensor) -> torch.Tensor:
        lo, mid, hi = self.levels
        return torch.cat([feats[..., lo, :], feats[..., mid, :], feats[..., hi, :]], dim=-1)

    def aggregate_features(self, feats: torch.Tensor) -> torch.Tensor:
        """feats [..., S, L, D] -> F_c [..., S, Q*D]."""
        if not torch.isfinite(feats).all():
            raise InputError("non-finite target features")
        out = self.ca(feats)
        return out.flatten(-2) + self.residual(feats)

    def intermediate_forward(self, fc: torch.Tensor) -> torch.Tensor:
        """F_c [B, S, Q*D] -> F_in [B, S, D]."""
        h = self.fc1(fc)
        S = h.shape[-2]
        mask = causal_mask(S, h.device) if self.cfg.dec_causal else torch.ones(S, S, dtype=torch.bool)
        return self.dec(h, mask=mask)

    def features_to_input(self, feats: torch.Tensor) -> torch.Tensor:
        return self.intermediate_forward(self.aggregate_features(feats))

    # -- draft decoding ---------------------------------------------------

    def draft_input(self, feature: torch.Tensor, token_emb: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.cat([feature, token_emb], dim=-1))

    def logits(self, hidden: torch.Tensor) -> torch.Tensor:
        t = self.target
        return t.head(t.norm_f(hidden))

    def run_layers(self, x, mask=None, past=None, keep_kv=False):
        """Run the draft decoder stack. ``past`` is a per-layer list of cached (k, v)."""
        kvs = []
        for i, layer in enumerate(self.layers):
            x, kv = layer(x, mask=mask, extra_kv=None if past is None else past[i], return_kv=True)
            kvs.append(kv)
        return (x, kvs) if keep_kv else x

    def draft_decode_step(
        self,
        feature: torch.Tensor,
        token_emb: torch.Tensor,
        state: DraftState,
        position: int | None = None,
    ) -> tuple[torch.Tensor, DraftState]:
        """One chain step for a single position.

        feature, token_emb: [B, D] (or [D]). Returns logits [B, V] (or [V]) and
        the extended state. ``position`` is checked against the cache length.
        """
        if position is not None and position != state.length:
            raise ProtocolError(f"decode step for position {position} but state holds {state.length}")
        if len(state.kv) != len(self.layers):
            raise ProtocolError("draft state built for a different number of layers")
        squeeze = feature.dim() == 1
        if squeeze:
            feature, token_emb = feature[None], token_emb[None]
        x = self.draft_input(feature, token_emb)[:, None]  # [B, 1, D]
        n = state.length
        mask = torch.ones(1, n + 1, dtype=torch.bool)
        new_kv = []
        for i, layer in enumerate(self.layers):
            past = state.layer_kv(i)
            if past is not None and past[0].shape[0] != x.shape[0]:
                raise ProtocolError("batch size differs from cached state")
            x, kv = layer(x, mask=mask, extra_kv=past, return_kv=True)
            new_kv.append(state.kv[i] + [kv])
        hidden = x[:, 0]
        logits = self.logits(hidden)
        new_state = DraftState(kv=new_kv, length=n + 1, last_hidden=hidden)
        return (logits[0], new_state) if squeeze else (logits, new_state)

    def unrolled_logits(self, feats: torch.Tensor, tokens: torch.Tensor, steps: int | None = None) -> list[torch.Tensor]:
        """Training-time unroll over a whole batch.

        feats [B, S, L, D] and tokens [B, S] of the same sequences. Returns one
        logits tensor [B, S-1, V] per unroll depth j = 0..steps. Row p at depth
        j predicts token p+2 from the draft's own depth-(j-1) hidden state at
        p-1; rows p < j have no valid chain and should be masked by the caller.
        Attention mirrors chain decoding from anchor p-j: real positions <= p-j
        plus the j chain entries on the diagonal.
        """
        steps = self.cfg.ttt_steps if steps is None else steps
        f_in = self.features_to_input(feats)[:, :-1]  # [B, S-1, D]
        emb = self.target.embed(tokens[:, 1:])  # token p+1 for row p
        S1 = emb.shape[1]
        idx = torch.arange(S1)
        x = self.draft_input(f_in, emb)
        past = [[] for _ in self.layers]
        out = []
        hidden = None
        for j in range(steps + 1):
            if j > 0:
                prev = torch.cat([torch.zeros_like(hidden[:, :1]), hidden[:, :-1]], dim=1)
                x = self.draft_input(prev, emb)
            # key blocks: depth 0 (r <= p - j), depth i >= 1 (r == p - j + i)
            blocks = [idx[None, :] <= (idx[:, None] - j)]
            blocks += [idx[None, :] == (idx[:, None] - j + i) for i in range(1, j + 1)]
            mask = torch.cat(blocks, dim=1)
            h = x
            for li, layer in enumerate(self.layers):
                extra = None
                if past[li]:
                    extra = (torch.cat([k for k, _ in past[li]], 2), torch.cat([v for _, v in past[li]], 2))
                h, kv = layer(h, mask=mask, extra_kv=extra, return_kv=True)
                past[li].append(kv)
            hidden = h
            out.append(self.logits(h))
        return out


def _check_prob(p: torch.Tensor, name: str) -> None:
    if p.dim() < 1 or (p < 0).any() or not torch.allclose(p.sum(-1), torch.ones((), dtype=p.dtype), atol=1e-6):
        raise InputError(f"{name} is not a probability vector")


def draft_loss(p_target, p_draft, lam: float = 0.1, telemetry: dict | None = None) -> torch.Tensor:
    """KL(p_target || p_draft) + lam * (-log p_draft[argmax p_target]).

    Works on [..., V] and returns the mean over leading dims. Exact zeros of
    ``p_draft`` are floored at 1e-12; the number of floored support points is
    written to ``telemetry["clamped"]``.
    """
    p_target = torch.as_tensor(p_target, dtype=torch.float64)
    p_draft = torch.as_tensor(p_draft, dtype=torch.float64)
    _check_prob(p_target, "p_target")
    _check_prob(p_draft, "p_draft")
    support = p_target > 0
    if telemetry is not None:
        telemetry["clamped"] = int((support & (p_draft < PROB_FLOOR)).sum())
    log_d = torch.log(p_draft.clamp_min(PROB_FLOOR))
    log_t = torch.log(torch.where(support, p_target, torch.ones_like(p_target)))
    kl = (p_target * (log_t - log_d)).sum(-1)
    hard = torch.argmax(p_target, dim=-1, keepdim=True)  # first max = lowest index
    ce = -log_d.gather(-1, hard).squeeze(-1)
    return (kl + lam * ce).mean()


def draft_loss_from_logits(target_logits, draft_logits, lam: float, mask=None) -> torch.Tensor:
    """Same objective as :func:`draft_loss` computed from logits, averaged over ``mask``."""
    log_t = F.log_softmax(target_logits, -1)
    log_d = F.log_softmax(draft_logits, -1)
    kl = (log_t.exp() * (log_t - log_d)).sum(-1)
    hard = torch.argmax(target_logits, dim=-1, keepdim=True)
    per = kl - lam * log_d.gather(-1, hard).squeeze(-1)
    if mask is None:
        return per.mean()
    return (per * mask).sum() / mask.sum()


@dataclass
class DraftTrainConfig:
    steps: int = 1500
    batch: int = 16
    seq_len: int = 64
    lr: float = 3e-3
    warmup: int = 50
    log_every: int = 100


def draft_objective(draft: DraftNet, tokens: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        t_logits, feats = draft.target(tokens)
    outs = draft.unrolled_logits(feats, tokens)
    tgt = t_logits[:, 1:]  # row p+1 of the target predicts token p+2
    S1 = tgt.shape[1]
    total = 0.0
    for j, lg in enumerate(outs):
        mask = (torch.arange(S1) >= j).to(lg.dtype)[None].expand(lg.shape[0], -1)
        total = total + draft_loss_from_logits(tgt, lg, draft.cfg.ce_weight, mask)
    return total / len(outs)


def train_draft(
    target_ckpt: StageCheckpoint,
    target: TargetLM,
    data: list[list[int]],
    cfg: DraftConfig,
    seed: int,
    train_cfg: DraftTrainConfig | None = None,
) -> StageCheckpoint:
    """Train the draft head on self-answer sequences with the target frozen."""
    require_parent("draft", target_ckpt)
    tc = train_cfg or DraftTrainConfig()
    if not data:
        raise InputError("no draft training data")
    for p in target.parameters():
        p.requires_grad_(False)
    torch.manual_seed(seed)
    draft = DraftNet(target, cfg)
    params = [p for p in draft.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=tc.lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / tc.warmup) * 0.5 * (1 + math.cos(math.pi * min(s, tc.steps) / tc.steps))
    )
    rng = np.random.default_rng(seed)
    seq_len = min(tc.seq_len, target.cfg.max_seq, min(len(s) for s in data))
    if seq_len < 3:
        raise InputError("draft training sequences need at least 3 tokens")
    curve, window = [], []
    for step in range(tc.steps):
        rows = []
        for i in rng.integers(len(data), size=tc.batch):
            s = data[i]
            o = int(rng.integers(len(s) - seq_len + 1))
            rows.append(s[o : o + seq_len])
        loss = draft_objective(draft, torch.tensor(rows, dtype=torch.long))
        val = loss.item()
        if not math.isfinite(val):
            raise TrainingError("non-finite draft loss", step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        window.append(val)
        if len(window) == tc.log_every:
            curve.append(float(np.mean(window)))
            window = []
    draft.eval()
    return StageCheckpoint(
        stage="draft",
        tensors=module_tensors(draft),
        config={"draft": asdict(cfg), "train": vars(tc).copy(), "target": target_ckpt.config["model"]},
        seed=seed,
        ancestors=child_ancestors(target_ckpt),
        metrics={"loss_curve": curve},
        extra={"ablation": {"no_zero_init": not cfg.zero_init, "no_ce_loss": cfg.ce_weight == 0.0}},
    )


def load_draft(ckpt: StageCheckpoint, target: TargetLM) -> DraftNet:
    if ckpt.stage != "draft":
        raise InputError(f"expected a draft checkpoint, got {ckpt.stage!r}")
    draft = DraftNet(target, DraftConfig(**ckpt.config["draft"]))
    ckpt.load_into(draft)
    draft.eval()
    return draft
