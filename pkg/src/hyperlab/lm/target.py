"""Tiny decoder-only target language model with per-layer feature export."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..checkpoint import StageCheckpoint, module_tensors
from ..errors import ConfigError, InputError, TrainingError
from .corpus import SyntheticCorpus
from .layers import DecoderLayer


@dataclass(frozen=True)
class TargetConfig:
    num_layers: int = 6
    dim: int = 64
    heads: int = 4
    vocab: int = 256
    max_seq: int = 128
    mlp_ratio: int = 4
    # (low, mid, high) layer indices; defaults to (1, L // 2, L - 2), or (0, L // 2, L - 1) below 5 layers
    feature_layers: tuple[int, int, int] | None = None
    # ids >= latent_split are embedded through a separate frozen "latent" table
    latent_split: int | None = None
    latent_scale: float = 3.0

    def __post_init__(self):
        for name in ("num_layers", "dim", "heads", "vocab", "max_seq", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.dim % self.heads:
            raise ConfigError("dim must be divisible by heads")
        if self.num_layers < 3:
            raise ConfigError("need at least 3 layers for distinct low/mid/high features")
        if self.feature_layers is not None:
            object.__setattr__(self, "feature_layers", tuple(int(i) for i in self.feature_layers))
        lo, mid, hi = self.levels
        if not (0 <= lo < mid < hi < self.num_layers):
            raise ConfigError(f"feature layers must satisfy 0 <= low < mid < high < L, got {self.levels}")
        if self.latent_split is not None and not 0 < self.latent_split < self.vocab:
            raise ConfigError("latent_split must lie inside the vocabulary")

    @property
    def levels(self) -> tuple[int, int, int]:
        if self.feature_layers is not None:
            return self.feature_layers
        L = self.num_layers
        return (1, L // 2, L - 2) if L >= 5 else (0, L // 2, L - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["feature_layers"] is not None:
            d["feature_layers"] = list(d["feature_layers"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TargetConfig":
        d = dict(d)
        if d.get("feature_layers") is not None:
            d["feature_layers"] = tuple(d["feature_layers"])
        return cls(**d)


@dataclass
class LayerFeatureStack:
    """Residual-stream output of every target layer, [..., S, L, D]."""

    features: torch.Tensor
    low: int
    mid: int
    high: int

    def __post_init__(self):
        if not (self.low < self.mid < self.high):
            raise ConfigError("feature levels must be strictly increasing")

    def residual(self) -> torch.Tensor:
        """concat(low, mid, high) per position, [..., S, 3D]."""
        f = self.features
        return torch.cat([f[..., self.low, :], f[..., self.mid, :], f[..., self.high, :]], dim=-1)


class TargetLM(nn.Module):
    def __init__(self, cfg: TargetConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab, cfg.dim)
        self.pos_emb = nn.Embedding(cfg.max_seq, cfg.dim)
        nn.init.normal_(self.tok_emb.weight, std=0.5)
        nn.init.normal_(self.pos_emb.weight, std=0.1)
        if cfg.latent_split is not None:
            g = torch.Generator().manual_seed(1234)
            lat = torch.randn(cfg.vocab, cfg.dim, generator=g) * cfg.latent_scale
            self.register_buffer("latent_emb", lat)
        self.layers = nn.ModuleList(DecoderLayer(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.num_layers))
        self.norm_f = nn.LayerNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, cfg.vocab, bias=False)

    def check_tokens(self, tokens: torch.Tensor) -> None:
        if tokens.shape[-1] > self.cfg.max_seq:
            raise InputError(f"sequence length {tokens.shape[-1]} exceeds max_seq {self.cfg.max_seq}")
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.cfg.vocab):
            raise InputError("token id outside vocabulary")

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        """Token embeddings without positions (shared with the draft head)."""
        e = self.tok_emb(tokens)
        if self.cfg.latent_split is not None:
            lat = self.latent_emb[tokens].to(e.dtype)
            e = torch.where((tokens >= self.cfg.latent_split).unsqueeze(-1), lat, e)
        return e

    def forward(self, tokens: torch.Tensor):
        """tokens [B, S] -> (logits [B, S, V], features [B, S, L, D])."""
        self.check_tokens(tokens)
        S = tokens.shape[-1]
        x = self.embed(tokens) + self.pos_emb.weight[:S]
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return self.head(self.norm_f(x)), torch.stack(feats, dim=-2)

    def logits_only(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.forward(tokens)[0]

    def suffix(self, hidden: torch.Tensor, n: int) -> torch.Tensor:
        """Run the last ``n`` layers plus final norm and head on a hidden sequence."""
        x = hidden
        for layer in self.layers[len(self.layers) - n :]:
            x = layer(x)
        return self.head(self.norm_f(x))

    def forward_with_features(self, tokens) -> tuple[torch.Tensor, LayerFeatureStack]:
        """Single sequence [S] -> (logits [S, V], LayerFeatureStack over [S, L, D])."""
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.dim() != 1:
            raise InputError("forward_with_features expects a 1-D token sequence")
        self.check_tokens(tokens)
        logits, feats = self.forward(tokens[None])
        lo, mid, hi = self.cfg.levels
        return logits[0], LayerFeatureStack(feats[0], lo, mid, hi)


def lm_loss(model: TargetLM, tokens: torch.Tensor) -> torch.Tensor:
    """Mean next-token cross entropy over a [B, S] batch."""
    logits = model.logits_only(tokens[:, :-1])
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tokens[:, 1:].reshape(-1))


def _batches(seqs: list[list[int]], seq_len: int, batch: int, rng: np.random.Generator):
    while True:
        rows = []
        for i in rng.integers(len(seqs), size=batch):
            s = seqs[i]
            if len(s) <= seq_len:
                rows.append(s[:seq_len] + [s[-1]] * (seq_len - len(s)))
            else:
                o = int(rng.integers(len(s) - seq_len + 1))
                rows.append(s[o : o + seq_len])
        yield torch.tensor(rows, dtype=torch.long)


def perplexity(model: TargetLM, corpus: SyntheticCorpus) -> float:
    total, count = 0.0, 0
    with torch.no_grad():
        for s in corpus.sequences:
            t = torch.tensor(s[: model.cfg.max_seq], dtype=torch.long)[None]
            logits = model.logits_only(t[:, :-1])
            total += F.cross_entropy(logits[0], t[0, 1:], reduction="sum").item()
            count += t.shape[1] - 1
    return math.exp(total / count)


def unigram_perplexity(train: SyntheticCorpus, heldout: SyntheticCorpus) -> float:
    """Add-one smoothed unigram model fitted on ``train``, scored on ``heldout``
    using the same next-token positions as :func:`perplexity`."""
    counts = np.ones(train.vocab)
    for s in train.sequences:
        np.add.at(counts, s, 1)
    logp = np.log(counts / counts.sum())
    nll, n = 0.0, 0
    for s in heldout.sequences:
        toks = s[1:]
        nll -= logp[toks].sum()
        n += len(toks)
    return float(math.exp(nll / n))


@dataclass
class TargetTrainConfig:
    steps: int = 2500
    batch: int = 32
    seq_len: int = 64
    lr: float = 3e-3
    weight_decay: float = 0.0
    holdout: float = 0.1
    extra: dict = field(default_factory=dict)


def one_cycle(steps: int, warm: float = 0.1, start: float = 1 / 25, end: float = 1 / 25e4):
    """LR factor: cosine rise from ``start`` to 1 over the first ``warm`` of training, cosine fall to ``end``.

    Same shape as torch's OneCycleLR, which divides by zero when the warm-up
    rounds to a single step.
    """
    w = max(1, round(warm * steps))

    def f(s: int) -> float:
        if s < w:
            return start + (1 - start) * (1 - math.cos(math.pi * s / w)) / 2
        return end + (1 - end) * (1 + math.cos(math.pi * min(s - w, steps - w) / max(1, steps - w))) / 2

    return f


def train_target(
    corpus: SyntheticCorpus,
    cfg: TargetConfig,
    seed: int,
    train_cfg: TargetTrainConfig | None = None,
    dtype: torch.dtype = torch.float32,
) -> StageCheckpoint:
    tc = train_cfg or TargetTrainConfig()
    if len(corpus) == 0 or not any(corpus.sequences):
        raise InputError("empty corpus")
    if corpus.vocab != cfg.vocab:
        raise ConfigError("corpus vocabulary does not match model vocabulary")
    train, held = corpus.split(tc.holdout) if len(corpus) > 1 else (corpus, corpus)
    torch.manual_seed(seed)
    model = TargetLM(cfg).to(dtype)
    opt = torch.optim.AdamW(model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, one_cycle(tc.steps))
    rng = np.random.default_rng(seed)
    batches = _batches(train.sequences, min(tc.seq_len, cfg.max_seq), tc.batch, rng)
    loss_val = float("nan")
    for step in range(tc.steps):
        loss = lm_loss(model, next(batches))
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise TrainingError("non-finite target LM loss", step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
    model.eval()
    metrics = {
        "final_loss": loss_val,
        "heldout_ppl": perplexity(model, held),
        "unigram_ppl": unigram_perplexity(train, held),
    }
    return StageCheckpoint(
        stage="target",
        tensors=module_tensors(model),
        config={"model": cfg.to_dict(), "train": {k: v for k, v in vars(tc).items()}, "corpus_seed": corpus.seed},
        seed=seed,
        metrics=metrics,
    )


def load_target(ckpt: StageCheckpoint, dtype: torch.dtype = torch.float32) -> TargetLM:
    if ckpt.stage != "target":
        raise InputError(f"expected a target checkpoint, got {ckpt.stage!r}")
    model = TargetLM(TargetConfig.from_dict(ckpt.config["model"])).to(dtype)
    ckpt.load_into(model)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@torch.no_grad()
def generate_self_answers(
    model: TargetLM,
    prompts: list[list[int]],
    max_len: int,
    seed: int = 0,
    temperature: float = 0.0,
) -> list[list[int]]:
    """Continue each prompt by ``max_len`` tokens (greedy unless temperature > 0).

    Sampled decoding draws from one numpy stream per sequence, seeded by
    ``(seed, index)``, so results do not depend on batch composition.
    """
    seqs = [list(p) for p in prompts]
    if max_len <= 0:
        return seqs
    if any(len(s) == 0 for s in seqs):
        raise InputError("prompts must be non-empty")
    if max(len(s) for s in seqs) + max_len > model.cfg.max_seq:
        raise InputError("prompt + max_len exceeds max_seq")
    rngs = [np.random.default_rng([seed, i]) for i in range(len(seqs))]
    for _ in range(max_len):
        width = max(len(s) for s in seqs)
        batch = torch.tensor([s + [0] * (width - len(s)) for s in seqs], dtype=torch.long)
        model.check_tokens(batch)
        logits = model.logits_only(batch)
        for i, s in enumerate(seqs):
            row = logits[i, len(s) - 1]
            if temperature <= 0:
                s.append(int(torch.argmax(row)))
            else:
                p = torch.softmax(row.double() / temperature, -1).numpy()
                s.append(int(rngs[i].choice(len(p), p=p / p.sum())))
    return seqs
