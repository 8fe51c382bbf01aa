"""Seeded stochastic regular grammars used as the language-model surrogate corpus."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import InputError


@dataclass(frozen=True)
class Grammar:
    """Finite automaton: each state emits one of ``branching`` tokens and moves on."""

    tokens: np.ndarray  # [n_states, branching] emitted token ids
    next_state: np.ndarray  # [n_states, branching]
    probs: np.ndarray  # [n_states, branching], rows sum to 1

    @property
    def n_states(self) -> int:
        return self.tokens.shape[0]

    def sample(self, length: int, rng: np.random.Generator, state: int | None = None) -> tuple[list[int], int]:
        if state is None:
            state = int(rng.integers(self.n_states))
        out = []
        for _ in range(length):
            j = int(rng.choice(self.probs.shape[1], p=self.probs[state]))
            out.append(int(self.tokens[state, j]))
            state = int(self.next_state[state, j])
        return out, state


def make_grammar(
    token_ids: np.ndarray,
    rng: np.random.Generator,
    n_states: int = 64,
    branching: int = 4,
    dominant: float = 0.7,
) -> Grammar:
    """Random automaton whose most likely arcs chain all states into one cycle.

    Arc 0 of every state carries probability ``dominant`` and leads to the
    state's successor on a random Hamiltonian cycle; the remaining arcs split
    the rest and jump to random states. Greedy continuations therefore walk a
    long cycle instead of collapsing into a short loop.
    """
    token_ids = np.asarray(token_ids)
    tokens = rng.choice(token_ids, size=(n_states, branching))
    next_state = rng.integers(n_states, size=(n_states, branching))
    order = rng.permutation(n_states)
    next_state[order, 0] = np.roll(order, -1)
    probs = np.empty((n_states, branching))
    probs[:, 0] = dominant
    probs[:, 1:] = (1 - dominant) * rng.dirichlet(np.ones(branching - 1), size=n_states)
    return Grammar(tokens=tokens, next_state=next_state, probs=probs)


@dataclass
class SyntheticCorpus:
    sequences: list[list[int]]
    seed: int
    vocab: int

    def __post_init__(self):
        for s in self.sequences:
            if any(t < 0 or t >= self.vocab for t in s):
                raise InputError("corpus token id outside vocabulary")

    def __len__(self) -> int:
        return len(self.sequences)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(" ".join(map(str, s)) + "\n" for s in self.sequences))

    @classmethod
    def load(cls, path: str | Path, vocab: int, seed: int = -1) -> "SyntheticCorpus":
        lines = Path(path).read_text().splitlines()
        seqs = [[int(t) for t in line.split()] for line in lines if line.strip()]
        return cls(seqs, seed, vocab)

    def split(self, holdout: float = 0.1) -> tuple["SyntheticCorpus", "SyntheticCorpus"]:
        n = max(1, int(round(len(self) * holdout)))
        return (
            SyntheticCorpus(self.sequences[:-n], self.seed, self.vocab),
            SyntheticCorpus(self.sequences[-n:], self.seed, self.vocab),
        )


def generate_corpus(
    n_sequences: int,
    length: int,
    vocab: int = 256,
    seed: int = 0,
    n_states: int = 64,
    branching: int = 4,
    token_pool: int = 48,
    latent_split: int | None = None,
) -> SyntheticCorpus:
    """Sample ``n_sequences`` strings of ``length`` tokens from a seeded grammar.

    Emitted tokens come from a pool of ``token_pool`` ids, so most tokens sit on
    several arcs and the automaton state is only recoverable from a few tokens
    of history. With ``latent_split`` set, sequences alternate between spans of
    a "text" grammar over ids ``< latent_split`` and a "latent" grammar over the
    remaining ids, emulating interleaved multimodal sequences.
    """
    if n_sequences < 1 or length < 1:
        raise InputError("corpus needs at least one non-empty sequence")
    rng = np.random.default_rng(seed)
    if latent_split is None:
        pool = rng.choice(vocab, size=min(token_pool, vocab), replace=False)
        g = make_grammar(pool, rng, n_states, branching)
        seqs = [g.sample(length, rng)[0] for _ in range(n_sequences)]
        return SyntheticCorpus(seqs, seed, vocab)

    if not 0 < latent_split < vocab:
        raise InputError("latent_split must lie inside the vocabulary")
    text_pool = rng.choice(latent_split, size=min(token_pool, latent_split), replace=False)
    lat_pool = latent_split + rng.choice(vocab - latent_split, size=min(token_pool, vocab - latent_split), replace=False)
    g_text = make_grammar(text_pool, rng, n_states, branching)
    g_lat = make_grammar(lat_pool, rng, n_states, branching)
    seqs = []
    for _ in range(n_sequences):
        seq: list[int] = []
        states = [None, None]
        which = 0
        while len(seq) < length:
            span = int(rng.integers(4, 13))
            g = g_text if which == 0 else g_lat
            toks, states[which] = g.sample(min(span, length - len(seq)), rng, states[which])
            seq += toks
            which ^= 1
        seqs.append(seq)
    return SyntheticCorpus(seqs, seed, vocab)
