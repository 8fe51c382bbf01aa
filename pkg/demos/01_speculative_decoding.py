"""
Speculative decoding with a feature-level draft head
=====================================================

Train a small target model on a synthetic grammar, let it write its own
continuations, fit a draft head on those, then decode with draft-and-verify.
Greedy verification keeps the output identical to the target's own greedy text.
"""

import torch

from hyperlab.lm.corpus import generate_corpus
from hyperlab.lm.draft import DraftConfig, DraftNet, DraftTrainConfig, load_draft, train_draft
from hyperlab.lm.speculative import estimate_speedup, measure_acceptance, speculative_generate
from hyperlab.lm.target import TargetConfig, TargetTrainConfig, generate_self_answers, load_target, train_target

torch.set_num_threads(1)

# a grammar corpus with learnable structure; held-out perplexity should sit far below the unigram one
corpus = generate_corpus(600, 48, vocab=64, seed=0)
cfg = TargetConfig(num_layers=4, dim=32, heads=2, vocab=64)
tck = train_target(corpus, cfg, seed=0, train_cfg=TargetTrainConfig(steps=300, seq_len=48))
print("target perplexity", round(tck.metrics["heldout_ppl"], 2), "unigram", round(tck.metrics["unigram_ppl"], 2))
target = load_target(tck)

# self-answers: the draft learns the target's behaviour, not the corpus
prompts = [s[:12] for s in corpus.sequences[:300]]
answers = generate_self_answers(target, prompts, 32)

dck = train_draft(tck, target, answers, DraftConfig(), seed=0, train_cfg=DraftTrainConfig(steps=200, lr=3e-3))
draft = load_draft(dck, target)

test = [s[:12] for s in corpus.sequences[550:600]]
fresh = DraftNet(target, DraftConfig())  # zero-init, untrained
for name, d in (("untrained", fresh), ("trained", draft)):
    rep = measure_acceptance(target, d, test, k=6, max_new=32)
    print(f"{name:9s} tau {rep.tau:.2f}  per-depth acceptance {[None if a is None else round(a, 2) for a in rep.alpha]}")
    print(f"          estimated speedup at draft cost 0.05: {estimate_speedup(rep, 0.05, 6):.2f}x")

# lossless: same tokens as plain greedy decoding
spec = [s.output(32) for s in speculative_generate(target, draft, test, 32, k=6)]
print("identical to greedy:", spec == generate_self_answers(target, test, 32))
