#!/usr/bin/env python3
"""The decode-then-encode channel: calibrated token perturbations and why
clustering absorbs most of them.

Replacements that stay inside a cluster leave every detection score
bit-identical; only cross-cluster replacements (and broken contexts) cost
signal.
"""

import numpy as np

from clustermark import (
    CHANNEL_PRESETS,
    ChannelConfig,
    GenerationSession,
    ReweightConfig,
    SyntheticModelConfig,
    apply_channel,
    build_synthetic_model,
    channel_preset,
    detect_aligned,
    generate,
    kmeans_fit,
    mismatch_rates,
)

KEY = b"demo-secret-key"

cfg = SyntheticModelConfig(seed=101, dirichlet_beta=0.05)
model, embeddings = build_synthetic_model(cfg)
map_ = kmeans_fit(embeddings, 20, seed=7)
rng = np.random.default_rng(0)

print("channel presets (measured on 100k random positions):")
probe = rng.integers(0, cfg.n_vocab, 100_000)
for name in CHANNEL_PRESETS:
    ch = channel_preset(name, seed=5)
    rep = mismatch_rates(probe, apply_channel(probe, map_, embeddings, ch), map_)
    tok_t, clu_t = CHANNEL_PRESETS[name]
    print(f"  {name:>16s}: token {rep.token_rate:.4f} (target {tok_t}), "
          f"cluster {rep.cluster_rate:.4f} (target {clu_t}), "
          f"reduction {rep.reduction:.1%}")

session = GenerationSession(key=KEY, config=ReweightConfig("aligned_is", h=20),
                            ngram_n=3, cluster_map=map_, rng_seed=4)
seq = generate(model, [1, 2, 3, 4, 5], 500, session)
clean = detect_aligned(seq, KEY, map_, 3, 0.01)
print(f"\nno channel:            S = {clean.score:.0f}  "
      f"(threshold {clean.threshold:.1f})")

# same-cluster-only channel: every token replaced, scores identical
same = apply_channel(seq, map_, embeddings, ChannelConfig(1.0, 1.0, seed=6))
rep = detect_aligned(same, KEY, map_, 3, 0.01)
changed = np.mean(np.asarray(seq) != same)
print(f"100% same-cluster swap: S = {rep.score:.0f}  "
      f"({changed:.0%} of tokens replaced, score unchanged)")

# the calibrated channel costs signal only through cluster crossings
ch = channel_preset("longform_qa", seed=7)
noisy = apply_channel(seq, map_, embeddings, ch)
rep = detect_aligned(noisy, KEY, map_, 3, 0.01)
print(f"longform_qa channel:    S = {rep.score:.0f}  "
      f"(verdict still {rep.verdict})")
