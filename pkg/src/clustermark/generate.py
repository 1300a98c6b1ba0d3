"""Watermarked generation loop over an abstract next-token-distribution
source.

Each step derives a watermark code from the secret key and the preceding
n-gram.  A code that was already spent in this session, or a step without
enough context, samples from the model's original distribution; otherwise
the step is watermarked and the code is recorded so no code ever biases
sampling twice.

Context convention: the cluster-aligned strategy builds its code from the
*cluster indices* of the context tokens, which is what makes detection
invariant to same-cluster substitutions anywhere in the sequence.  The
baseline strategies hash raw token ids, matching their original forms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .clustering import ClusterMap
from .core import CodeHistory, WatermarkCode, code_fingerprint, prf_r
from .reweight import (
    ReweightConfig,
    aligned_sample,
    build_segment_table,
    cluster_probs,
    dipmark_reweight,
    its_sample,
    kgw_reweight,
    unigram_reweight,
)

__all__ = [
    "LanguageModel",
    "GenerationSession",
    "generate",
    "generate_unwatermarked",
    "make_code",
]


@runtime_checkable
class LanguageModel(Protocol):
    """Next-token-distribution source.

    ``next_dist`` must be deterministic in the context; all sampling
    randomness lives in the generation loop.
    """

    vocab_size: int

    def next_dist(self, context: Sequence[int]) -> np.ndarray: ...


@dataclass
class GenerationSession:
    """One watermarked generation run: key, strategy, and code history.

    The history starts empty per session; pass ``history`` explicitly to
    share spent codes across sequences.  ``dedup=False`` disables the
    history check (repeated codes then re-bias sampling; only useful for
    diagnostics).
    """

    key: bytes
    config: ReweightConfig
    ngram_n: int = 1
    cluster_map: ClusterMap | None = None
    rng_seed: int = 0
    dedup: bool = True
    history: CodeHistory = field(default_factory=CodeHistory)
    watermarked_mask: list[bool] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.key:
            raise ValueError("watermark key must be non-empty")
        if self.ngram_n < 1:
            raise ValueError("ngram_n must be >= 1")
        if self.config.strategy == "aligned_is":
            if self.cluster_map is None:
                raise ValueError("aligned_is requires a cluster map")
            if self.cluster_map.h != self.config.h:
                raise ValueError(
                    f"config h={self.config.h} != cluster map h={self.cluster_map.h}"
                )


def make_code(
    key: bytes,
    context_tokens: Sequence[int],
    ngram_n: int,
    strategy: str,
    cluster_map: ClusterMap | None = None,
) -> WatermarkCode | None:
    """Watermark code for a step, or None if the context is too short.

    aligned_is codes are built from context cluster indices; every other
    strategy hashes the raw token ids.
    """
    if len(context_tokens) < ngram_n:
        return None
    gram = tuple(int(t) for t in context_tokens[-ngram_n:])
    if strategy == "aligned_is":
        gram = tuple(int(cluster_map.assignment[t]) for t in gram)
    return WatermarkCode(key=key, context=gram, ngram_n=ngram_n)


def _sample_plain(dist: np.ndarray, rng: np.random.Generator) -> int:
    # inverse-CDF draw; cheaper than rng.choice for per-step calls
    cdf = np.cumsum(dist)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, dist.shape[0] - 1)


def generate(
    model: LanguageModel,
    prompt: Sequence[int],
    length: int,
    session: GenerationSession,
) -> list[int]:
    """Generate ``length`` tokens, watermarking each step whose code is
    fresh.  Returns only the generated tokens (prompt excluded)."""
    if length < 1:
        raise ValueError("generation length must be >= 1")
    cfg = session.config
    rng = np.random.default_rng(session.rng_seed)
    context = [int(t) for t in prompt]
    out: list[int] = []
    session.watermarked_mask = []

    for _ in range(length):
        dist = np.asarray(model.next_dist(tuple(context)), dtype=np.float64)

        if cfg.strategy == "unigram":
            # global greenlist: context-free and intentionally biased, so the
            # history rule does not apply
            pw = unigram_reweight(dist, session.key, cfg.delta, cfg.gamma)
            token = _sample_plain(pw, rng)
            session.watermarked_mask.append(True)
            context.append(token)
            out.append(token)
            continue

        code = make_code(
            session.key, context, session.ngram_n, cfg.strategy, session.cluster_map
        )
        fingerprint = code_fingerprint(code) if code is not None else None
        spent = (
            code is None
            or (session.dedup and fingerprint in session.history)
        )
        if spent:
            token = _sample_plain(dist, rng)
            session.watermarked_mask.append(False)
        else:
            if session.dedup:
                session.history.add(fingerprint)
            if cfg.strategy == "aligned_is":
                probs = cluster_probs(dist, session.cluster_map)
                table = build_segment_table(probs / probs.sum())
                token = aligned_sample(
                    table, dist, session.cluster_map, prf_r(code), rng
                )
            elif cfg.strategy == "its":
                token = its_sample(dist, code)
            elif cfg.strategy == "kgw":
                pw = kgw_reweight(dist, code, cfg.delta, cfg.gamma)
                token = _sample_plain(pw, rng)
            elif cfg.strategy == "dipmark":
                pw = dipmark_reweight(dist, code, cfg.alpha)
                token = _sample_plain(pw, rng)
            elif cfg.strategy == "gamma_reweight":
                pw = dipmark_reweight(dist, code, 0.5)
                token = _sample_plain(pw, rng)
            else:  # pragma: no cover - ReweightConfig rejects unknown names
                raise ValueError(f"unknown strategy {cfg.strategy!r}")
            session.watermarked_mask.append(True)
        context.append(token)
        out.append(token)
    return out


def generate_unwatermarked(
    model: LanguageModel,
    prompt: Sequence[int],
    length: int,
    seed: int = 0,
) -> list[int]:
    """Plain ancestral sampling; the null-hypothesis corpus generator."""
    if length < 1:
        raise ValueError("generation length must be >= 1")
    rng = np.random.default_rng(seed)
    context = [int(t) for t in prompt]
    out: list[int] = []
    for _ in range(length):
        dist = np.asarray(model.next_dist(tuple(context)), dtype=np.float64)
        token = _sample_plain(dist, rng)
        context.append(token)
        out.append(token)
    return out
