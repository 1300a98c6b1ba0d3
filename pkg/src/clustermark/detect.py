"""Model-agnostic watermark detectors with guaranteed-FPR thresholds.

Every detector consumes only the observed token sequence, the secret key,
and (for the cluster-aligned method) the stored cluster map.  Scores sum
Bernoulli-style per-step evidence; thresholds come from the Hoeffding tail
bound, so declared false-positive rates are guaranteed rather than
estimated, except for the position-score sampler whose null is simulated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp, ndtr, ndtri

from .clustering import ClusterMap
from .core import _prf_permutation_raw, code_fingerprint, prf_r
from .generate import make_code
from .reweight import aligned_score

__all__ = [
    "DetectionReport",
    "hoeffding_pvalue",
    "hoeffding_threshold",
    "exact_binomial_pvalue",
    "detect_aligned",
    "detect_kgw",
    "detect_unigram",
    "detect_dipmark",
    "detect_its",
]


@dataclass
class DetectionReport:
    """Detection outcome: score, threshold at the requested FPR, p-values.

    ``p_hoeffding`` is the guaranteed (conservative) tail bound;
    ``p_exact`` the exact binomial tail where the null is binomial, or a
    Monte-Carlo estimate for the position-score detector.  ``trace`` holds
    per-step (r, token, score); r is NaN for detectors that use no keyed
    draw.
    """

    strategy: str
    score: float
    steps_scored: int
    threshold: float
    p_hoeffding: float
    p_exact: float
    verdict: bool
    fpr: float
    trace: list[tuple[float, int, float]] = field(repr=False, default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "score": self.score,
            "t": self.steps_scored,
            "threshold": self.threshold,
            "p_hoeffding": self.p_hoeffding,
            "p_exact": self.p_exact,
            "verdict": self.verdict,
            "strategy": self.strategy,
            "fpr": self.fpr,
            **self.extra,
        }


def hoeffding_pvalue(score: float, t: int, null_rate: float) -> float:
    """exp(-2 t (score/t - null_rate)^2) above the null mean, else 1."""
    if t < 1:
        raise ValueError("t must be >= 1")
    gap = score / t - null_rate
    if gap <= 0:
        return 1.0
    return math.exp(-2.0 * t * gap * gap)


def hoeffding_threshold(t: int, null_rate: float, fpr: float) -> float:
    """Score threshold z with guaranteed false-positive rate ``fpr``:
    z = t * null_rate + sqrt(t * ln(1/fpr) / 2)."""
    if t < 1:
        raise ValueError("t must be >= 1")
    if not 0 < fpr < 1:
        raise ValueError("fpr must be in (0, 1)")
    return t * null_rate + math.sqrt(t * math.log(1.0 / fpr) / 2.0)


def exact_binomial_pvalue(score: int, t: int, p: float) -> float:
    """Upper tail Pr(Bin(t, p) >= score), summed in log space."""
    if not 0 <= score <= t:
        raise ValueError(f"score {score} outside [0, {t}]")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    if score == 0:
        return 1.0
    if p == 0.0:
        return 0.0
    if p == 1.0:
        return 1.0
    k = np.arange(score, t + 1)
    log_terms = (
        gammaln(t + 1)
        - gammaln(k + 1)
        - gammaln(t - k + 1)
        + k * math.log(p)
        + (t - k) * math.log1p(-p)
    )
    return float(min(1.0, math.exp(logsumexp(log_terms))))


def _validate_tokens(tokens, min_len: int) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim != 1:
        raise ValueError("token sequence must be 1-d")
    if arr.size < min_len:
        raise ValueError(
            f"token sequence has {arr.size} tokens; detection needs at least "
            f"{min_len}"
        )
    return arr


def _binomial_report(
    strategy: str,
    score: int,
    t: int,
    null_rate: float,
    fpr: float,
    trace,
    extra=None,
) -> DetectionReport:
    threshold = hoeffding_threshold(t, null_rate, fpr)
    return DetectionReport(
        strategy=strategy,
        score=float(score),
        steps_scored=t,
        threshold=threshold,
        p_hoeffding=hoeffding_pvalue(score, t, null_rate),
        p_exact=exact_binomial_pvalue(score, t, null_rate),
        verdict=score > threshold,
        fpr=fpr,
        trace=trace,
        extra=extra or {},
    )


def detect_aligned(
    tokens,
    key: bytes,
    map_: ClusterMap,
    ngram_n: int = 1,
    fpr: float = 0.01,
    dedup: bool = False,
) -> DetectionReport:
    """Cluster-aligned detector: per step, score 1 iff the keyed draw for
    the context lands in the bin of the observed token's cluster.

    Null rate is 1/h.  ``dedup=True`` skips steps whose code already
    appeared, mirroring the generator's history rule; default scores every
    full-context step.
    """
    arr = _validate_tokens(tokens, ngram_n + 1)
    seen: set[int] = set()
    trace: list[tuple[float, int, float]] = []
    score = 0
    for i in range(ngram_n, arr.size):
        code = make_code(key, arr[:i], ngram_n, "aligned_is", map_)
        if dedup:
            fp = code_fingerprint(code)
            if fp in seen:
                continue
            seen.add(fp)
        r = prf_r(code)
        s = aligned_score(r, int(arr[i]), map_)
        score += s
        trace.append((r, int(arr[i]), float(s)))
    t = len(trace)
    return _binomial_report("aligned_is", score, t, 1.0 / map_.h, fpr, trace)


def detect_kgw(
    tokens,
    key: bytes,
    n_vocab: int,
    gamma: float = 0.5,
    ngram_n: int = 1,
    fpr: float = 0.01,
) -> DetectionReport:
    """Greenlist counter with a normal-approximation threshold.

    Verdict uses the z-statistic (g - gamma*t)/sqrt(gamma(1-gamma)t) against
    the upper-fpr normal quantile; binomial and Hoeffding p-values are
    reported alongside.
    """
    arr = _validate_tokens(tokens, ngram_n + 1)
    green_size = math.ceil(gamma * n_vocab)
    g = 0
    trace: list[tuple[float, int, float]] = []
    for i in range(ngram_n, arr.size):
        code = make_code(key, arr[:i], ngram_n, "kgw")
        _, inverse = _prf_permutation_raw(code.key, code.ngram_n, code.context, n_vocab)
        s = 1.0 if inverse[arr[i]] < green_size else 0.0
        g += int(s)
        trace.append((math.nan, int(arr[i]), s))
    t = len(trace)
    sd = math.sqrt(gamma * (1.0 - gamma) * t)
    zstat = (g - gamma * t) / sd
    threshold = gamma * t + ndtri(1.0 - fpr) * sd
    report = _binomial_report("kgw", g, t, gamma, fpr, trace,
                              extra={"zstat": zstat, "p_normal": float(ndtr(-zstat))})
    report.threshold = threshold
    report.verdict = g > threshold
    return report


def detect_unigram(
    tokens,
    key: bytes,
    n_vocab: int,
    gamma: float = 0.5,
    fpr: float = 0.01,
) -> DetectionReport:
    """KGW detector against the global key-only greenlist; every position
    is scored since no context is needed."""
    arr = _validate_tokens(tokens, 1)
    green_size = math.ceil(gamma * n_vocab)
    _, inverse = _prf_permutation_raw(key, 0, (), n_vocab)
    flags = inverse[arr] < green_size
    g = int(flags.sum())
    t = arr.size
    trace = [(math.nan, int(x), float(s)) for x, s in zip(arr, flags)]
    sd = math.sqrt(gamma * (1.0 - gamma) * t)
    zstat = (g - gamma * t) / sd
    threshold = gamma * t + ndtri(1.0 - fpr) * sd
    report = _binomial_report("unigram", g, t, gamma, fpr, trace,
                              extra={"zstat": zstat, "p_normal": float(ndtr(-zstat))})
    report.threshold = threshold
    report.verdict = g > threshold
    return report


def detect_dipmark(
    tokens,
    key: bytes,
    n_vocab: int,
    alpha_detect: float = 0.5,
    ngram_n: int = 1,
    fpr: float = 0.01,
) -> DetectionReport:
    """Quantile counter: score 1 iff the observed token sits in the top
    (1 - alpha_detect) of the keyed order.  Null rate is the exact green
    fraction, which equals 1 - alpha_detect whenever alpha*N is integral."""
    arr = _validate_tokens(tokens, ngram_n + 1)
    cut = math.ceil(alpha_detect * n_vocab)
    null_rate = (n_vocab - cut) / n_vocab
    score = 0
    trace: list[tuple[float, int, float]] = []
    for i in range(ngram_n, arr.size):
        code = make_code(key, arr[:i], ngram_n, "dipmark")
        _, inverse = _prf_permutation_raw(code.key, code.ngram_n, code.context, n_vocab)
        s = 1.0 if inverse[arr[i]] >= cut else 0.0
        score += int(s)
        trace.append((math.nan, int(arr[i]), s))
    t = len(trace)
    return _binomial_report("dipmark", score, t, null_rate, fpr, trace)


def _its_null_structure(arr: np.ndarray, ngram_n: int):
    """Factorized (context id, token id) pairs for the scored steps.

    Repeated contexts share one keyed draw and repeated tokens one rank, so
    the null simulation must resample them consistently, not per step.
    """
    contexts = np.lib.stride_tricks.sliding_window_view(arr[:-1], ngram_n)
    _, ctx_idx = np.unique(contexts, axis=0, return_inverse=True)
    _, tok_idx = np.unique(arr[ngram_n:], return_inverse=True)
    return ctx_idx.ravel(), tok_idx


def _its_null_samples(
    arr: np.ndarray, ngram_n: int, n_vocab: int, n_sims: int, seed: int
) -> np.ndarray:
    """Key-resampling null scores for the observed token sequence.

    Each simulation redraws one unit-interval value per distinct context and
    one rank per distinct token value, mimicking a fresh key while keeping
    the sequence's repetition structure.  Simulated in blocks to keep
    temporaries cache-sized."""
    ctx_idx, tok_idx = _its_null_structure(arr, ngram_n)
    n_ctx = int(ctx_idx.max()) + 1
    n_tok = int(tok_idx.max()) + 1
    t = ctx_idx.size
    rng = np.random.default_rng(seed)
    out = np.empty(n_sims)
    block = max(1, min(n_sims, 4_000_000 // max(1, t)))
    for lo in range(0, n_sims, block):
        hi = min(lo + block, n_sims)
        # float32 internals: worst-case 1e-5 absolute error in a 500-term
        # sum, orders of magnitude below the score resolution that matters
        r_draws = rng.random((hi - lo, n_ctx), dtype=np.float32)
        u_draws = (
            rng.integers(0, n_vocab, size=(hi - lo, n_tok)).astype(np.float32) + 0.5
        ) / n_vocab
        diff = np.abs(r_draws[:, ctx_idx] - u_draws[:, tok_idx])
        out[lo:hi] = t - diff.sum(axis=1, dtype=np.float64)
    return out


def _its_score_trace(tokens, key: bytes, n_vocab: int, ngram_n: int):
    """(score, trace, keyed draws) for the position-score detector."""
    arr = _validate_tokens(tokens, ngram_n + 1)
    score = 0.0
    rs = []
    trace: list[tuple[float, int, float]] = []
    for i in range(ngram_n, arr.size):
        code = make_code(key, arr[:i], ngram_n, "its")
        r = prf_r(code)
        _, inverse = _prf_permutation_raw(code.key, code.ngram_n, code.context, n_vocab)
        u = (float(inverse[arr[i]]) + 0.5) / n_vocab
        s = 1.0 - abs(r - u)
        score += s
        rs.append(r)
        trace.append((r, int(arr[i]), s))
    return score, trace, np.asarray(rs)


def detect_its(
    tokens,
    key: bytes,
    n_vocab: int,
    ngram_n: int = 1,
    fpr: float = 0.01,
    null_sims: int = 10_000,
    sim_seed: int = 0,
) -> DetectionReport:
    """Position-score detector: sum of 1 - |r - u(token)|.

    The null depends on the realized keyed draws, so both p-value and
    threshold are Monte-Carlo estimates (seeded) rather than guarantees.
    """
    score, trace, rs = _its_score_trace(tokens, key, n_vocab, ngram_n)
    t = len(trace)

    arr = np.asarray(tokens, dtype=np.int64)
    null = _its_null_samples(arr, ngram_n, n_vocab, null_sims, sim_seed)
    p_mc = (1.0 + float(np.sum(null >= score))) / (1.0 + null_sims)
    threshold = float(np.quantile(null, 1.0 - fpr))

    # per-step null means over the exact rank grid, so a valid Hoeffding
    # bound for sums of independent [0,1] terms is still available
    u_grid = (np.arange(n_vocab) + 0.5) / n_vocab
    null_mean = float(np.sum(1.0 - np.abs(rs[:, None] - u_grid[None, :]).mean(axis=1)))
    gap = score - null_mean
    p_hoeffding = math.exp(-2.0 * gap * gap / t) if gap > 0 else 1.0

    return DetectionReport(
        strategy="its",
        score=score,
        steps_scored=t,
        threshold=threshold,
        p_hoeffding=p_hoeffding,
        p_exact=p_mc,
        verdict=score > threshold,
        fpr=fpr,
        trace=trace,
        extra={"null_mean": null_mean},
    )
