"""Exact and Monte Carlo variance accounting for masked-LM gradients.

All variances of vector-valued gradients are summarized by the trace of the
covariance, i.e. the sum of per-coordinate variances.  The law of total
variance holds coordinate-wise, hence also for the trace.

Inside this module masking is pure ``[MASK]`` replacement, so a subset of
positions fully determines the masked sentence and the enumeration space is
just the ``C(n, K)`` subsets.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .corpus import TokenSequence
from .encoder import EncoderParams, mask_only, position_loss_and_norm_table, sentence_gradient
from .mapnet import num_masked, sample_positions

DEFAULT_CAP = 10_000
VARIANCE_SUMMARY = "trace of covariance (sum of per-coordinate variances)"


class EnumerationCapError(RuntimeError):
    """More subsets than the enumeration cap allows."""


class DegenerateError(ValueError):
    """The quantity is undefined for this input (all-zero norms, constant series, ...)."""


def _position_probs(proposal) -> np.ndarray | None:
    if proposal is None:
        return None
    return np.asarray(getattr(proposal, "probs", proposal), dtype=np.float64)


def subset_probability(probs: np.ndarray, subset: Sequence[int]) -> float:
    """Probability that sequential draws without replacement yield ``subset`` in any order."""
    probs = np.asarray(probs, dtype=np.float64)
    chosen = np.zeros(probs.size, dtype=bool)
    chosen[list(subset)] = True
    # remaining mass is rebuilt from the undrawn terms; subtracting drawn ones cancels badly
    rest = float(probs[~chosen].sum())
    total = 0.0
    for order in itertools.permutations(subset):
        p = 1.0
        for k, i in enumerate(order):
            p *= probs[i] / (rest + float(probs[list(order[k:])].sum()))
        total += p
    return total


@dataclass
class MaskEnumeration:
    n: int
    K: int
    subsets: list[tuple[int, ...]]
    probs: np.ndarray
    sentence: TokenSequence | None = None

    def __len__(self):
        return len(self.subsets)


def enumerate_masks(x, K: int, proposal=None, cap: int = DEFAULT_CAP) -> MaskEnumeration:
    """All ``C(n, K)`` position subsets with their probabilities.

    ``x`` is a sentence or a length.  With no proposal each subset has
    probability ``1 / C(n, K)``; otherwise it is the order-marginalized
    probability of drawing it sequentially from the per-position proposal.
    """
    n = x if isinstance(x, int) else len(x)
    if not 0 <= K <= n:
        raise ValueError(f"K={K} invalid for n={n}")
    count = math.comb(n, K)
    if count > cap:
        raise EnumerationCapError(f"C({n},{K}) = {count} subsets exceeds the enumeration cap {cap}; raise the cap to {count}")
    subsets = list(itertools.combinations(range(n), K))
    p = _position_probs(proposal)
    if p is None:
        probs = np.full(count, 1.0 / count)
    else:
        if p.shape != (n,):
            raise ValueError("proposal length must equal the sentence length")
        probs = np.array([subset_probability(p, s) for s in subsets])
    return MaskEnumeration(n, K, subsets, probs, None if isinstance(x, int) else x)


@dataclass
class SubsetTable:
    """Per-subset values (gradients, or arbitrary vectors in scalar-toy mode)."""

    n: int
    K: int
    subsets: list[tuple[int, ...]]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.shape[0] != len(self.subsets):
            raise ValueError("one value row per subset required")

    @property
    def size(self) -> int:
        return len(self.subsets)

    @property
    def base_probs(self) -> np.ndarray:
        """The uniform (RandMask) subset distribution."""
        return np.full(self.size, 1.0 / self.size)

    @property
    def norms(self) -> np.ndarray:
        return np.sqrt((self.values**2).sum(axis=1))

    def subset_probs(self, position_probs=None, subset_probs=None) -> np.ndarray:
        if subset_probs is not None:
            q = np.asarray(subset_probs, dtype=np.float64)
            if q.shape != (self.size,):
                raise ValueError("subset_probs must have one entry per subset")
            return q
        if position_probs is None:
            return self.base_probs
        p = _position_probs(position_probs)
        return np.array([subset_probability(p, s) for s in self.subsets])


def gradient_table(
    params: EncoderParams, x: TokenSequence, K: int, cap: int = DEFAULT_CAP, threads: int = 1
) -> SubsetTable:
    """Exact gradient of the sentence loss for every K-subset mask of ``x``."""
    enum = enumerate_masks(x, K, cap=cap)

    def one(s):
        return sentence_gradient(params, mask_only(x, s), list(s), x)[0]

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(one, enum.subsets))
    else:
        rows = [one(s) for s in enum.subsets]
    return SubsetTable(enum.n, K, enum.subsets, np.stack(rows))


def scalar_table(n: int, K: int, values) -> SubsetTable:
    """Scalar-toy mode: user-supplied value per subset instead of a network."""
    enum = enumerate_masks(n, K)
    return SubsetTable(n, K, enum.subsets, np.asarray(values, dtype=np.float64))


@dataclass
class VarianceReport:
    total: float
    mask_term: float
    sentence_term: float
    residual: float
    total_stderr: float | None = None
    mask_term_stderr: float | None = None
    sentence_term_stderr: float | None = None
    summary: str = VARIANCE_SUMMARY
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.total_stderr is None and self.mask_term_stderr is None:
            for k in ("total_stderr", "mask_term_stderr", "sentence_term_stderr"):
                d.pop(k)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def decompose(groups: Sequence[tuple[np.ndarray, np.ndarray]]) -> VarianceReport:
    """Law-of-total-variance split over sentences drawn uniformly from ``groups``.

    Each group is ``(probs, values)`` for one sentence: the mask distribution
    and the (S, D) table of values under each mask.
    """
    if not groups:
        raise ValueError("need at least one sentence")
    means, within = [], []
    for probs, vals in groups:
        vals = np.asarray(vals, dtype=np.float64)
        if vals.ndim == 1:
            vals = vals[:, None]
        m = probs @ vals
        means.append(m)
        within.append(float(probs @ ((vals - m) ** 2).sum(axis=1)))
    means = np.stack(means)
    grand = means.mean(axis=0)
    mask_term = float(np.mean(within))
    sentence_term = float(((means - grand) ** 2).sum(axis=1).mean())
    total = float(np.mean([probs @ ((np.asarray(v).reshape(len(probs), -1) - grand) ** 2).sum(axis=1) for probs, v in groups]))
    return VarianceReport(total, mask_term, sentence_term, total - (mask_term + sentence_term))


def importance_weights(table: SubsetTable, position_probs=None, subset_probs=None, clip_eps=None, ratio="exact"):
    """Subset distribution ``q`` and weights ``r`` (optionally clipped)."""
    q = table.subset_probs(position_probs, subset_probs)
    if np.any(q <= 0):
        raise ValueError("proposal must give every subset positive probability")
    if ratio not in ("exact", "approx"):
        raise ValueError(f"unknown ratio mode {ratio!r}")
    if ratio == "approx":
        p = _position_probs(position_probs)
        if p is None:
            raise ValueError("approx ratio needs position probabilities")
        r = np.array([(1.0 / table.n) ** table.K / np.prod(p[list(s)]) for s in table.subsets])
    else:
        r = table.base_probs / q
    if clip_eps is not None:
        r = np.clip(r, 1.0 - clip_eps, 1.0 + clip_eps)
    return q, r


def exact_variance_decomposition(
    corpus: Sequence[TokenSequence],
    params: EncoderParams,
    K: int,
    proposal: Callable | None = None,
    clip_eps: float | None = None,
    cap: int = DEFAULT_CAP,
    tables: Sequence[SubsetTable] | None = None,
) -> VarianceReport:
    """Exact split of the gradient variance by full enumeration.

    ``proposal`` maps a sentence to per-position probabilities; with it the
    decomposed quantity is the importance-weighted gradient ``r * g`` under
    the proposal.  Without it masks are uniform.
    """
    if tables is None:
        tables = [gradient_table(params, x, K, cap) for x in corpus]
    groups = []
    for x, table in zip(corpus, tables):
        if proposal is None:
            groups.append((table.base_probs, table.values))
        else:
            q, r = importance_weights(table, proposal(x), clip_eps=clip_eps)
            groups.append((q, r[:, None] * table.values))
    report = decompose(groups)
    report.meta = {"mode": "exact", "K": K, "sentences": len(tables), "proposal": "uniform" if proposal is None else "custom"}
    return report


@dataclass
class AuditResult:
    expected_uniform: np.ndarray
    expected_proposal: np.ndarray
    deviation: float


def _as_table(x, K, params) -> SubsetTable:
    if isinstance(x, SubsetTable):
        return x
    if params is None or K is None:
        raise ValueError("need K and params, or a prebuilt SubsetTable")
    return gradient_table(params, x, K)


def importance_estimator_audit(
    x, K=None, proposal=None, params=None, *, subset_probs=None, clip_eps=None, ratio="exact"
) -> AuditResult:
    """``E_rand[g]`` against ``E_prop[r g]``; equal when ``r`` is the exact, unclipped ratio.

    ``x`` is a sentence (with ``K`` and ``params``) or a prebuilt
    :class:`SubsetTable`.  ``proposal`` is per-position; ``subset_probs``
    gives a subset-level distribution directly.
    """
    table = _as_table(x, K, params)
    position_probs = proposal
    e_rand = table.base_probs @ table.values
    q, r = importance_weights(table, position_probs, subset_probs, clip_eps, ratio)
    e_prop = q @ (r[:, None] * table.values)
    return AuditResult(e_rand, e_prop, float(np.max(np.abs(e_prop - e_rand))))


def proposal_variance(
    x, K=None, proposal=None, params=None, *, subset_probs=None, clip_eps=None, ratio="exact"
) -> float:
    """Trace of ``Var_q(r g)`` for one sentence; arguments as in :func:`importance_estimator_audit`."""
    table = _as_table(x, K, params)
    position_probs = proposal
    q, r = importance_weights(table, position_probs, subset_probs, clip_eps, ratio)
    w = r[:, None] * table.values
    mu = q @ w
    return float(q @ ((w - mu) ** 2).sum(axis=1))


def optimal_subset_proposal(x, K=None, params=None) -> np.ndarray:
    """Subset distribution proportional to the gradient norm, in ``table.subsets`` order."""
    norms = _as_table(x, K, params).norms
    if not np.any(norms > 0):
        raise DegenerateError("every subset has a zero gradient; the optimal proposal is undefined")
    return norms / norms.sum()


def _project_simplex(v: np.ndarray, floor: float) -> np.ndarray:
    """Euclidean projection onto ``{p >= floor, sum p = 1}``."""
    n = v.size
    mass = 1.0 - n * floor
    w = v - floor
    u = np.sort(w)[::-1]
    css = np.cumsum(u) - mass
    rho = np.nonzero(u - css / np.arange(1, n + 1) > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(w - theta, 0.0) + floor


def _draw_orders(subsets: Sequence[tuple[int, ...]]) -> np.ndarray:
    """(S, K!, K) array of every draw order of every subset."""
    return np.array([list(itertools.permutations(s)) for s in subsets], dtype=np.int64)


def _subset_probs_vec(p: np.ndarray, orders: np.ndarray) -> np.ndarray:
    """Vectorized :func:`subset_probability` for all subsets at once."""
    p = p / p.sum()
    picked = p[orders]
    left = 1.0 - np.concatenate([np.zeros(picked.shape[:-1] + (1,)), np.cumsum(picked, axis=-1)[..., :-1]], axis=-1)
    return np.prod(picked / left, axis=-1).sum(axis=-1)


def best_position_proposal(
    table: SubsetTable, iters: int = 500, step: float = 0.1, floor: float = 1e-6, h: float = 1e-7
) -> tuple[np.ndarray, float]:
    """Per-position proposal minimizing :func:`proposal_variance` by projected gradient descent.

    The objective is normalized by the uniform second moment so ``step`` is
    scale free.  Gradients are central differences along each coordinate
    (the objective renormalizes its argument).  A step that fails to
    decrease the objective is halved until it does, so the iterate never
    leaves the region where the variance is finite.
    """
    sq = table.norms**2
    u = table.base_probs
    scale = float(u @ sq)
    if scale == 0.0:
        raise DegenerateError("all gradients are zero")
    orders = _draw_orders(table.subsets)
    mu = u @ table.values
    second = float(mu @ mu)

    def f(p):
        q = _subset_probs_vec(p, orders)
        return (float((u * u * sq / q).sum()) - second) / scale

    p = np.full(table.n, 1.0 / table.n)
    fp = f(p)
    for _ in range(iters):
        g = np.empty(table.n)
        for i in range(table.n):
            e = np.zeros(table.n)
            e[i] = h
            g[i] = (f(p + e) - f(np.maximum(p - e, floor * 0.5))) / (p[i] + h - max(p[i] - h, floor * 0.5))
        eta = step
        while eta > 1e-12:
            cand = _project_simplex(p - eta * g, floor)
            fc = f(cand)
            if fc <= fp:
                p, fp = cand, fc
                break
            eta *= 0.5
        else:
            break
    return p, proposal_variance(table, proposal=p)


@dataclass
class CorrelationResult:
    pearson: float
    spearman: float
    n_pairs: int
    losses: np.ndarray = field(repr=False)
    norms: np.ndarray = field(repr=False)


def correlation_from_pairs(losses, norms, min_pairs: int = 30) -> CorrelationResult:
    losses = np.asarray(losses, dtype=np.float64)
    norms = np.asarray(norms, dtype=np.float64)
    if losses.size < min_pairs:
        raise ValueError(f"need at least {min_pairs} (loss, norm) pairs, got {losses.size}")
    if np.ptp(losses) == 0.0 or np.ptp(norms) == 0.0:
        raise DegenerateError("correlation is undefined for a constant series")
    return CorrelationResult(
        float(stats.pearsonr(losses, norms)[0]), float(stats.spearmanr(losses, norms)[0]), losses.size, losses, norms
    )


def loss_norm_correlation(corpus: Sequence[TokenSequence], params: EncoderParams, min_pairs: int = 30) -> CorrelationResult:
    """Pearson and Spearman over pooled single-position (loss, gradient norm) pairs."""
    rows = np.concatenate([position_loss_and_norm_table(params, x) for x in corpus])
    return correlation_from_pairs(rows[:, 0], rows[:, 1], min_pairs)


def _mc_estimates(samples: Sequence[np.ndarray]) -> tuple[float, float]:
    """Unbiased (mask_term, sentence_term) from per-sentence (S, D) samples of the weighted gradient."""
    N = len(samples)
    S = samples[0].shape[0]
    means = np.stack([s.mean(axis=0) for s in samples])
    within = np.array([((s - m) ** 2).sum(axis=1).sum() / (S - 1) for s, m in zip(samples, means)])
    mask_term = float(within.mean())
    spread = float(((means - means.mean(axis=0)) ** 2).sum(axis=1).mean())
    sentence_term = spread - (1.0 - 1.0 / N) * float(within.mean()) / S
    return mask_term, sentence_term


def mc_variance_decomposition(
    corpus: Sequence[TokenSequence],
    params: EncoderParams,
    K: int | None,
    proposal: Callable | None,
    num_samples: int,
    rng: np.random.Generator,
    num_batches: int = 8,
    mask_rate: float = 0.15,
    clip_eps: float | None = None,
) -> VarianceReport:
    """Sampled counterpart of :func:`exact_variance_decomposition`.

    Draws ``num_samples`` masks per sentence from the proposal (uniform when
    ``proposal`` is None) and weights each gradient by the exact ratio
    ``p_rand(S) / q(S)``.  ``K=None`` uses ``max(1, round(mask_rate * n))``
    per sentence.  Standard errors come from splitting the samples into
    ``num_batches`` contiguous batches (reported as None when fewer than two
    batches of at least two samples fit).
    """
    if num_samples < 2:
        raise ValueError("need at least two samples per sentence")
    samples = []
    ratios = []
    min_prob = 1.0
    for x in corpus:
        n = len(x)
        k = num_masked(n, mask_rate) if K is None else K
        base = 1.0 / math.comb(n, k)
        probs = None if proposal is None else _position_probs(proposal(x))
        if probs is not None:
            min_prob = min(min_prob, float(probs.min() / probs.sum()))
        rows = []
        for _ in range(num_samples):
            if probs is None:
                subset = np.sort(rng.choice(n, size=k, replace=False))
                r = 1.0
            else:
                subset, _ = sample_positions(probs, k, rng)
                subset = np.sort(subset)
                r = base / subset_probability(probs, subset)
                if clip_eps is not None:
                    r = min(max(r, 1.0 - clip_eps), 1.0 + clip_eps)
            ratios.append(r)
            g = sentence_gradient(params, mask_only(x, subset), subset, x, weight=r)[0]
            rows.append(g)
        samples.append(np.stack(rows))
    mask_term, sentence_term = _mc_estimates(samples)
    total = mask_term + sentence_term
    report = VarianceReport(total, mask_term, sentence_term, total - (mask_term + sentence_term))
    B = min(num_batches, num_samples // 2)
    if B >= 2:
        edges = np.linspace(0, num_samples, B + 1).astype(int)
        est = np.array([_mc_estimates([s[a:b] for s in samples]) for a, b in zip(edges[:-1], edges[1:])])
        se = est.std(axis=0, ddof=1) / math.sqrt(B)
        se_total = float(np.std(est.sum(axis=1), ddof=1) / math.sqrt(B))
        report.mask_term_stderr, report.sentence_term_stderr, report.total_stderr = float(se[0]), float(se[1]), se_total
    report.meta = {
        "mode": "mc",
        "K": K,
        "sentences": len(corpus),
        "samples_per_sentence": num_samples,
        "batches": B,
        "proposal": "uniform" if proposal is None else "custom",
        # E_q[r] = 1 for the exact ratio; a sample mean far below 1 means the
        # heavy tail of r was not sampled and the variance is underestimated
        "ratio_mean": float(np.mean(ratios)),
        "ratio_max": float(np.max(ratios)),
        "min_position_prob": float(min_prob) if proposal is not None else None,
    }
    return report
