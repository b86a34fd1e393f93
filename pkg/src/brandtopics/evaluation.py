"""Evaluation: polarity-swept topic reports, rank correlations with p-values,
topic uniqueness, sliding-window context-vector coherence, and brand ranking.

Everything here is a pure function of numpy arrays and immutable corpora, so
reports are deterministic and safe to run concurrently with training snapshots.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .corpus import LABEL_VALUES, Corpus
from .errors import DegenerateStatisticError, ValidationError

logger = logging.getLogger(__name__)

_NPMI_EPS = 1e-12


# ---------------------------------------------------------------------------
# Topic reports


@dataclass(frozen=True)
class TopicEntry:
    topic: int
    s: float
    words: tuple[str, ...]


@dataclass
class TopicReport:
    """Top words per (topic, polarity sweep value)."""

    s_values: tuple[float, ...]
    top_m: int
    entries: list[TopicEntry] = field(default_factory=list)

    def words_for(self, topic: int, s: float) -> tuple[str, ...]:
        for entry in self.entries:
            if entry.topic == topic and entry.s == s:
                return entry.words
        raise KeyError((topic, s))

    def num_topics(self) -> int:
        return 1 + max(entry.topic for entry in self.entries)

    def to_text(self) -> str:
        lines = []
        for entry in self.entries:
            lines.append(f"topic {entry.topic}\ts={entry.s:g}\t"
                         + ", ".join(entry.words) + "\n")
        return "".join(lines)


def sweep_topics(beta_loc: np.ndarray, eta_loc: np.ndarray, tokens: list[str],
                 s_values=(-1.0, 0.0, 1.0), top_m: int = 10) -> TopicReport:
    """Rank words by exp(beta_loc + s * eta_loc) at each sweep value
    (variational-mean plug-in; the exp is monotone so ranks are exact).
    Ties break lexicographically."""
    num_topics, num_terms = beta_loc.shape
    if len(tokens) != num_terms:
        raise ValidationError(
            f"token list has {len(tokens)} entries for {num_terms} terms")
    token_arr = np.asarray(tokens)
    report = TopicReport(s_values=tuple(float(s) for s in s_values), top_m=top_m)
    for k in range(num_topics):
        for s in report.s_values:
            intensity = beta_loc[k] + s * eta_loc[k]
            order = np.lexsort((token_arr, -intensity))[:top_m]
            report.entries.append(
                TopicEntry(topic=k, s=s, words=tuple(token_arr[order])))
    return report


# ---------------------------------------------------------------------------
# Rank correlations

def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Average ranks, returned doubled so every entry is an exact integer."""
    order = np.argsort(values, kind="stable")
    doubled = np.empty(len(values), dtype=np.int64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        # positions i..j (0-based) share rank; doubled avg = (i+1) + (j+1)
        doubled[order[i:j + 1]] = i + j + 2
        i = j + 1
    return doubled


def _pearson_from_integer_vectors(a: np.ndarray, b: np.ndarray) -> float:
    # Moment formula over integer-valued inputs keeps every intermediate exact
    # in float64, so results are reproducible bit-for-bit across orderings.
    n = len(a)
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    num = n * float(a @ b) - float(a.sum()) * float(b.sum())
    var_a = n * float(a @ a) - float(a.sum()) ** 2
    var_b = n * float(b @ b) - float(b.sum()) ** 2
    if var_a == 0 or var_b == 0:
        raise DegenerateStatisticError("rank correlation undefined: zero rank variance")
    return num / math.sqrt(var_a * var_b)


def _clamp_p(p: float) -> float:
    return min(max(float(p), np.finfo(float).tiny), 1.0)


def spearman(a, b) -> tuple[float, float]:
    """Spearman correlation (average ranks for ties) and the two-sided p-value
    from the t approximation with n-2 degrees of freedom."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("inputs must be 1-d vectors of equal length")
    n = len(a)
    if n < 3:
        raise ValidationError(f"need n >= 3, got {n}")
    corr = _pearson_from_integer_vectors(_average_ranks(a), _average_ranks(b))
    corr = min(max(corr, -1.0), 1.0)
    if abs(corr) == 1.0:
        return corr, _clamp_p(0.0)
    t = corr * math.sqrt((n - 2) / (1.0 - corr * corr))
    return corr, _clamp_p(2.0 * stats.t.sf(abs(t), df=n - 2))


def kendall_tau(a, b) -> tuple[float, float]:
    """Tie-corrected Kendall tau-b by pair counting, with the two-sided
    p-value from the normal approximation of the concordance statistic."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("inputs must be 1-d vectors of equal length")
    n = len(a)
    if n < 3:
        raise ValidationError(f"need n >= 3, got {n}")
    sign_a = np.sign(a[:, None] - a[None, :])
    sign_b = np.sign(b[:, None] - b[None, :])
    # Each unordered pair appears twice in the upper+lower triangle product.
    concordant_minus_discordant = float((sign_a * sign_b).sum()) / 2.0

    n0 = n * (n - 1) // 2

    def tie_sizes(values):
        _, counts = np.unique(values, return_counts=True)
        return counts[counts > 1].astype(np.float64)

    ties_a, ties_b = tie_sizes(a), tie_sizes(b)
    t1 = float((ties_a * (ties_a - 1)).sum()) / 2.0
    t2 = float((ties_b * (ties_b - 1)).sum()) / 2.0
    if n0 - t1 == 0 or n0 - t2 == 0:
        raise DegenerateStatisticError("kendall tau undefined: an input is all ties")
    corr = concordant_minus_discordant / math.sqrt((n0 - t1) * (n0 - t2))
    corr = min(max(corr, -1.0), 1.0)

    v0 = n * (n - 1) * (2 * n + 5)
    vt = float((ties_a * (ties_a - 1) * (2 * ties_a + 5)).sum())
    vu = float((ties_b * (ties_b - 1) * (2 * ties_b + 5)).sum())
    v1 = (2.0 * t1) * (2.0 * t2) / (2.0 * n * (n - 1))
    v2 = float((ties_a * (ties_a - 1) * (ties_a - 2)).sum()) \
        * float((ties_b * (ties_b - 1) * (ties_b - 2)).sum()) \
        / (9.0 * n * (n - 1) * (n - 2))
    var = (v0 - vt - vu) / 18.0 + v1 + v2
    if var <= 0:
        return corr, 1.0
    z = concordant_minus_discordant / math.sqrt(var)
    return corr, _clamp_p(math.erfc(abs(z) / math.sqrt(2.0)))


# ---------------------------------------------------------------------------
# Topic uniqueness

@dataclass
class UniquenessScore:
    tu: float
    counts: dict[tuple[int, str], int]


def topic_uniqueness(report: TopicReport) -> UniquenessScore:
    """Mean over all list slots of 1/cnt, where cnt is how many of a topic's
    sweep lists (normally the negative/neutral/positive three) contain the
    slot's word."""
    counts: dict[tuple[int, str], int] = {}
    for entry in report.entries:
        if len(set(entry.words)) != len(entry.words):
            raise ValidationError(
                f"duplicate word in topic {entry.topic} list at s={entry.s}")
        for word in entry.words:
            key = (entry.topic, word)
            counts[key] = counts.get(key, 0) + 1
    reciprocal_sum = 0.0
    slots = 0
    for entry in report.entries:
        for word in entry.words:
            reciprocal_sum += 1.0 / counts[(entry.topic, word)]
            slots += 1
    if slots == 0:
        raise ValidationError("empty topic report")
    return UniquenessScore(tu=reciprocal_sum / slots, counts=counts)


# ---------------------------------------------------------------------------
# Context-vector coherence

def _window_statistics(docs: list[list[str]], vocab: dict[str, int], window: int):
    """Boolean sliding-window marginal and joint counts for the given words.
    Documents shorter than the window form a single window."""
    size = len(vocab)
    marginal = np.zeros(size)
    joint = np.zeros((size, size))
    n_windows = 0
    for doc in docs:
        if len(doc) <= window:
            spans = [doc]
        else:
            spans = [doc[i:i + window] for i in range(len(doc) - window + 1)]
        for span in spans:
            n_windows += 1
            present = sorted({vocab[tok] for tok in span if tok in vocab})
            if present:
                idx = np.asarray(present)
                marginal[idx] += 1
                joint[np.ix_(idx, idx)] += 1
    return n_windows, marginal, joint


def _npmi(p_joint: float, p_i: float, p_j: float) -> float:
    if p_joint >= 1.0:
        return 1.0
    return math.log((p_joint + _NPMI_EPS) / (p_i * p_j)) \
        / -math.log(p_joint + _NPMI_EPS)


def coherence_scores(topics: list[list[str]], docs: list[list[str]],
                     window: int = 110) -> list[float]:
    """Per-topic coherence: NPMI context vectors over the topic's word set,
    one-set segmentation, mean cosine between each word's vector and the sum.

    Words absent from the reference corpus contribute zero vectors (logged).
    """
    if window < 1:
        raise ValidationError(f"window must be >= 1, got {window}")
    every_word = sorted({w for topic in topics for w in topic})
    vocab = {w: i for i, w in enumerate(every_word)}
    n_windows, marginal, joint = _window_statistics(docs, vocab, window)
    if n_windows == 0:
        raise ValidationError("reference corpus is empty")

    absent = [w for w in every_word if marginal[vocab[w]] == 0]
    if absent:
        logger.warning("%d topic words absent from the reference corpus: %s",
                       len(absent), ", ".join(absent[:10]))

    scores = []
    for topic in topics:
        ids = [vocab[w] for w in topic]
        m = len(ids)
        vectors = np.zeros((m, m))
        for i, wi in enumerate(ids):
            if marginal[wi] == 0:
                continue
            for j, wj in enumerate(ids):
                if marginal[wj] == 0:
                    continue
                vectors[i, j] = _npmi(joint[wi, wj] / n_windows,
                                      marginal[wi] / n_windows,
                                      marginal[wj] / n_windows)
        reference = vectors.sum(axis=0)
        ref_norm = np.linalg.norm(reference)
        cosines = []
        for i in range(m):
            norm = np.linalg.norm(vectors[i])
            if norm == 0 or ref_norm == 0:
                cosines.append(0.0)
            else:
                cosines.append(float(vectors[i] @ reference / (norm * ref_norm)))
        scores.append(float(np.mean(cosines)))
    return scores


def topic_coherence(topics: list[list[str]], docs: list[list[str]],
                    window: int = 110) -> float:
    """Mean per-topic coherence over all supplied word lists."""
    return float(np.mean(coherence_scores(topics, docs, window=window)))


# ---------------------------------------------------------------------------
# Brand ranking

@dataclass
class BrandRanking:
    """Sign-aligned brand scores vs ground truth with rank-correlation stats."""

    brand_ids: np.ndarray
    brand_names: list[str]
    scores: np.ndarray
    truth: np.ndarray
    spearman_corr: float
    spearman_p: float
    kendall_corr: float
    kendall_p: float
    sign_flipped: bool
    degenerate: bool
    excluded: list[int]

    def to_tsv(self) -> str:
        order = np.argsort(-self.scores)
        rows = ["rank\tbrand_id\tbrand\tscore\ttruth\n"]
        for rank, i in enumerate(order, start=1):
            rows.append(f"{rank}\t{self.brand_ids[i]}\t{self.brand_names[i]}"
                        f"\t{self.scores[i]:.6f}\t{self.truth[i]:.6f}\n")
        return "".join(rows)


def rank_brands(x_loc: np.ndarray, corpus: Corpus,
                truth: np.ndarray | None = None) -> BrandRanking:
    """Rank brands by inferred score against per-brand ground truth.

    The model is invariant under jointly negating brand scores and polarity
    offsets, so scores are first sign-aligned: if their Spearman correlation
    with per-brand mean train-label values (NEG=-1, NEU=0, POS=1) is negative,
    all scores are negated. Brands absent from the test split are excluded
    from the correlations with a warning. Degenerate correlations (constant
    scores) are flagged rather than raised.
    """
    if truth is None:
        truth = corpus.brand_truth
    if truth is None:
        raise ValidationError("no ground-truth brand scores available")
    truth = np.asarray(truth, dtype=np.float64)
    num_brands = corpus.num_brands
    if x_loc.shape != (num_brands,) or truth.shape != (num_brands,):
        raise ValidationError("x_loc and truth must have one entry per brand")

    train_mask = ~corpus.is_test
    label_value_sum = np.bincount(
        corpus.brand_ids[train_mask],
        weights=LABEL_VALUES[corpus.labels[train_mask]], minlength=num_brands)
    train_counts = np.bincount(corpus.brand_ids[train_mask], minlength=num_brands)
    has_train = train_counts > 0

    sign_flipped = False
    degenerate = False
    try:
        align_corr, _ = spearman(x_loc[has_train],
                                 label_value_sum[has_train] / train_counts[has_train])
        sign_flipped = align_corr < 0
    except (DegenerateStatisticError, ValidationError):
        degenerate = True
    scores = -x_loc if sign_flipped else x_loc.copy()

    test_counts = np.bincount(corpus.brand_ids[corpus.is_test], minlength=num_brands)
    included = np.flatnonzero(test_counts > 0)
    excluded = np.flatnonzero(test_counts == 0).tolist()
    if excluded:
        logger.warning("excluding %d brands with no test documents: %s",
                       len(excluded),
                       ", ".join(corpus.brand_names[b] for b in excluded))

    s_corr = s_p = k_corr = k_p = float("nan")
    try:
        s_corr, s_p = spearman(scores[included], truth[included])
        k_corr, k_p = kendall_tau(scores[included], truth[included])
    except (DegenerateStatisticError, ValidationError) as exc:
        logger.warning("brand ranking correlation undefined: %s", exc)
        degenerate = True

    return BrandRanking(
        brand_ids=included,
        brand_names=[corpus.brand_names[b] for b in included],
        scores=scores[included], truth=truth[included],
        spearman_corr=s_corr, spearman_p=s_p,
        kendall_corr=k_corr, kendall_p=k_p,
        sign_flipped=bool(sign_flipped), degenerate=degenerate,
        excluded=excluded)
