"""Review ingestion: n-gram bag-of-words corpora with brand ids, polarity labels,
a train/test holdout, and class-balanced mini-batch sampling.

Conventions fixed here and documented in the README:
  * tokenization lowercases, splits on non-alphanumeric runs, and drops a fixed
    English stopword list (STOPWORDS below) before n-grams are formed;
  * n-grams (n = 1, 2, 3) are taken over contiguous post-stopword tokens;
  * brand ids are assigned by lexicographic order of the brand strings.
"""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
import scipy.sparse as sparse

from .errors import ValidationError

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[a-z0-9]+")

# Snowball English stopword list (verbatim), a small standard list that keeps
# content-bearing words like "stopped", "working", "never".
STOPWORDS = frozenset("""
i me my myself we our ours ourselves you your yours yourself yourselves he him
his himself she her hers herself it its itself they them their theirs
themselves what which who whom this that these those am is are was were be
been being have has had having do does did doing would should could ought i'm
you're he's she's it's we're they're i've you've we've they've i'd you'd he'd
she'd we'd they'd i'll you'll he'll she'll we'll they'll isn't aren't wasn't
weren't hasn't haven't hadn't doesn't don't didn't won't wouldn't shan't
shouldn't can't cannot couldn't mustn't let's that's who's what's here's
there's when's where's why's how's a an the and but if or because as until
while of at by for with about against between into through during before
after above below to from up down in out on off over under again further
then once here there when where why how all any both each few more most
other some such no nor not only own same so than too very s t can will just
don should now
""".split())


class Polarity(IntEnum):
    NEG = 0
    NEU = 1
    POS = 2


LABEL_NAMES = ("NEG", "NEU", "POS")

# Signed value used when a label has to act as a score (sign alignment, synthesis).
LABEL_VALUES = np.array([-1.0, 0.0, 1.0])


@dataclass(frozen=True)
class RawReview:
    """One labeled review record: text, star rating in 1..5, nonempty brand."""

    text: str
    rating: int
    brand: str


def label_from_rating(rating: int) -> Polarity:
    """Map a star rating to a polarity class: 1,2 -> NEG; 3 -> NEU; 4,5 -> POS."""
    if not isinstance(rating, (int, np.integer)) or isinstance(rating, bool):
        raise ValidationError(f"rating must be an integer in 1..5, got {rating!r}")
    if rating < 1 or rating > 5:
        raise ValidationError(f"rating must be in 1..5, got {rating}")
    if rating <= 2:
        return Polarity.NEG
    if rating == 3:
        return Polarity.NEU
    return Polarity.POS


def tokenize(text: str) -> list[str]:
    """Lowercase, split on non-alphanumeric runs, drop stopwords."""
    return [t for t in _TOKEN_RE.findall(text.lower()) if t not in STOPWORDS]


def ngram_terms(tokens: list[str]) -> list[str]:
    """Unigrams, bigrams and trigrams over contiguous (post-stopword) tokens."""
    terms = list(tokens)
    for n in (2, 3):
        terms.extend(" ".join(tokens[i:i + n]) for i in range(len(tokens) - n + 1))
    return terms


def extract_terms(text: str) -> list[str]:
    return ngram_terms(tokenize(text))


@dataclass
class Vocabulary:
    """Ordered n-gram vocabulary; token ids are positions in `tokens`."""

    tokens: list[str]
    index: dict[str, int] = field(repr=False)

    @classmethod
    def from_tokens(cls, tokens: list[str]) -> "Vocabulary":
        index = {tok: i for i, tok in enumerate(tokens)}
        if len(index) != len(tokens):
            raise ValidationError("vocabulary tokens must be unique")
        return cls(tokens=list(tokens), index=index)

    @property
    def size(self) -> int:
        return len(self.tokens)


def build_vocabulary(reviews: list[RawReview], max_vocab: int,
                     min_count: int = 2) -> Vocabulary:
    """Count n-grams over `reviews`, drop terms seen fewer than `min_count` times,
    keep the `max_vocab` most frequent (ties broken lexicographically)."""
    if not reviews:
        raise ValidationError("cannot build a vocabulary from an empty review list")
    if max_vocab < 1:
        raise ValidationError(f"max_vocab must be >= 1, got {max_vocab}")
    freqs = Counter()
    for review in reviews:
        freqs.update(extract_terms(review.text))
    kept = [(tok, cnt) for tok, cnt in freqs.items() if cnt >= min_count]
    if not kept:
        raise ValidationError(
            f"vocabulary is empty after filtering terms with count < {min_count}")
    kept.sort(key=lambda item: (-item[1], item[0]))
    return Vocabulary.from_tokens([tok for tok, _ in kept[:max_vocab]])


def holdout_split(n_docs: int, test_fraction: float, seed: int) -> np.ndarray:
    """Seeded uniform holdout; returns a boolean mask with round(test_fraction * n) True."""
    if not 0.0 <= test_fraction < 1.0:
        raise ValidationError(f"test_fraction must be in [0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    n_test = int(round(test_fraction * n_docs))
    is_test = np.zeros(n_docs, dtype=bool)
    is_test[rng.permutation(n_docs)[:n_test]] = True
    return is_test


@dataclass
class Corpus:
    """Sparse document-term counts plus per-document brand id, polarity label and split.

    Immutable once built; safe to share across threads. `brand_truth` optionally
    carries a per-brand ground-truth score (mean star rating for review data,
    planted polarity for synthetic data) used by brand-ranking evaluation.
    """

    counts: sparse.csr_matrix
    brand_ids: np.ndarray
    labels: np.ndarray
    is_test: np.ndarray
    brand_names: list[str]
    brand_truth: np.ndarray | None = None
    _train_by_class: dict | None = field(default=None, repr=False, compare=False)

    @property
    def num_docs(self) -> int:
        return self.counts.shape[0]

    @property
    def num_terms(self) -> int:
        return self.counts.shape[1]

    @property
    def num_brands(self) -> int:
        return len(self.brand_names)

    @property
    def train_ids(self) -> np.ndarray:
        return np.flatnonzero(~self.is_test)

    @property
    def test_ids(self) -> np.ndarray:
        return np.flatnonzero(self.is_test)

    def validate(self) -> None:
        d, _ = self.counts.shape
        if self.brand_ids.shape != (d,) or self.labels.shape != (d,) \
                or self.is_test.shape != (d,):
            raise ValidationError("per-document arrays must all have length D")
        row_totals = np.asarray(self.counts.sum(axis=1)).ravel()
        if d and row_totals.min() < 1:
            raise ValidationError("every document must have at least one nonzero count")
        if self.counts.nnz and self.counts.data.min() < 0:
            raise ValidationError("counts must be nonnegative")
        if d and (self.brand_ids.min() < 0 or self.brand_ids.max() >= self.num_brands):
            raise ValidationError("brand ids must lie in 0..B-1")
        if d and not np.isin(self.labels, [0, 1, 2]).all():
            raise ValidationError("labels must be NEG/NEU/POS")
        if self.brand_truth is not None and self.brand_truth.shape != (self.num_brands,):
            raise ValidationError("brand_truth must have one entry per brand")

    def train_ids_by_class(self) -> dict[int, np.ndarray]:
        if self._train_by_class is None:
            train = self.train_ids
            self._train_by_class = {
                int(c): train[self.labels[train] == c] for c in (0, 1, 2)
            }
        return self._train_by_class


def vectorize(reviews: list[RawReview], vocab: Vocabulary,
              test_fraction: float = 0.10, seed: int = 0,
              brands: list[str] | None = None) -> Corpus:
    """Count in-vocabulary terms per review and assemble a Corpus.

    The holdout split is re-derived from (len(reviews), test_fraction, seed), so
    callers that built `vocab` from the train portion see the identical split.
    Documents with no in-vocabulary terms are dropped with a logged warning.
    If `brands` is given, a review with a brand outside it is a validation error.
    """
    if not reviews:
        raise ValidationError("cannot vectorize an empty review list")
    known = set(brands) if brands is not None else None
    for i, review in enumerate(reviews):
        if not review.brand:
            raise ValidationError(f"review {i} has an empty brand")
        if known is not None and review.brand not in known:
            raise ValidationError(f"review {i} has unknown brand {review.brand!r}")

    is_test = holdout_split(len(reviews), test_fraction, seed)

    rows, cols, vals = [], [], []
    kept_docs = []
    dropped = 0
    for i, review in enumerate(reviews):
        term_counts = Counter(
            vocab.index[t] for t in extract_terms(review.text) if t in vocab.index)
        if not term_counts:
            dropped += 1
            continue
        row = len(kept_docs)
        kept_docs.append(i)
        for term_id, count in term_counts.items():
            rows.append(row)
            cols.append(term_id)
            vals.append(count)
    if dropped:
        logger.warning("dropped %d documents with no in-vocabulary terms", dropped)
    if not kept_docs:
        raise ValidationError("no documents left after dropping empty ones")

    kept_docs = np.asarray(kept_docs)
    counts = sparse.csr_matrix(
        (np.asarray(vals, dtype=np.int64), (rows, cols)),
        shape=(len(kept_docs), vocab.size))

    # Brand ids are dense over the brands that survive the drop.
    kept_brands = sorted({reviews[i].brand for i in kept_docs})
    brand_index = {name: b for b, name in enumerate(kept_brands)}
    brand_ids = np.asarray([brand_index[reviews[i].brand] for i in kept_docs])
    labels = np.asarray([int(label_from_rating(reviews[i].rating)) for i in kept_docs])

    truth = np.zeros(len(kept_brands))
    brand_doc_counts = np.zeros(len(kept_brands))
    for i in kept_docs:
        b = brand_index[reviews[i].brand]
        truth[b] += reviews[i].rating
        brand_doc_counts[b] += 1
    truth /= brand_doc_counts

    corpus = Corpus(counts=counts, brand_ids=brand_ids, labels=labels,
                    is_test=is_test[kept_docs], brand_names=kept_brands,
                    brand_truth=truth)
    corpus.validate()
    return corpus


@dataclass(frozen=True)
class Batch:
    """Doc ids for one mini-batch plus how many came from each polarity class."""

    doc_ids: np.ndarray
    class_counts: tuple[int, int, int]


def sample_balanced_batch(corpus: Corpus, batch_size: int,
                          rng: np.random.Generator) -> Batch:
    """Class-balanced oversampling: each slot picks a class uniformly, then a
    train document uniformly with replacement from that class."""
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    by_class = corpus.train_ids_by_class()
    for c in (0, 1, 2):
        if len(by_class[c]) == 0:
            raise ValidationError(
                f"cannot balance batches: class {LABEL_NAMES[c]} has no train documents")
    classes = rng.integers(0, 3, size=batch_size)
    doc_ids = np.empty(batch_size, dtype=np.int64)
    for c in (0, 1, 2):
        mask = classes == c
        pool = by_class[c]
        doc_ids[mask] = pool[rng.integers(0, len(pool), size=int(mask.sum()))]
    counts = tuple(int((classes == c).sum()) for c in (0, 1, 2))
    return Batch(doc_ids=doc_ids, class_counts=counts)
