"""Corpora generated from the model's own generative story with planted
parameters: the ground truth for recovery tests.

Generation uses the exact (untruncated) Poisson, so the truncation used on the
inference side stays a separately tested approximation. Document labels come
from the planted brand scores: POS above +0.3, NEG below -0.3, NEU between.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse

from .corpus import Corpus, Vocabulary, holdout_split
from .errors import ValidationError

LABEL_THRESHOLD = 0.3

PLANTED_FORMAT = "planted-params"
PLANTED_VERSION = 1


@dataclass
class PlantedModel:
    """True factors behind a synthetic corpus."""

    theta: np.ndarray
    beta: np.ndarray
    eta: np.ndarray
    x: np.ndarray
    brand_of: np.ndarray

    def __post_init__(self):
        if (self.theta <= 0).any() or (self.beta <= 0).any():
            raise ValidationError("planted theta and beta must be positive")
        if (np.abs(self.x) > 1).any():
            raise ValidationError("planted brand scores must lie in [-1, 1]")

    @property
    def num_brands(self) -> int:
        return len(self.x)

    def positive_words(self, topic: int) -> np.ndarray:
        return np.flatnonzero(self.eta[topic] > 0)

    def negative_words(self, topic: int) -> np.ndarray:
        return np.flatnonzero(self.eta[topic] < 0)


def planted_labels(planted: PlantedModel) -> np.ndarray:
    score = planted.x[planted.brand_of]
    return np.where(score > LABEL_THRESHOLD, 2,
                    np.where(score < -LABEL_THRESHOLD, 0, 1))


def rate_matrix(planted: PlantedModel) -> np.ndarray:
    """Dense true rates; per-brand adjusted topics keep this at B*K*V work."""
    d, _ = planted.theta.shape
    lam = np.empty((d, planted.beta.shape[1]))
    for b in range(planted.num_brands):
        docs = planted.brand_of == b
        if docs.any():
            adjusted = planted.beta * np.exp(planted.x[b] * planted.eta)
            lam[docs] = planted.theta[docs] @ adjusted
    return lam


def synthetic_vocabulary(num_terms: int) -> Vocabulary:
    return Vocabulary.from_tokens([f"w{v:04d}" for v in range(num_terms)])


def generate(planted: PlantedModel, rng: np.random.Generator,
             test_fraction: float = 0.10) -> Corpus:
    """Draw counts from Pois(rate), label documents from the planted brand
    scores, and split with a seeded holdout drawn from `rng`."""
    lam = rate_matrix(planted)
    counts = rng.poisson(lam)
    keep = counts.sum(axis=1) > 0
    counts = counts[keep]
    labels = planted_labels(planted)[keep]
    brand_ids = planted.brand_of[keep]
    is_test = holdout_split(len(counts), test_fraction,
                            seed=int(rng.integers(2 ** 31)))
    corpus = Corpus(
        counts=sparse.csr_matrix(counts.astype(np.int64)),
        brand_ids=brand_ids.astype(np.int64),
        labels=labels.astype(np.int64),
        is_test=is_test,
        brand_names=[f"brand{b:02d}" for b in range(planted.num_brands)],
        brand_truth=planted.x.copy(),
    )
    corpus.validate()
    return corpus


def default_testbed(seed: int) -> tuple[PlantedModel, Corpus]:
    """Desk-scale testbed: D=5000, V=200, K=5, B=10.

    Brand scores are evenly spaced over [-1, 1]. Each topic owns a block of 40
    words with elevated beta; within the block the first 10 words carry a +1
    polarity offset and the last 10 carry -1, so positive and negative word
    sets are disjoint by construction.
    """
    num_docs, num_terms, num_topics, num_brands = 5000, 200, 5, 10
    rng = np.random.default_rng(seed)

    beta = np.full((num_topics, num_terms), 0.01)
    eta = np.zeros((num_topics, num_terms))
    block = num_terms // num_topics
    for k in range(num_topics):
        lo = k * block
        beta[k, lo:lo + block] = 0.5
        eta[k, lo:lo + 10] = 1.0
        eta[k, lo + block - 10:lo + block] = -1.0

    theta = rng.gamma(shape=0.5, scale=0.1, size=(num_docs, num_topics))
    dominant = rng.integers(0, num_topics, size=num_docs)
    theta[np.arange(num_docs), dominant] += rng.gamma(
        shape=10.0, scale=0.2, size=num_docs)

    planted = PlantedModel(
        theta=theta, beta=beta, eta=eta,
        x=np.linspace(-1.0, 1.0, num_brands),
        brand_of=rng.integers(0, num_brands, size=num_docs),
    )
    return planted, generate(planted, rng)


def save_planted(planted: PlantedModel, path: str) -> None:
    meta = json.dumps({"format": PLANTED_FORMAT, "version": PLANTED_VERSION})
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)),
                               suffix=".npz")
    os.close(fd)
    try:
        np.savez(tmp, meta=np.array(meta), theta=planted.theta, beta=planted.beta,
                 eta=planted.eta, x=planted.x, brand_of=planted.brand_of)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_planted(path: str) -> PlantedModel:
    with np.load(path) as archive:
        meta = json.loads(str(archive["meta"]))
        if meta.get("format") != PLANTED_FORMAT:
            raise ValidationError(f"{path} is not a planted-parameter file")
        return PlantedModel(theta=archive["theta"], beta=archive["beta"],
                            eta=archive["eta"], x=archive["x"],
                            brand_of=archive["brand_of"])
