"""On-disk corpus bundle format and raw review file readers.

A bundle directory contains:
  vocabulary.txt   one token per line, id = line number
  counts.txt       one "doc term count" triple per line (coordinate format)
  docs.tsv         header + one "doc brand_id label split" row per document
  brands.txt       one brand name per line, id = line number
  brand_stats.tsv  optional; header + "brand_id n_train n_test truth_score" rows

Raw review inputs are newline-delimited records with fields text, rating, brand:
JSON-lines (.jsonl/.json) or TSV with a header row (.tsv/.txt), auto-detected
by extension.
"""

from __future__ import annotations

import json
import os

import numpy as np
import scipy.sparse as sparse

from .corpus import LABEL_NAMES, Corpus, RawReview, Vocabulary
from .errors import ValidationError
from .util import atomic_write_text

_LABEL_IDS = {name: i for i, name in enumerate(LABEL_NAMES)}


def save_bundle(corpus: Corpus, vocab: Vocabulary, out_dir: str) -> list[str]:
    """Write the bundle files; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    def emit(name: str, text: str) -> None:
        path = os.path.join(out_dir, name)
        atomic_write_text(path, text)
        paths.append(path)

    emit("vocabulary.txt", "".join(tok + "\n" for tok in vocab.tokens))

    coo = corpus.counts.tocoo()
    order = np.lexsort((coo.col, coo.row))
    lines = [f"{coo.row[i]} {coo.col[i]} {coo.data[i]}\n" for i in order]
    emit("counts.txt", "".join(lines))

    rows = ["doc\tbrand_id\tlabel\tsplit\n"]
    for d in range(corpus.num_docs):
        split = "TEST" if corpus.is_test[d] else "TRAIN"
        rows.append(f"{d}\t{corpus.brand_ids[d]}\t{LABEL_NAMES[corpus.labels[d]]}\t{split}\n")
    emit("docs.tsv", "".join(rows))

    emit("brands.txt", "".join(name + "\n" for name in corpus.brand_names))

    if corpus.brand_truth is not None:
        train_b = np.bincount(corpus.brand_ids[~corpus.is_test], minlength=corpus.num_brands)
        test_b = np.bincount(corpus.brand_ids[corpus.is_test], minlength=corpus.num_brands)
        rows = ["brand_id\tn_train\tn_test\ttruth_score\n"]
        for b in range(corpus.num_brands):
            rows.append(f"{b}\t{train_b[b]}\t{test_b[b]}\t{float(corpus.brand_truth[b])!r}\n")
        emit("brand_stats.tsv", "".join(rows))
    return paths


def load_bundle(bundle_dir: str) -> tuple[Corpus, Vocabulary]:
    """Read and validate a bundle directory."""
    def path_of(name: str) -> str:
        path = os.path.join(bundle_dir, name)
        if not os.path.exists(path):
            raise ValidationError(f"bundle is missing {name} (looked in {bundle_dir})")
        return path

    with open(path_of("vocabulary.txt")) as handle:
        tokens = [line.rstrip("\n") for line in handle if line.rstrip("\n")]
    vocab = Vocabulary.from_tokens(tokens)

    with open(path_of("brands.txt")) as handle:
        brand_names = [line.rstrip("\n") for line in handle if line.rstrip("\n")]

    brand_ids, labels, is_test = [], [], []
    with open(path_of("docs.tsv")) as handle:
        header = handle.readline().rstrip("\n").split("\t")
        if header != ["doc", "brand_id", "label", "split"]:
            raise ValidationError(f"docs.tsv has unexpected header {header}")
        for lineno, line in enumerate(handle):
            doc, brand_id, label, split = line.rstrip("\n").split("\t")
            if int(doc) != lineno:
                raise ValidationError(f"docs.tsv row {lineno} has doc id {doc}")
            if label not in _LABEL_IDS:
                raise ValidationError(f"docs.tsv row {lineno} has unknown label {label!r}")
            if split not in ("TRAIN", "TEST"):
                raise ValidationError(f"docs.tsv row {lineno} has unknown split {split!r}")
            brand_ids.append(int(brand_id))
            labels.append(_LABEL_IDS[label])
            is_test.append(split == "TEST")
    n_docs = len(brand_ids)

    rows, cols, vals = [], [], []
    with open(path_of("counts.txt")) as handle:
        for lineno, line in enumerate(handle):
            parts = line.split()
            if len(parts) != 3:
                raise ValidationError(f"counts.txt line {lineno} is not 'doc term count'")
            d, v, c = (int(p) for p in parts)
            if not (0 <= d < n_docs and 0 <= v < vocab.size and c >= 0):
                raise ValidationError(f"counts.txt line {lineno} is out of range")
            rows.append(d)
            cols.append(v)
            vals.append(c)
    counts = sparse.csr_matrix(
        (np.asarray(vals, dtype=np.int64), (rows, cols)), shape=(n_docs, vocab.size))

    brand_truth = None
    stats_path = os.path.join(bundle_dir, "brand_stats.tsv")
    if os.path.exists(stats_path):
        brand_truth = np.zeros(len(brand_names))
        seen = np.zeros(len(brand_names), dtype=bool)
        with open(stats_path) as handle:
            handle.readline()
            for line in handle:
                b, _n_train, _n_test, score = line.rstrip("\n").split("\t")
                brand_truth[int(b)] = float(score)
                seen[int(b)] = True
        if not seen.all():
            raise ValidationError("brand_stats.tsv does not cover every brand")

    corpus = Corpus(counts=counts, brand_ids=np.asarray(brand_ids),
                    labels=np.asarray(labels), is_test=np.asarray(is_test),
                    brand_names=brand_names, brand_truth=brand_truth)
    corpus.validate()
    return corpus, vocab


def read_reviews(path: str) -> tuple[list[RawReview], list[tuple[int, str]]]:
    """Read raw reviews; returns (reviews, per-line errors as (lineno, message))."""
    ext = os.path.splitext(path)[1].lower()
    if ext in (".jsonl", ".json", ".ndjson"):
        return _read_jsonl(path)
    if ext in (".tsv", ".txt"):
        return _read_tsv(path)
    raise ValidationError(f"cannot detect review format from extension {ext!r} "
                          "(expected .jsonl or .tsv)")


def _coerce_review(text, rating, brand, lineno, errors) -> RawReview | None:
    try:
        rating = int(rating)
    except (TypeError, ValueError):
        errors.append((lineno, f"rating {rating!r} is not an integer"))
        return None
    if not 1 <= rating <= 5:
        errors.append((lineno, f"rating {rating} outside 1..5"))
        return None
    if not isinstance(text, str) or not isinstance(brand, str) or not brand:
        errors.append((lineno, "text/brand missing or empty"))
        return None
    return RawReview(text=text, rating=rating, brand=brand)


def _read_jsonl(path: str):
    reviews, errors = [], []
    with open(path) as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                errors.append((lineno, f"invalid JSON: {exc}"))
                continue
            review = _coerce_review(record.get("text"), record.get("rating"),
                                    record.get("brand"), lineno, errors)
            if review is not None:
                reviews.append(review)
    return reviews, errors


def _read_tsv(path: str):
    reviews, errors = [], []
    with open(path) as handle:
        header = handle.readline().rstrip("\n").split("\t")
        try:
            cols = {name: header.index(name) for name in ("text", "rating", "brand")}
        except ValueError:
            raise ValidationError(
                f"TSV header must name text, rating and brand columns, got {header}")
        for lineno, line in enumerate(handle, start=2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) < len(header):
                errors.append((lineno, f"expected {len(header)} fields, got {len(parts)}"))
                continue
            review = _coerce_review(parts[cols["text"]], parts[cols["rating"]],
                                    parts[cols["brand"]], lineno, errors)
            if review is not None:
                reviews.append(review)
    return reviews, errors
