"""Multilabel text corpora: loading, TF-IDF featurization, synthetic power-law
generation, label frequencies and frequency bins.

Corpus files hold one document per line::

    0,2<TAB>the cat sat on the mat

An optional header line ``# num_labels=L`` fixes the label-space size;
otherwise it is ``max label id + 1``.
"""

from __future__ import annotations

import configparser
import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class CorpusFormatError(ValueError):
    """Raised for malformed corpus files; carries the 1-based line number."""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


def tokenize(text: str) -> tuple[str, ...]:
    return tuple(text.lower().split())


@dataclass(frozen=True)
class Document:
    tokens: tuple[str, ...]
    labels: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "labels", frozenset(int(l) for l in self.labels))
        if not self.tokens:
            raise ValueError("document has no tokens")
        if any(l < 0 for l in self.labels):
            raise ValueError("negative label id")

    def __len__(self):
        return len(self.tokens)

    def with_tokens(self, tokens: Sequence[str]) -> "Document":
        return Document(tuple(tokens), self.labels)


@dataclass(frozen=True)
class Dataset:
    documents: tuple[Document, ...]
    num_labels: int
    vocab: dict[str, int] = field(hash=False)

    def __post_init__(self):
        object.__setattr__(self, "documents", tuple(self.documents))
        if self.num_labels < 1:
            raise ValueError("num_labels must be >= 1")
        for i, doc in enumerate(self.documents):
            if doc.labels and max(doc.labels) >= self.num_labels:
                raise ValueError(f"document {i} has label id >= {self.num_labels}")
        if sorted(self.vocab.values()) != list(range(len(self.vocab))):
            raise ValueError("vocab ids must be dense in [0, V)")

    def __len__(self):
        return len(self.documents)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def label_matrix(self) -> sp.csr_matrix:
        """One-hot N x L label matrix."""
        rows, cols = [], []
        for i, doc in enumerate(self.documents):
            for l in sorted(doc.labels):
                rows.append(i)
                cols.append(l)
        data = np.ones(len(rows), dtype=np.float64)
        return sp.csr_matrix((data, (rows, cols)), shape=(len(self.documents), self.num_labels))

    def subset(self, ids: Iterable[int]) -> "Dataset":
        return Dataset(tuple(self.documents[i] for i in ids), self.num_labels, self.vocab)


def build_vocab(documents: Iterable[Document]) -> dict[str, int]:
    """Dense token ids in first-seen order."""
    vocab: dict[str, int] = {}
    for doc in documents:
        for tok in doc.tokens:
            if tok not in vocab:
                vocab[tok] = len(vocab)
    return vocab


def parse_corpus(lines: Iterable[str], num_labels: int | None = None):
    """Parse corpus lines into (documents, declared num_labels or None)."""
    docs = []
    declared = num_labels
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            if key.strip() == "num_labels":
                try:
                    declared = int(value)
                except ValueError:
                    raise CorpusFormatError(f"bad num_labels header {value!r}", lineno) from None
            continue
        if "\t" not in line:
            raise CorpusFormatError("expected '<labels>TAB<tokens>'", lineno)
        label_field, text = line.split("\t", 1)
        if not label_field.strip():
            raise CorpusFormatError("empty label field", lineno)
        try:
            labels = [int(x) for x in label_field.split(",")]
        except ValueError:
            raise CorpusFormatError(f"non-integer label in {label_field!r}", lineno) from None
        if any(l < 0 for l in labels):
            raise CorpusFormatError("negative label id", lineno)
        if len(set(labels)) != len(labels):
            raise CorpusFormatError("duplicate label id", lineno)
        if declared is not None and max(labels) >= declared:
            raise CorpusFormatError(f"label {max(labels)} >= declared num_labels {declared}", lineno)
        tokens = tokenize(text)
        if not tokens:
            raise CorpusFormatError("document has no tokens", lineno)
        docs.append(Document(tokens, frozenset(labels)))
    return docs, declared


def load_dataset(path, vocab: dict[str, int] | None = None, num_labels: int | None = None) -> Dataset:
    """Load a text corpus.

    ``vocab`` should be the training vocabulary when loading a held-out file;
    by default the vocabulary is built from the file's own tokens.
    """
    with open(path, encoding="utf-8") as fh:
        docs, declared = parse_corpus(fh, num_labels)
    if not docs:
        raise CorpusFormatError(f"no documents in {path}")
    if declared is None:
        declared = max(max(d.labels) for d in docs) + 1
    return Dataset(tuple(docs), declared, build_vocab(docs) if vocab is None else vocab)


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# num_labels={dataset.num_labels}\n")
        for doc in dataset.documents:
            labels = ",".join(str(l) for l in sorted(doc.labels))
            fh.write(f"{labels}\t{' '.join(doc.tokens)}\n")


def train_test_split(dataset: Dataset, test_fraction: float, seed: int):
    """Random split; the test part keeps the training vocabulary."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(dataset))
    n_test = int(round(test_fraction * len(dataset)))
    test_ids = np.sort(perm[:n_test])
    train_ids = np.sort(perm[n_test:])
    train_docs = tuple(dataset.documents[i] for i in train_ids)
    train = Dataset(train_docs, dataset.num_labels, build_vocab(train_docs))
    test = Dataset(tuple(dataset.documents[i] for i in test_ids), dataset.num_labels, train.vocab)
    return train, test


# --------------------------------------------------------------------------
# TF-IDF
# --------------------------------------------------------------------------


class TfidfVectorizer:
    """Smoothed-idf TF-IDF with L2-normalized rows.

    tf is the raw count over document length, idf = ln((1 + N) / (1 + df)) + 1.
    Tokens outside the vocabulary (including the attack MASK token) contribute
    nothing.
    """

    def __init__(self, vocab: dict[str, int], idf: np.ndarray):
        idf = np.asarray(idf, dtype=np.float64)
        if idf.shape != (len(vocab),):
            raise ValueError("idf length must match vocab size")
        self.vocab = vocab
        self.idf = idf

    @classmethod
    def fit(cls, dataset: Dataset) -> "TfidfVectorizer":
        df = np.zeros(dataset.vocab_size, dtype=np.int64)
        for doc in dataset.documents:
            ids = {dataset.vocab[t] for t in doc.tokens if t in dataset.vocab}
            df[list(ids)] += 1
        n = len(dataset)
        idf = np.log((1.0 + n) / (1.0 + df)) + 1.0
        return cls(dataset.vocab, idf)

    @property
    def size(self) -> int:
        return len(self.vocab)

    def transform_one(self, tokens: Sequence[str]):
        """Sparse TF-IDF of one token sequence as (sorted indices, values)."""
        counts = Counter(self.vocab[t] for t in tokens if t in self.vocab)
        if not counts:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float64)
        idx = np.array(sorted(counts), dtype=np.int64)
        tf = np.array([counts[i] for i in idx], dtype=np.float64) / len(tokens)
        vals = tf * self.idf[idx]
        return idx, vals / np.sqrt(np.dot(vals, vals))

    def transform(self, docs: Iterable[Document | Sequence[str]]) -> sp.csr_matrix:
        indptr, indices, data = [0], [], []
        for doc in docs:
            tokens = doc.tokens if isinstance(doc, Document) else doc
            idx, vals = self.transform_one(tokens)
            indices.append(idx)
            data.append(vals)
            indptr.append(indptr[-1] + len(idx))
        n_rows = len(indptr) - 1
        mat = sp.csr_matrix(
            (
                np.concatenate(data) if data else np.zeros(0),
                np.concatenate(indices) if indices else np.zeros(0, dtype=np.int64),
                np.array(indptr, dtype=np.int64),
            ),
            shape=(n_rows, self.size),
        )
        mat.has_sorted_indices = True
        return mat

    def digest(self) -> str:
        """Stable hash of vocab order and idf values."""
        h = hashlib.sha256()
        for tok in sorted(self.vocab, key=self.vocab.__getitem__):
            h.update(tok.encode("utf-8") + b"\0")
        h.update(np.ascontiguousarray(self.idf, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def tfidf_featurize(dataset: Dataset) -> sp.csr_matrix:
    return TfidfVectorizer.fit(dataset).transform(dataset.documents)


# --------------------------------------------------------------------------
# Label statistics
# --------------------------------------------------------------------------


def label_frequencies(dataset: Dataset) -> np.ndarray:
    n = np.zeros(dataset.num_labels, dtype=np.int64)
    for doc in dataset.documents:
        for l in doc.labels:
            n[l] += 1
    return n


@dataclass(frozen=True)
class FrequencyBins:
    ranges: tuple[tuple[int, int], ...]
    members: tuple[tuple[int, ...], ...]

    def __len__(self):
        return len(self.ranges)

    def bin_of(self, label: int) -> int | None:
        for b, m in enumerate(self.members):
            if label in m:
                return b
        return None

    def label_to_bin(self) -> dict[int, int]:
        return {l: b for b, m in enumerate(self.members) for l in m}

    def midpoints(self) -> list[float]:
        return [(lo + hi) / 2.0 for lo, hi in self.ranges]


def make_frequency_bins(freqs, qualifying, min_labels: int) -> FrequencyBins:
    """Group consecutive label frequencies into bins.

    Frequencies are scanned in ascending order and merged until the bin holds
    at least ``min_labels`` qualifying labels; a short trailing remainder is
    folded into the last bin. Labels with zero frequency are not binned.
    """
    if min_labels < 1:
        raise ValueError("min_labels must be >= 1")
    freqs = np.asarray(freqs)
    qualifying = np.asarray(qualifying, dtype=bool)
    seen = freqs > 0
    if not np.any(qualifying & seen):
        raise ValueError("no qualifying labels")

    ranges: list[list[int]] = []
    members: list[list[int]] = []
    cur_vals: list[int] = []
    cur_members: list[int] = []
    cur_q = 0
    for f in np.unique(freqs[seen]):
        ids = np.flatnonzero(freqs == f)
        cur_vals.append(int(f))
        cur_members.extend(int(i) for i in ids)
        cur_q += int(np.count_nonzero(qualifying[ids]))
        if cur_q >= min_labels:
            ranges.append([cur_vals[0], cur_vals[-1]])
            members.append(cur_members)
            cur_vals, cur_members, cur_q = [], [], 0
    if cur_vals:
        if ranges:
            ranges[-1][1] = cur_vals[-1]
            members[-1].extend(cur_members)
        else:
            ranges.append([cur_vals[0], cur_vals[-1]])
            members.append(cur_members)
    return FrequencyBins(
        tuple((lo, hi) for lo, hi in ranges),
        tuple(tuple(sorted(m)) for m in members),
    )


# --------------------------------------------------------------------------
# Synthetic power-law corpora
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GenConfig:
    n_docs: int = 2000
    n_labels: int = 200
    vocab_size: int = 3000
    zipf_s: float = 1.2
    labels_per_doc: float = 3.0
    doc_length: float = 50.0
    signal_tokens: int = 4       # dedicated tokens per label
    signal_rate: float = 3.0     # extra signal occurrences per (doc, label), Poisson mean
    topic_size: int = 5          # labels per latent topic
    topic_tokens: int = 4        # shared tokens per topic
    topic_affinity: float = 0.6  # chance an extra label is drawn from the first label's topic
    background_s: float = 1.0    # Zipf exponent of background words
    test_fraction: float = 0.25

    def __post_init__(self):
        for name in ("n_docs", "n_labels", "vocab_size", "signal_tokens", "topic_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.zipf_s > 0:
            raise ValueError("zipf_s must be > 0")
        if self.labels_per_doc < 1 or self.labels_per_doc >= self.n_labels:
            raise ValueError("labels_per_doc must be in [1, n_labels)")
        if self.doc_length < 1:
            raise ValueError("doc_length must be >= 1")
        if self.n_background < 10:
            raise ValueError("vocab_size too small for the signal/topic token layout")

    @property
    def n_topics(self) -> int:
        return math.ceil(self.n_labels / self.topic_size)

    @property
    def n_background(self) -> int:
        return (
            self.vocab_size
            - self.n_labels * self.signal_tokens
            - self.n_topics * self.topic_tokens
        )


def load_gen_config(path, section: str = "gen-data") -> GenConfig:
    """Read a ``key = value`` config file into a GenConfig; unknown keys fail."""
    parser = configparser.ConfigParser()
    text = Path(path).read_text(encoding="utf-8")
    if not text.lstrip().startswith("["):
        text = f"[{section}]\n" + text
    parser.read_string(text)
    return gen_config_from_mapping(dict(parser[section]) if parser.has_section(section) else {})


def gen_config_from_mapping(values: dict) -> GenConfig:
    types = {f.name: f.type for f in fields(GenConfig)}
    kwargs = {}
    for key, value in values.items():
        if key not in types:
            raise KeyError(f"unknown generator key {key!r}")
        kwargs[key] = int(value) if types[key] == "int" else float(value)
    return GenConfig(**kwargs)


@dataclass(frozen=True)
class _Layout:
    topic_of: np.ndarray          # label -> topic
    topic_labels: tuple           # topic -> label ids
    signal: np.ndarray            # label x signal_tokens -> word index
    topic_words: np.ndarray       # topic x topic_tokens -> word index
    background: np.ndarray        # background word indices
    names: tuple                  # word index -> string


def _layout(cfg: GenConfig, rng: np.random.Generator) -> _Layout:
    perm = rng.permutation(cfg.n_labels)
    topic_of = np.empty(cfg.n_labels, dtype=np.int64)
    topic_of[perm] = np.arange(cfg.n_labels) // cfg.topic_size
    topic_labels = tuple(
        tuple(int(l) for l in np.flatnonzero(topic_of == t)) for t in range(cfg.n_topics)
    )
    n_sig = cfg.n_labels * cfg.signal_tokens
    n_top = cfg.n_topics * cfg.topic_tokens
    signal = np.arange(n_sig).reshape(cfg.n_labels, cfg.signal_tokens)
    topic_words = n_sig + np.arange(n_top).reshape(cfg.n_topics, cfg.topic_tokens)
    background = np.arange(n_sig + n_top, cfg.vocab_size)
    order = rng.permutation(cfg.vocab_size)
    names = tuple(f"w{int(order[i]):05d}" for i in range(cfg.vocab_size))
    return _Layout(topic_of, topic_labels, signal, topic_words, background, names)


def _popularity(n: int, s: float) -> np.ndarray:
    p = np.arange(1, n + 1, dtype=np.float64) ** -s
    return p / p.sum()


def _draw_weighted(rng, candidates: np.ndarray, weights: np.ndarray, exclude: set):
    mask = np.array([c not in exclude for c in candidates])
    if not mask.any():
        return None
    w = weights[mask]
    return int(rng.choice(candidates[mask], p=w / w.sum()))


def generate_powerlaw_dataset(cfg: GenConfig, seed: int) -> Dataset:
    """Synthetic multilabel corpus with power-law label popularity.

    Label ``j`` has popularity proportional to ``(j + 1) ** -zipf_s``. Labels
    are grouped into latent topics; extra labels of a document tend to come
    from the topic of its first label. Every label owns ``signal_tokens``
    dedicated words and every topic owns ``topic_tokens`` shared words, so a
    linear TF-IDF classifier can learn the task. The remainder of each
    document is Zipf-distributed background noise.
    """
    rng = np.random.default_rng(seed)
    lay = _layout(cfg, rng)
    label_p = _popularity(cfg.n_labels, cfg.zipf_s)
    bg_p = _popularity(len(lay.background), cfg.background_s)
    all_labels = np.arange(cfg.n_labels)

    docs = []
    for _ in range(cfg.n_docs):
        m = min(1 + int(rng.poisson(cfg.labels_per_doc - 1.0)), cfg.n_labels)
        first = int(rng.choice(cfg.n_labels, p=label_p))
        chosen = [first]
        topic = np.array(lay.topic_labels[lay.topic_of[first]])
        while len(chosen) < m:
            pick = None
            if rng.random() < cfg.topic_affinity:
                pick = _draw_weighted(rng, topic, label_p[topic], set(chosen))
            if pick is None:
                pick = _draw_weighted(rng, all_labels, label_p, set(chosen))
            chosen.append(pick)

        words: list[int] = []
        for l in chosen:
            c = 1 + int(rng.poisson(cfg.signal_rate))
            words.extend(int(w) for w in rng.choice(lay.signal[l], size=c))
        for t in sorted({int(lay.topic_of[l]) for l in chosen}):
            c = 1 + int(rng.poisson(0.5))
            words.extend(int(w) for w in rng.choice(lay.topic_words[t], size=c))
        length = max(len(words) + 1, int(rng.poisson(cfg.doc_length)))
        n_bg = length - len(words)
        words.extend(int(w) for w in rng.choice(lay.background, size=n_bg, p=bg_p))
        rng.shuffle(words)
        docs.append(Document(tuple(lay.names[w] for w in words), frozenset(chosen)))

    return Dataset(tuple(docs), cfg.n_labels, build_vocab(docs))


def synthetic_embeddings(cfg: GenConfig, seed: int, dim: int = 32) -> dict[str, np.ndarray]:
    """Word vectors consistent with the generator's latent structure.

    Signal words sit near their label's centroid, which sits near its topic's
    centroid; topic words sit near the topic centroid; background words are
    isotropic. Uses the same layout as ``generate_powerlaw_dataset`` for the
    same ``(cfg, seed)``.
    """
    lay = _layout(cfg, np.random.default_rng(seed))
    rng = np.random.default_rng([seed, 1])
    topic_c = rng.normal(size=(cfg.n_topics, dim))
    label_c = topic_c[lay.topic_of] + 0.8 * rng.normal(size=(cfg.n_labels, dim))
    vecs = np.empty((cfg.vocab_size, dim))
    vecs[lay.signal.ravel()] = np.repeat(label_c, cfg.signal_tokens, axis=0) + 0.5 * rng.normal(
        size=(lay.signal.size, dim)
    )
    vecs[lay.topic_words.ravel()] = np.repeat(topic_c, cfg.topic_tokens, axis=0) + 0.5 * rng.normal(
        size=(lay.topic_words.size, dim)
    )
    vecs[lay.background] = 1.2 * rng.normal(size=(len(lay.background), dim))
    return {lay.names[i]: vecs[i] for i in range(cfg.vocab_size)}


def load_embeddings(path) -> dict[str, np.ndarray]:
    """Whitespace-separated ``word v1 v2 ...`` lines (GloVe text layout)."""
    table = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                table[parts[0]] = np.array([float(x) for x in parts[1:]])
            except ValueError:
                raise CorpusFormatError("bad embedding value", lineno) from None
    return table


def save_embeddings(table: dict[str, np.ndarray], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for word in sorted(table):
            fh.write(word + " " + " ".join(repr(float(v)) for v in table[word]) + "\n")


def rank_frequency_slope(counts) -> float:
    """Least-squares slope of log(count) vs log(rank) over nonzero counts."""
    c = np.sort(np.asarray(counts, dtype=np.float64))[::-1]
    c = c[c > 0]
    ranks = np.arange(1, len(c) + 1, dtype=np.float64)
    slope, _ = np.polyfit(np.log(ranks), np.log(c), 1)
    return float(slope)
