"""Victim classifier: a sparse linear multilabel model over TF-IDF features,
its score oracle, top-k prediction, and the plain / PW / PW-cb losses.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .dataset import Dataset, Document, TfidfVectorizer, label_frequencies

log = logging.getLogger(__name__)

BASE_LOSSES = ("bce", "squared-hinge")
MODES = ("plain", "PW", "PW-cb")


class TrainingDiverged(RuntimeError):
    pass


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# --------------------------------------------------------------------------
# Prediction
# --------------------------------------------------------------------------


def top_k(scores, k: int) -> tuple[int, ...]:
    """Indices of the k largest scores, best first; ties go to the lower id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.asarray(scores)
    order = np.lexsort((np.arange(len(scores)), -scores))
    return tuple(int(i) for i in order[:k])


@dataclass
class LinearMultilabelModel:
    weights: np.ndarray            # L x V
    bias: np.ndarray               # L
    vectorizer: TfidfVectorizer
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError("weights must be L x V and bias length L")
        if self.weights.shape[1] != self.vectorizer.size:
            raise ValueError(
                f"model has {self.weights.shape[1]} features but vocab has {self.vectorizer.size}"
            )

    @property
    def num_labels(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def zeros(cls, num_labels: int, vectorizer: TfidfVectorizer, **meta):
        return cls(np.zeros((num_labels, vectorizer.size)), np.zeros(num_labels), vectorizer, meta)

    def decision(self, tokens: Sequence[str]) -> np.ndarray:
        idx, vals = self.vectorizer.transform_one(tokens)
        return self.weights[:, idx] @ vals + self.bias

    def decision_matrix(self, X) -> np.ndarray:
        return np.asarray(X @ self.weights.T) + self.bias


def score(model: LinearMultilabelModel, doc: Document | Sequence[str]) -> np.ndarray:
    """g(doc): per-label sigmoid probabilities."""
    tokens = doc.tokens if isinstance(doc, Document) else doc
    return sigmoid(model.decision(tokens))


class ModelOracle:
    """Black-box score oracle around a linear model; counts queries."""

    concurrency_safe = True

    def __init__(self, model: LinearMultilabelModel):
        self.model = model
        self.calls = 0

    @property
    def num_labels(self):
        return self.model.num_labels

    def __call__(self, tokens: Sequence[str]) -> np.ndarray:
        self.calls += 1
        return score(self.model, tokens)


# --------------------------------------------------------------------------
# Loss weights
# --------------------------------------------------------------------------


def class_balance_weight(n_j: int, beta: float = 0.9) -> float:
    """Effective-number weight (1 - beta) / (1 - beta**n_j)."""
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must be in (0, 1)")
    if n_j < 1:
        raise ValueError("class-balance weight undefined for n_j < 1")
    return (1.0 - beta) / (1.0 - beta ** n_j)


@dataclass(frozen=True)
class PropensityParams:
    A: float = 0.55
    B: float = 1.5
    N: int = 1

    def __post_init__(self):
        if not self.A > 0 or self.B < 0 or self.N < 1:
            raise ValueError("need A > 0, B >= 0, N >= 1")


def propensity(n_j, params: PropensityParams):
    """Empirical propensity p = 1 / (1 + C (n_j + B)^-A), C = (ln N - 1)(B + 1)^A.

    C is clamped at 0 for N <= e so that p stays in (0, 1].
    """
    c = max(math.log(params.N) - 1.0, 0.0) * (params.B + 1.0) ** params.A
    n = np.asarray(n_j, dtype=np.float64)
    p = 1.0 / (1.0 + c * np.exp(-params.A * np.log(n + params.B)))
    return float(p) if p.ndim == 0 else p


def missing_label_weight(p) -> float:
    """W = 2 / p - 1."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0) or np.any(p > 1):
        raise ValueError("propensity must be in (0, 1]")
    w = 2.0 / p - 1.0
    return float(w) if w.ndim == 0 else w


@dataclass(frozen=True)
class LossSpec:
    base: str = "bce"
    mode: str = "plain"
    beta: float = 0.9
    A: float = 0.55
    B: float = 1.5

    def __post_init__(self):
        if self.base not in BASE_LOSSES:
            raise ValueError(f"base loss must be one of {BASE_LOSSES}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must be in (0, 1)")


def loss_weights(spec: LossSpec, freqs, n_train: int):
    """Per-label (C, W) vectors. Unseen labels get 1.0; they never carry a positive term."""
    freqs = np.asarray(freqs)
    C = np.ones(len(freqs))
    W = np.ones(len(freqs))
    seen = freqs > 0
    if spec.mode == "PW-cb":
        C[seen] = [class_balance_weight(int(n), spec.beta) for n in freqs[seen]]
    if spec.mode in ("PW", "PW-cb"):
        p = propensity(freqs[seen], PropensityParams(spec.A, spec.B, max(n_train, 1)))
        W[seen] = missing_label_weight(p)
    return C, W


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def _parts(base: str, z):
    """(l+, dl+/dz, l-, dl-/dz) elementwise."""
    if base == "bce":
        s = sigmoid(z)
        return np.logaddexp(0.0, -z), s - 1.0, np.logaddexp(0.0, z), s
    hp = np.maximum(0.0, 1.0 - z)
    hm = np.maximum(0.0, 1.0 + z)
    return hp * hp, -2.0 * hp, hm * hm, 2.0 * hm


def _check_binary(y):
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be binary")
    return y


def base_loss(base: str, y, z) -> float:
    """Unweighted decomposable loss sum_j y_j l+(z_j) + (1 - y_j) l-(z_j)."""
    y = _check_binary(y)
    lp, _, lm, _ = _parts(base, np.asarray(z, dtype=np.float64))
    return float(np.sum(y * lp + (1.0 - y) * lm))


def loss_and_grad(spec: LossSpec, y, z, C=None, W=None):
    """Reweighted loss sum_j C_j W_j y_j l+(z_j) + (1 - y_j) l-(z_j) and its
    gradient with respect to the pre-activation ``z``.

    ``y`` and ``z`` may be a single length-L vector or a batch (B x L); the
    loss is summed over all entries. In plain mode C and W are ignored, in PW
    mode C is ignored.
    """
    y = _check_binary(y)
    z = np.asarray(z, dtype=np.float64)
    if y.shape != z.shape:
        raise ValueError("y and z shapes differ")
    lp, gp, lm, gm = _parts(spec.base, z)
    if spec.mode == "plain":
        pos = y
    else:
        w = np.ones(z.shape[-1]) if W is None else np.asarray(W, dtype=np.float64)
        if spec.mode == "PW-cb":
            w = w * (np.ones(z.shape[-1]) if C is None else np.asarray(C, dtype=np.float64))
        if w.shape != (z.shape[-1],):
            raise ValueError("weight length must equal number of labels")
        pos = w * y
    neg = 1.0 - y
    loss = float(np.sum(pos * lp + neg * lm))
    grad = pos * gp + neg * gm
    return loss, grad


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainOptions:
    learning_rate: float = 2.0
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    l2: float = 0.0


def train(
    dataset: Dataset,
    spec: LossSpec = LossSpec(),
    opt: TrainOptions = TrainOptions(),
    vectorizer: TfidfVectorizer | None = None,
) -> LinearMultilabelModel:
    """Mini-batch SGD on the mean per-document loss.

    Weights start at zero. Per-epoch mean loss is kept in
    ``model.meta["loss_history"]``; the first entry is the loss of the initial
    (zero) model.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    vec = vectorizer or TfidfVectorizer.fit(dataset)
    X = vec.transform(dataset.documents)
    Y = dataset.label_matrix().toarray()
    freqs = label_frequencies(dataset)
    C, Wt = loss_weights(spec, freqs, len(dataset))
    model = LinearMultilabelModel.zeros(
        dataset.num_labels, vec, loss=asdict(spec), train=asdict(opt)
    )
    rng = np.random.default_rng(opt.seed)
    n = len(dataset)

    def epoch_loss():
        total, _ = loss_and_grad(spec, Y, model.decision_matrix(X), C, Wt)
        return total / n

    history = [epoch_loss()]
    Wm, b = model.weights, model.bias
    # overflow during a blow-up surfaces as TrainingDiverged
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(opt.epochs):
            perm = rng.permutation(n)
            for start in range(0, n, opt.batch_size):
                ids = perm[start:start + opt.batch_size]
                Xb = X[ids]
                z = np.asarray(Xb @ Wm.T) + b
                _, g = loss_and_grad(spec, Y[ids], z, C, Wt)
                g /= len(ids)
                Wm -= opt.learning_rate * (np.asarray(Xb.T @ g).T + opt.l2 * Wm)
                b -= opt.learning_rate * g.sum(axis=0)
            cur = epoch_loss()
            if not math.isfinite(cur):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}; lower the learning rate")
            history.append(cur)
            log.debug("epoch %d loss %.6f", epoch + 1, cur)
    model.meta["loss_history"] = history
    return model


def recall_at_k(model: LinearMultilabelModel, dataset: Dataset, k: int = 5) -> np.ndarray:
    """Per-label recall@k on ``dataset``: hits / positives, NaN for absent labels."""
    Z = model.decision_matrix(model.vectorizer.transform(dataset.documents))
    hits = np.zeros(model.num_labels)
    pos = np.zeros(model.num_labels)
    for row, doc in zip(Z, dataset.documents):
        pred = set(top_k(row, k))
        for l in doc.labels:
            pos[l] += 1
            hits[l] += l in pred
    with np.errstate(invalid="ignore", divide="ignore"):
        return hits / pos


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------

_MAGIC = b"ADVXMTC-MODEL 1\n"


def save_model(model: LinearMultilabelModel, path) -> None:
    """Header line (JSON) followed by sparse weight triplets, bias and idf as
    little-endian binary blocks."""
    rows, cols = np.nonzero(model.weights)
    vals = model.weights[rows, cols]
    vocab = sorted(model.vectorizer.vocab, key=model.vectorizer.vocab.__getitem__)
    header = {
        "num_labels": model.num_labels,
        "num_features": model.weights.shape[1],
        "nnz": int(len(vals)),
        "vectorizer": model.vectorizer.digest(),
        "meta": model.meta,
        "vocab": vocab,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr, dt in ((rows, "<i8"), (cols, "<i8"), (vals, "<f8"), (model.bias, "<f8"), (model.vectorizer.idf, "<f8")):
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_model(path) -> LinearMultilabelModel:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a model file")
        (size,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(size).decode("utf-8"))
        L, V, nnz = header["num_labels"], header["num_features"], header["nnz"]

        def block(n, dt):
            data = fh.read(8 * n)
            if len(data) != 8 * n:
                raise ValueError(f"{path} is truncated")
            return np.frombuffer(data, dtype=dt).astype(dt[1:] if dt[0] == "<" else dt)

        rows, cols, vals = block(nnz, "<i8"), block(nnz, "<i8"), block(nnz, "<f8")
        bias, idf = block(L, "<f8"), block(V, "<f8")
    vocab = {tok: i for i, tok in enumerate(header["vocab"])}
    vec = TfidfVectorizer(vocab, idf)
    if vec.digest() != header["vectorizer"]:
        raise ValueError("vectorizer hash mismatch")
    W = np.zeros((L, V))
    W[rows, cols] = vals
    return LinearMultilabelModel(W, bias, vec, header["meta"])
