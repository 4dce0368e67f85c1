"""Black-box word-substitution attacks on multilabel score oracles.

An oracle is any callable mapping a token sequence to a length-L score
vector. A candidate provider maps ``(tokens, position, max_candidates)`` to
replacement words for that position.

The engine masks each word once on the clean document to rank positions by
importance, then walks the ranking a single time. At every position it asks
the provider for candidates and keeps the one that moves the frozen target
set furthest towards the goal, skipping the position if no candidate helps.
It stops as soon as the goal holds or the change budget ``ceil(theta * n)``
is spent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .dataset import Document
from .victim import top_k

MASK = "[MASK]"

NON_TARGETED = "non-targeted"
POSITIVE = "positive-targeted"
NEGATIVE = "negative-targeted"
GOAL_KINDS = (NON_TARGETED, POSITIVE, NEGATIVE)

Oracle = Callable[[Sequence[str]], np.ndarray]


class AttackError(RuntimeError):
    """Engine-side failure (bad precondition, provider or oracle fault)."""


class PreconditionError(AttackError, ValueError):
    pass


class CandidateProvider(Protocol):
    def __call__(self, tokens: Sequence[str], position: int, max_candidates: int) -> list[str]: ...


@dataclass(frozen=True)
class AttackGoal:
    kind: str
    k: int = 5
    targets: frozenset[int] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "targets", frozenset(int(t) for t in self.targets))
        if self.kind not in GOAL_KINDS:
            raise ValueError(f"goal kind must be one of {GOAL_KINDS}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.kind == NON_TARGETED and self.targets:
            raise ValueError("non-targeted goals take no targets")
        if self.kind != NON_TARGETED and not self.targets:
            raise ValueError("targeted goals need at least one target")

    @classmethod
    def non_targeted(cls, k=5):
        return cls(NON_TARGETED, k)

    @classmethod
    def positive(cls, targets, k=5):
        return cls(POSITIVE, k, frozenset(targets))

    @classmethod
    def negative(cls, targets, k=5):
        return cls(NEGATIVE, k, frozenset(targets))

    def check_labels(self, labels):
        """Validate targets against a document's true label set."""
        if self.kind == POSITIVE and not self.targets <= set(labels):
            raise PreconditionError("positive targets must be true labels of the document")
        if self.kind == NEGATIVE and self.targets & set(labels):
            raise PreconditionError("negative targets must not be true labels of the document")


@dataclass(frozen=True)
class FrozenGoal:
    """A goal bound to the clean document's prediction.

    ``gamma`` is the label set the objective sums over; ``sign`` is +1 when
    the attack pushes those scores down and -1 when it pushes them up.
    ``protected`` holds the correctly predicted true labels a non-targeted
    attack tries to knock out.
    """

    goal: AttackGoal
    gamma: tuple[int, ...]
    sign: float
    clean_topk: tuple[int, ...]
    protected: tuple[int, ...] = ()

    def objective(self, before, after) -> float:
        """Progress towards the goal going from scores ``before`` to ``after``."""
        g = list(self.gamma)
        return float(self.sign * (np.sum(before[g]) - np.sum(after[g])))

    def reached_by(self, scores) -> bool:
        pred = set(top_k(scores, self.goal.k))
        kind = self.goal.kind
        if kind == POSITIVE:
            return not (set(self.gamma) & pred)
        if kind == NEGATIVE:
            return set(self.gamma) <= pred
        return any(l not in pred for l in self.protected)


def freeze_goal(goal: AttackGoal, doc: Document, clean_scores) -> FrozenGoal:
    pred = top_k(clean_scores, goal.k)
    goal.check_labels(doc.labels)
    if goal.kind == POSITIVE:
        gamma = tuple(sorted(goal.targets & set(pred)))
        if not gamma:
            raise PreconditionError("target not currently predicted")
        return FrozenGoal(goal, gamma, 1.0, pred)
    if goal.kind == NEGATIVE:
        gamma = tuple(sorted(goal.targets - set(pred)))
        if not gamma:
            raise PreconditionError("goal already satisfied")
        return FrozenGoal(goal, gamma, -1.0, pred)
    protected = tuple(sorted(set(pred) & doc.labels))
    if not protected:
        raise PreconditionError("no correctly predicted label to attack")
    return FrozenGoal(goal, tuple(sorted(pred)), 1.0, pred, protected)


# --------------------------------------------------------------------------
# Importance
# --------------------------------------------------------------------------


def mask_word(doc: Document, i: int) -> Document:
    if not 0 <= i < len(doc):
        raise IndexError(f"position {i} out of range for length {len(doc)}")
    tokens = list(doc.tokens)
    tokens[i] = MASK
    return doc.with_tokens(tokens)


def _importances(oracle: Oracle, doc: Document, frozen: FrozenGoal, clean_scores) -> np.ndarray:
    out = np.empty(len(doc))
    for i in range(len(doc)):
        masked = oracle(mask_word(doc, i).tokens)
        out[i] = frozen.objective(clean_scores, masked)
    return out


def importance_non_targeted(oracle: Oracle, doc: Document, k: int) -> np.ndarray:
    """Summed score drop of the clean top-k labels when each word is masked."""
    clean = oracle(doc.tokens)
    pred = top_k(clean, k)
    frozen = FrozenGoal(AttackGoal.non_targeted(k), tuple(sorted(pred)), 1.0, pred)
    return _importances(oracle, doc, frozen, clean)


def importance_positive(oracle: Oracle, doc: Document, goal: AttackGoal) -> np.ndarray:
    if goal.kind != POSITIVE:
        raise ValueError("expected a positive-targeted goal")
    clean = oracle(doc.tokens)
    return _importances(oracle, doc, freeze_goal(goal, doc, clean), clean)


def importance_negative(oracle: Oracle, doc: Document, goal: AttackGoal) -> np.ndarray:
    if goal.kind != NEGATIVE:
        raise ValueError("expected a negative-targeted goal")
    clean = oracle(doc.tokens)
    return _importances(oracle, doc, freeze_goal(goal, doc, clean), clean)


def rank_positions(importances) -> list[int]:
    """Positions by descending importance, ties by position; non-finite dropped."""
    imp = np.asarray(importances, dtype=np.float64)
    pos = np.arange(len(imp))
    order = np.lexsort((pos, -imp))
    return [int(i) for i in order if np.isfinite(imp[i])]


# --------------------------------------------------------------------------
# Substitution
# --------------------------------------------------------------------------


def _evaluate(oracle, tokens, position, candidates, frozen, current_scores):
    """Best (index, delta, scores) over candidates, first index wins ties."""
    best = None
    for j, word in enumerate(candidates):
        trial = list(tokens)
        trial[position] = word
        scores = oracle(trial)
        delta = frozen.objective(current_scores, scores)
        if best is None or delta > best[1]:
            best = (j, delta, scores)
    return best


def best_substitution(
    oracle: Oracle,
    doc_t: Document,
    position: int,
    candidates: Sequence[str],
    frozen: FrozenGoal,
    current_scores=None,
):
    """Candidate maximizing progress on the frozen target set.

    Returns ``(word, delta)`` or None when no candidate makes positive
    progress. ``current_scores`` avoids re-querying g(doc_t) if known.
    """
    if not candidates:
        raise ValueError("no candidates")
    if current_scores is None:
        current_scores = oracle(doc_t.tokens)
    j, delta, _ = _evaluate(oracle, doc_t.tokens, position, candidates, frozen, current_scores)
    if delta <= 0:
        return None
    return candidates[j], delta


def goal_reached(oracle: Oracle, doc: Document, frozen: FrozenGoal) -> bool:
    return frozen.reached_by(oracle(doc.tokens))


# --------------------------------------------------------------------------
# Full attack
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AttackConfig:
    theta: float = 0.10
    max_candidates: int = 50
    similarity_floor: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must be in (0, 1]")
        if self.max_candidates < 0:
            raise ValueError("max_candidates must be >= 0")

    def budget(self, n: int) -> int:
        # round() guards against 0.1 * 50 = 5.000000000000001
        return math.ceil(round(self.theta * n, 9))


@dataclass(frozen=True)
class Step:
    position: int
    old: str
    new: str
    delta: float


@dataclass
class AttackOutcome:
    success: bool
    original: Document
    adversarial: Document
    steps: list[Step]
    queries: int
    gamma: tuple[int, ...]
    visited: list[int] = field(default_factory=list)
    candidate_counts: list[int] = field(default_factory=list)
    similarity: float | None = None

    @property
    def change_rate(self) -> float:
        return len(self.steps) / len(self.original)

    def expected_queries(self) -> int:
        """1 clean call, n masked calls, one call per evaluated candidate."""
        return 1 + len(self.original) + sum(self.candidate_counts)


def replay(doc: Document, steps: Sequence[Step]) -> Document:
    tokens = list(doc.tokens)
    for s in steps:
        if tokens[s.position] != s.old:
            raise ValueError(f"step at {s.position} expects {s.old!r}, found {tokens[s.position]!r}")
        tokens[s.position] = s.new
    return doc.with_tokens(tokens)


def _clean_candidates(raw, original: str, limit: int) -> list[str]:
    out, seen = [], set()
    for w in raw:
        if w == original or w == MASK or w in seen:
            continue
        seen.add(w)
        out.append(w)
        if len(out) == limit:
            break
    return out


def run_attack(
    oracle: Oracle,
    provider: CandidateProvider,
    doc: Document,
    goal: AttackGoal,
    cfg: AttackConfig = AttackConfig(),
) -> AttackOutcome:
    calls = 0

    def g(tokens):
        nonlocal calls
        calls += 1
        return np.asarray(oracle(tokens), dtype=np.float64)

    clean = g(doc.tokens)
    frozen = freeze_goal(goal, doc, clean)
    ranking = rank_positions(_importances(g, doc, frozen, clean))

    budget = cfg.budget(len(doc))
    tokens = list(doc.tokens)
    current = clean
    steps: list[Step] = []
    visited: list[int] = []
    counts: list[int] = []
    success = False
    for pos in ranking:
        if len(steps) >= budget:
            break
        visited.append(pos)
        cands = _clean_candidates(provider(tuple(tokens), pos, cfg.max_candidates), tokens[pos], cfg.max_candidates)
        counts.append(len(cands))
        if not cands:
            continue
        j, delta, scores = _evaluate(g, tokens, pos, cands, frozen, current)
        if delta <= 0:
            continue
        steps.append(Step(pos, tokens[pos], cands[j], delta))
        tokens[pos] = cands[j]
        current = scores
        if frozen.reached_by(current):
            success = True
            break

    return AttackOutcome(
        success=success,
        original=doc,
        adversarial=doc.with_tokens(tokens),
        steps=steps,
        queries=calls,
        gamma=frozen.gamma,
        visited=visited,
        candidate_counts=counts,
    )


# --------------------------------------------------------------------------
# Built-in provider
# --------------------------------------------------------------------------


class EmbeddingKnnProvider:
    """Nearest words by cosine in an embedding table.

    Ties are broken by lexicographic word order; unknown words get no
    candidates.
    """

    def __init__(self, embeddings: dict[str, np.ndarray], M: int = 50):
        if not embeddings:
            raise ValueError("embedding table is empty")
        self.M = M
        self.words = sorted(embeddings)
        self.index = {w: i for i, w in enumerate(self.words)}
        E = np.array([embeddings[w] for w in self.words], dtype=np.float64)
        norms = np.linalg.norm(E, axis=1, keepdims=True)
        self.unit = E / np.where(norms == 0, 1.0, norms)
        self._cache: dict[tuple[str, int], list[str]] = {}

    def neighbours(self, word: str, m: int) -> list[str]:
        if m <= 0 or word not in self.index:
            return []
        key = (word, m)
        if key not in self._cache:
            i = self.index[word]
            sims = self.unit @ self.unit[i]
            # words are sorted, so position order is lexicographic order
            order = np.lexsort((np.arange(len(self.words)), -sims))
            self._cache[key] = [self.words[j] for j in order if j != i][:m]
        return self._cache[key]

    def __call__(self, tokens, position, max_candidates=None):
        m = self.M if max_candidates is None else min(self.M, max_candidates)
        return list(self.neighbours(tokens[position], m))


def embedding_knn_provider(embeddings, M: int = 50) -> EmbeddingKnnProvider:
    return EmbeddingKnnProvider(embeddings, M)
