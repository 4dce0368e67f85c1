"""Balanced hierarchical binary clustering of labels.

Each label is represented by the sum of the TF-IDF rows of the documents it
is attached to. Labels are split recursively by a balanced spherical 2-means
until a further split would leave a child with fewer than ``min_leaf``
labels. The leaves define, for each label, the candidate documents of a
negative-targeted attack: documents carrying another label of the same leaf.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .dataset import Dataset

DEFAULT_ITERATIONS = 25
SEED_SAMPLE = 64


def label_representations(Z, X) -> sp.csr_matrix:
    """Rows z_l^T X: the summed TF-IDF rows of documents positive for l."""
    Z = sp.csr_matrix(Z)
    X = sp.csr_matrix(X)
    if Z.shape[0] != X.shape[0]:
        raise ValueError("Z and X must have the same number of documents")
    R = sp.csr_matrix(Z.T @ X)
    R.sort_indices()
    return R


def _unit_rows(reprs) -> np.ndarray:
    R = reprs.toarray() if sp.issparse(reprs) else np.array(reprs, dtype=np.float64)
    norms = np.linalg.norm(R, axis=1, keepdims=True)
    return R / np.where(norms == 0, 1.0, norms)


def _normalize(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def _split(ids: np.ndarray, U: np.ndarray, rng: np.random.Generator, iterations: int):
    n = len(ids)
    V = U[ids]
    sample = np.sort(rng.choice(n, size=min(n, SEED_SAMPLE), replace=False))
    sims = V[sample] @ V[sample].T
    a, b = np.unravel_index(np.argmin(sims), sims.shape)
    c1, c2 = V[sample[a]], V[sample[b]]
    n_left = (n + 1) // 2
    left = None
    for _ in range(iterations):
        margin = V @ c1 - V @ c2
        # stable on ties: equal margins keep ascending label id
        order = np.lexsort((ids, -margin))
        new_left = np.zeros(n, dtype=bool)
        new_left[order[:n_left]] = True
        if left is not None and np.array_equal(new_left, left):
            break
        left = new_left
        c1 = _normalize(V[left].sum(axis=0))
        c2 = _normalize(V[~left].sum(axis=0))
    return ids[left], ids[~left]


def balanced_2means_split(label_ids, reprs, seed: int = 0, iterations: int = DEFAULT_ITERATIONS):
    """Split labels into two halves whose sizes differ by at most one.

    ``reprs`` holds one row per label id (all labels, not just ``label_ids``).
    Centroids start from the least-similar pair in a seeded sample; each
    round ranks labels by cosine margin between the centroids and gives the
    top half to the first centroid.
    """
    ids = np.asarray(sorted(label_ids), dtype=np.int64)
    if len(ids) < 2:
        raise ValueError("need at least 2 labels to split")
    left, right = _split(ids, _unit_rows(reprs), np.random.default_rng(seed), iterations)
    return tuple(int(i) for i in left), tuple(int(i) for i in right)


@dataclass(frozen=True)
class ClusterNode:
    labels: tuple[int, ...]
    left: "ClusterNode | None" = None
    right: "ClusterNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"type": "leaf", "labels": list(self.labels)}
        return {"type": "split", "left": self.left.to_dict(), "right": self.right.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "ClusterNode":
        if d["type"] == "leaf":
            return cls(tuple(sorted(int(l) for l in d["labels"])))
        left, right = cls.from_dict(d["left"]), cls.from_dict(d["right"])
        return cls(tuple(sorted(left.labels + right.labels)), left, right)


class ClusterTree:
    def __init__(self, root: ClusterNode, min_leaf: int, seed: int):
        self.root = root
        self.min_leaf = min_leaf
        self.seed = seed
        self._leaf_of = {l: leaf for leaf in self.leaves() for l in leaf}

    def leaves(self) -> list[tuple[int, ...]]:
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                out.append(node.labels)
            else:
                stack.extend((node.right, node.left))
        return out

    def internal_nodes(self):
        stack = [self.root]
        while stack:
            node = stack.pop()
            if not node.is_leaf:
                yield node
                stack.extend((node.right, node.left))

    def leaf_of(self, label: int) -> tuple[int, ...]:
        try:
            return self._leaf_of[label]
        except KeyError:
            raise KeyError(f"label {label} is not in the tree") from None

    def to_dict(self) -> dict:
        return {"min_leaf": self.min_leaf, "seed": self.seed, "root": self.root.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "ClusterTree":
        return cls(ClusterNode.from_dict(d["root"]), int(d["min_leaf"]), int(d["seed"]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ClusterTree":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def __eq__(self, other):
        return isinstance(other, ClusterTree) and self.to_dict() == other.to_dict()


def build_cluster_tree(reprs, min_leaf: int = 3, seed: int = 0,
                       iterations: int = DEFAULT_ITERATIONS) -> ClusterTree:
    """Recursive balanced 2-means over all labels (rows of ``reprs``).

    Each node draws its randomness from ``(seed, path)`` so the result does
    not depend on traversal order.
    """
    U = _unit_rows(reprs)
    L = U.shape[0]
    if min_leaf < 1:
        raise ValueError("min_leaf must be >= 1")
    if L < min_leaf:
        raise ValueError(f"{L} labels cannot fill a leaf of {min_leaf}")

    def grow(ids: np.ndarray, path: tuple[int, ...]) -> ClusterNode:
        labels = tuple(int(i) for i in ids)
        if len(ids) // 2 < min_leaf:
            return ClusterNode(labels)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=path))
        left, right = _split(ids, U, rng, iterations)
        return ClusterNode(
            labels,
            grow(np.sort(left), path + (0,)),
            grow(np.sort(right), path + (1,)),
        )

    return ClusterTree(grow(np.arange(L), ()), min_leaf, seed)


def cluster_labels(dataset: Dataset, X=None, min_leaf: int = 3, seed: int = 0) -> ClusterTree:
    """Tree over the dataset's labels from its TF-IDF matrix ``X``."""
    if X is None:
        from .dataset import tfidf_featurize
        X = tfidf_featurize(dataset)
    return build_cluster_tree(label_representations(dataset.label_matrix(), X), min_leaf, seed)


def candidate_documents(label: int, tree: ClusterTree, dataset: Dataset) -> frozenset[int]:
    """Ids of documents with at least one positive label in label's leaf, other than the label."""
    others = set(tree.leaf_of(label)) - {label}
    return frozenset(i for i, doc in enumerate(dataset.documents) if doc.labels & others)
