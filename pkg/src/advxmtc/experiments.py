"""Desk-scale experiment pipelines on synthetic power-law corpora.

Each pipeline returns AttackReports so results can be exported or compared
bin by bin.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attack import NEGATIVE, POSITIVE, AttackConfig, EmbeddingKnnProvider
from .clustering import ClusterTree, cluster_labels
from .dataset import (
    Dataset,
    FrequencyBins,
    GenConfig,
    TfidfVectorizer,
    generate_powerlaw_dataset,
    label_frequencies,
    make_frequency_bins,
    synthetic_embeddings,
    train_test_split,
)
from .evaluation import (
    AttackReport,
    EmbeddingSimilarity,
    Thresholds,
    aggregate_report,
    predicted_topk,
    qualifying_pairs,
    run_campaign,
    sample_attack_targets,
)
from .victim import LinearMultilabelModel, LossSpec, ModelOracle, TrainOptions, train


@dataclass(frozen=True)
class ExperimentConfig:
    gen: GenConfig = GenConfig()
    train: TrainOptions = TrainOptions()
    k: int = 5
    theta: float = 0.10
    max_candidates: int = 50
    per_bin: int = 40
    min_labels_per_bin: int = 20
    min_leaf: int = 3
    strict: Thresholds | None = None


@dataclass
class SyntheticSetup:
    seed: int
    cfg: ExperimentConfig
    train: Dataset
    test: Dataset
    embeddings: dict
    vectorizer: TfidfVectorizer
    _models: dict = field(default_factory=dict)
    _tree: ClusterTree | None = None

    @classmethod
    def build(cls, seed: int, cfg: ExperimentConfig = ExperimentConfig()) -> "SyntheticSetup":
        ds = generate_powerlaw_dataset(cfg.gen, seed)
        train_ds, test_ds = train_test_split(ds, cfg.gen.test_fraction, seed)
        emb = synthetic_embeddings(cfg.gen, seed)
        return cls(seed, cfg, train_ds, test_ds, emb, TfidfVectorizer.fit(train_ds))

    def model(self, mode: str = "plain", base: str = "bce") -> LinearMultilabelModel:
        key = (base, mode)
        if key not in self._models:
            opt = TrainOptions(**{**self.cfg.train.__dict__, "seed": self.seed})
            self._models[key] = train(self.train, LossSpec(base=base, mode=mode), opt, self.vectorizer)
        return self._models[key]

    def oracle(self, mode: str = "plain") -> ModelOracle:
        return ModelOracle(self.model(mode))

    def provider(self) -> EmbeddingKnnProvider:
        return EmbeddingKnnProvider(self.embeddings, self.cfg.max_candidates)

    def similarity(self) -> EmbeddingSimilarity:
        return EmbeddingSimilarity(self.embeddings)

    def attack_config(self) -> AttackConfig:
        return AttackConfig(theta=self.cfg.theta, max_candidates=self.cfg.max_candidates)

    def tree(self) -> ClusterTree:
        if self._tree is None:
            X = self.vectorizer.transform(self.train.documents)
            self._tree = cluster_labels(self.train, X, self.cfg.min_leaf, self.seed)
        return self._tree

    def bins(self, mode: str = "plain") -> FrequencyBins:
        """Training-frequency bins over labels with a correctly classified test sample."""
        freqs = label_frequencies(self.train)
        preds = predicted_topk(self.oracle(mode), self.test, self.cfg.k)
        qualifying = np.zeros(self.train.num_labels, dtype=bool)
        for _, l in qualifying_pairs(self.test, preds, POSITIVE, range(self.train.num_labels)):
            qualifying[l] = True
        return make_frequency_bins(freqs, qualifying, self.cfg.min_labels_per_bin)

    def campaign(self, mode, kind, pairs, bins) -> AttackReport:
        res = run_campaign(
            self.oracle(mode), self.provider(), self.test, pairs, kind, bins,
            self.attack_config(), self.cfg.k, self.similarity(),
        )
        return aggregate_report(res.records, bins, self.cfg.strict)


def frequency_vulnerability(setup: SyntheticSetup, mode: str = "plain") -> AttackReport:
    """Positive-targeted success rate per label-frequency bin."""
    bins = setup.bins(mode)
    pairs = sample_attack_targets(setup.test, setup.oracle(mode), POSITIVE, bins,
                                  setup.cfg.per_bin, setup.cfg.k, seed=setup.seed)
    return setup.campaign(mode, POSITIVE, pairs, bins)


def rebalanced_robustness(setup: SyntheticSetup, mode: str = "PW-cb"):
    """Plain vs rebalanced victim attacked on the same samples.

    Samples are drawn among those the plain model classifies correctly and
    the rebalanced model also predicts, so both attacks start from a
    correct prediction. Returns (plain report, rebalanced report).
    """
    bins = setup.bins("plain")
    pairs = sample_attack_targets(setup.test, setup.oracle("plain"), POSITIVE, bins,
                                  setup.cfg.per_bin, setup.cfg.k, seed=setup.seed,
                                  also_correct_under=setup.oracle(mode))
    return (setup.campaign("plain", POSITIVE, pairs, bins),
            setup.campaign(mode, POSITIVE, pairs, bins))


def clustering_effect(setup: SyntheticSetup, mode: str = "plain"):
    """Negative-targeted success with and without cluster-restricted sampling.

    Returns (restricted report, unrestricted report).
    """
    bins = setup.bins(mode)
    reports = []
    for use in (True, False):
        pairs = sample_attack_targets(setup.test, setup.oracle(mode), NEGATIVE, bins,
                                      setup.cfg.per_bin, setup.cfg.k, tree=setup.tree(),
                                      use_clustering=use, seed=setup.seed)
        reports.append(setup.campaign(mode, NEGATIVE, pairs, bins))
    return tuple(reports)
