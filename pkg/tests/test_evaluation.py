import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advxmtc.attack import AttackConfig, EmbeddingKnnProvider
from advxmtc.clustering import ClusterNode, ClusterTree
from advxmtc.dataset import Document, FrequencyBins, make_frequency_bins, label_frequencies
from advxmtc.evaluation import (
    CSV_COLUMNS,
    ERROR,
    FAILURE,
    SUCCESS,
    AttackRecord,
    Thresholds,
    aggregate_report,
    change_rate,
    counts_as_success,
    embedding_similarity,
    export_plot_data,
    export_report,
    load_report,
    read_outcomes,
    read_report_csv,
    run_campaign,
    sample_attack_targets,
    write_outcomes,
)
from advxmtc.victim import top_k

from conftest import BagOracle, TableProvider, make_dataset


def d(text):
    return Document(tuple(text.split()), frozenset())


class TestChangeRate:
    def test_identical(self):
        assert change_rate(d("a b c"), d("a b c")) == 0

    def test_one_of_fifty(self):
        a = d(" ".join(["w"] * 50))
        b = a.with_tokens(("x",) + a.tokens[1:])
        assert change_rate(a, b) == 0.02

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            change_rate(d("a b"), d("a"))

    def test_random_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(1, 30))
            a = rng.choice(list("abc"), n)
            b = rng.choice(list("abc"), n)
            brute = sum(1 for x, y in zip(a, b) if x != y) / n
            assert change_rate(d(" ".join(a)), d(" ".join(b))) == brute


class TestSimilarity:
    EMB = {"x": np.array([1.0, 0.0]), "y": np.array([0.0, 1.0]), "z": np.array([-1.0, 0.0])}

    def test_identical(self):
        assert embedding_similarity(d("x y"), d("x y"), self.EMB) == 1.0

    def test_opposite(self):
        assert embedding_similarity(d("x"), d("z"), self.EMB) == 0.0

    def test_hand_computed(self):
        # mean(x, y) = (0.5, 0.5), cos with x = 1/sqrt(2)
        got = embedding_similarity(d("x y"), d("x x"), self.EMB)
        assert got == pytest.approx((1 / np.sqrt(2) + 1) / 2, rel=1e-15)

    def test_unknown_skipped_and_empty(self):
        assert embedding_similarity(d("x q"), d("x r"), self.EMB) == 1.0
        assert embedding_similarity(d("q"), d("r"), self.EMB) == 1.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.sampled_from("xyzq"), min_size=1, max_size=6),
           st.lists(st.sampled_from("xyzq"), min_size=1, max_size=6))
    def test_bounds_and_symmetry(self, a, b):
        s1 = embedding_similarity(d(" ".join(a)), d(" ".join(b)), self.EMB)
        s2 = embedding_similarity(d(" ".join(b)), d(" ".join(a)), self.EMB)
        assert 0.0 <= s1 <= 1.0
        assert s1 == s2


def rec(target, bin_id, status=SUCCESS, cr=0.05, sim=0.9, doc_id=0):
    return AttackRecord(doc_id, target, bin_id, status, cr, sim, 10, 1)


BINS2 = FrequencyBins(((1, 2), (3, 9)), ((0, 1), (2, 3)))


class TestAggregate:
    def test_all_failures(self):
        r = aggregate_report([rec(0, 0, FAILURE), rec(2, 1, FAILURE)], BINS2)
        assert r.success_rates() == [0.0, 0.0]
        assert r.overall.success_rate_pct == 0.0

    def test_strict_boundary(self):
        r = rec(0, 0, sim=0.79)
        assert counts_as_success(r, None)
        assert not counts_as_success(r, Thresholds())
        assert not counts_as_success(rec(0, 0, sim=0.8), Thresholds())
        assert not counts_as_success(rec(0, 0, cr=0.10), Thresholds())
        assert counts_as_success(rec(0, 0, sim=0.81, cr=0.09), Thresholds())

    def test_mixed_hand_tally(self):
        records = [
            rec(0, 0), rec(1, 0, FAILURE), rec(0, 0, sim=0.5, doc_id=3), rec(1, 0, ERROR),
            rec(2, 1), rec(3, 1, cr=0.2), rec(3, 1, FAILURE, doc_id=7),
        ]
        raw = aggregate_report(records, BINS2)
        assert [b.n_attacks for b in raw.per_bin] == [3, 3]
        assert raw.success_rates() == pytest.approx([200 / 3, 200 / 3])
        assert raw.per_bin[0].n_errors == 1
        strict = aggregate_report(records, BINS2, Thresholds())
        assert strict.success_rates() == pytest.approx([100 / 3, 100 / 3])
        assert strict.overall.n_success == 2 and strict.overall.n_attacks == 6
        assert strict.per_bin[0].mean_similarity == pytest.approx(0.9)

    def test_strict_subset_of_raw(self):
        rng = np.random.default_rng(3)
        records = [rec(int(rng.integers(0, 4)), 0, rng.choice([SUCCESS, FAILURE]),
                       float(rng.random() * 0.2), float(rng.random())) for _ in range(200)]
        records = [AttackRecord(r.doc_id, r.target, 0 if r.target < 2 else 1, r.status, r.change_rate,
                                r.similarity, r.queries, r.n_steps) for r in records]
        raw = aggregate_report(records, BINS2)
        strict = aggregate_report(records, BINS2, Thresholds())
        for a, b in zip(raw.per_bin, strict.per_bin):
            assert b.n_success <= a.n_success

    def test_order_independent(self):
        records = [rec(i % 4, (i % 4) // 2, doc_id=i) for i in range(10)]
        a = aggregate_report(records, BINS2)
        b = aggregate_report(list(reversed(records)), BINS2)
        assert a.per_bin == b.per_bin and a.records == b.records

    def test_unbinned_target(self):
        with pytest.raises(ValueError):
            aggregate_report([rec(0, 5)], BINS2)


class TestExport:
    def test_header_only(self, tmp_path):
        export_report(aggregate_report([], BINS2), tmp_path / "r.csv")
        assert (tmp_path / "r.csv").read_text() == ",".join(CSV_COLUMNS) + "\n"

    def test_two_bins_in_order(self, tmp_path):
        report = aggregate_report([rec(2, 1), rec(0, 0, FAILURE)], BINS2)
        export_report(report, tmp_path / "r.csv")
        rows = read_report_csv(tmp_path / "r.csv")
        assert [(r["bin_lo"], r["bin_hi"]) for r in rows] == [(1, 2), (3, 9)]
        assert [r["success_rate_pct"] for r in rows] == [0.0, 100.0]
        with open(tmp_path / "r.csv") as fh:
            assert next(csv.reader(fh)) == list(CSV_COLUMNS)

    @pytest.mark.parametrize("strict", [None, Thresholds()])
    def test_json_roundtrip(self, tmp_path, strict):
        records = [rec(0, 0), rec(1, 0, FAILURE), rec(2, 1, sim=0.7), rec(3, 1, ERROR)]
        report = aggregate_report(records, BINS2, strict)
        export_report(report, tmp_path / "r.json", fmt="json")
        again = load_report(tmp_path / "r.json")
        assert again.per_bin == report.per_bin
        assert again.overall == report.overall
        assert again.records == report.records

    def test_plot_data(self, tmp_path):
        plain = aggregate_report([rec(0, 0), rec(2, 1, FAILURE)], BINS2)
        cb = aggregate_report([rec(0, 0, FAILURE)], BINS2)
        export_plot_data({"plain": plain, "PW-cb": cb}, tmp_path / "p.csv")
        with open(tmp_path / "p.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [(r["series"], float(r["bin_mid"]), float(r["success_rate_pct"])) for r in rows] == [
            ("plain", 1.5, 100.0), ("plain", 6.0, 0.0), ("PW-cb", 1.5, 0.0)]

    def test_bad_format(self, tmp_path):
        with pytest.raises(ValueError):
            export_report(aggregate_report([], BINS2), tmp_path / "r.x", fmt="xml")


def toy_world():
    rng = np.random.default_rng(11)
    vocab = [f"v{i}" for i in range(15)]
    L = 6
    oracle = BagOracle({w: rng.normal(size=L) for w in vocab}, rng.normal(size=L) - 1)
    rows = []
    for _ in range(40):
        labels = set(rng.choice(L, size=2, replace=False).tolist())
        rows.append((labels, " ".join(rng.choice(vocab, size=6))))
    ds = make_dataset(rows, num_labels=L)
    bins = make_frequency_bins(label_frequencies(ds), [True] * L, 2)
    tree = ClusterTree(ClusterNode(tuple(range(L)), ClusterNode((0, 1, 2)), ClusterNode((3, 4, 5))), 3, 0)
    return oracle, ds, bins, tree, vocab


class TestSampling:
    def test_nothing_correct(self):
        oracle = BagOracle({}, [0.0, 0.0, 5.0])
        ds = make_dataset([({0}, "a"), ({1}, "b")], num_labels=3)
        bins = make_frequency_bins(label_frequencies(ds), [True] * 3, 1)
        assert sample_attack_targets(ds, oracle, "positive-targeted", bins, k=1) == []

    @pytest.mark.parametrize("kind,use_tree", [("positive-targeted", False), ("negative-targeted", False),
                                               ("negative-targeted", True)])
    def test_predicates_rechecked(self, kind, use_tree):
        oracle, ds, bins, tree, _ = toy_world()
        pairs = sample_attack_targets(ds, oracle, kind, bins, per_bin=5, k=2, tree=tree,
                                      use_clustering=use_tree, seed=1)
        assert pairs
        for doc_id, t in pairs:
            doc = ds.documents[doc_id]
            pred = set(top_k(oracle(doc.tokens), 2))
            if kind == "positive-targeted":
                assert t in doc.labels and t in pred
            else:
                assert t not in doc.labels and t not in pred
                if use_tree:
                    leaf = tree.leaf_of(t)
                    assert any(l in doc.labels for l in leaf if l != t)

    def test_per_bin_cap_and_fallback(self):
        oracle, ds, bins, tree, _ = toy_world()
        l2b = bins.label_to_bin()
        all_pairs = sample_attack_targets(ds, oracle, "negative-targeted", bins, per_bin=10_000, k=2)
        capped = sample_attack_targets(ds, oracle, "negative-targeted", bins, per_bin=3, k=2)
        for b in range(len(bins)):
            n_all = sum(1 for _, t in all_pairs if l2b[t] == b)
            n_cap = sum(1 for _, t in capped if l2b[t] == b)
            assert n_cap == min(3, n_all)
        assert set(capped) <= set(all_pairs)

    def test_deterministic(self):
        oracle, ds, bins, tree, _ = toy_world()
        a = sample_attack_targets(ds, oracle, "negative-targeted", bins, per_bin=2, k=2, seed=4)
        b = sample_attack_targets(ds, oracle, "negative-targeted", bins, per_bin=2, k=2, seed=4)
        assert a == b

    def test_total_option(self):
        oracle, ds, bins, tree, _ = toy_world()
        pairs = sample_attack_targets(ds, oracle, "negative-targeted", bins, per_bin=None, total=7, k=2)
        assert len(pairs) == 7

    def test_errors(self):
        oracle, ds, bins, tree, _ = toy_world()
        with pytest.raises(ValueError):
            sample_attack_targets(ds, oracle, "negative-targeted", bins, use_clustering=True)
        with pytest.raises(ValueError):
            sample_attack_targets(ds, oracle, "positive-targeted", bins, per_bin=0)


class TestCampaign:
    def test_records_and_outcomes(self, tmp_path):
        oracle, ds, bins, tree, vocab = toy_world()
        emb = {w: np.array([np.cos(i), np.sin(i)]) for i, w in enumerate(vocab)}
        prov = EmbeddingKnnProvider(emb, M=4)
        pairs = sample_attack_targets(ds, oracle, "positive-targeted", bins, per_bin=4, k=2)
        sim = lambda a, b: embedding_similarity(a, b, emb)
        res = run_campaign(oracle, prov, ds, pairs, "positive-targeted", bins, AttackConfig(theta=0.5), k=2,
                           similarity=sim)
        assert [(r.doc_id, r.target) for r in res.records] == pairs
        for r, o in zip(res.records, res.outcomes):
            assert r.success == o.success
            assert r.similarity == sim(o.original, o.adversarial)
        write_outcomes(res, tmp_path / "o.jsonl")
        assert read_outcomes(tmp_path / "o.jsonl") == res.records

    def test_parallel_matches_serial(self):
        oracle, ds, bins, tree, vocab = toy_world()
        prov = TableProvider({w: vocab[:3] for w in vocab})
        pairs = sample_attack_targets(ds, oracle, "negative-targeted", bins, per_bin=6, k=2)
        cfg = AttackConfig(theta=0.5)
        a = run_campaign(oracle, prov, ds, pairs, "negative-targeted", bins, cfg, k=2)
        b = run_campaign(oracle, prov, ds, pairs, "negative-targeted", bins, cfg, k=2, workers=4)
        assert a.records == b.records

    def test_error_isolated(self):
        oracle, ds, bins, tree, vocab = toy_world()
        pairs = sample_attack_targets(ds, oracle, "positive-targeted", bins, per_bin=2, k=2)

        def flaky(tokens, position, max_candidates):
            raise RuntimeError("no service")

        res = run_campaign(oracle, flaky, ds, pairs, "positive-targeted", bins, AttackConfig(theta=0.5), k=2)
        assert all(r.status == ERROR and "no service" in r.error for r in res.records)
        assert aggregate_report(res.records, bins).overall.n_attacks == 0
