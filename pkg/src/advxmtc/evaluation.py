"""Attack campaigns: target sampling, similarity and change-rate metrics,
per-bin success aggregation and report files.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .attack import NEGATIVE, POSITIVE, AttackConfig, AttackGoal, AttackOutcome, run_attack
from .clustering import ClusterTree
from .dataset import Dataset, Document, FrequencyBins
from .victim import top_k

log = logging.getLogger(__name__)

CSV_COLUMNS = ("bin_lo", "bin_hi", "n_attacks", "success_rate_pct", "mean_similarity", "mean_change_rate_pct")

SUCCESS, FAILURE, ERROR = "success", "failure", "error"


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


def change_rate(original: Document, adversarial: Document) -> float:
    if len(original) != len(adversarial):
        raise ValueError("documents differ in length")
    changed = sum(a != b for a, b in zip(original.tokens, adversarial.tokens))
    return changed / len(original)


def _mean_vector(tokens, embeddings):
    vecs = [embeddings[t] for t in tokens if t in embeddings]
    return np.mean(vecs, axis=0) if vecs else None


def embedding_similarity(original: Document, adversarial: Document, embeddings) -> float:
    """Cosine of mean word vectors mapped from [-1, 1] onto [0, 1].

    Unknown words are skipped. Two documents without known words count as
    identical; one empty side against a non-empty one scores 0.5.
    """
    if original.tokens == adversarial.tokens:
        return 1.0
    a = _mean_vector(original.tokens, embeddings)
    b = _mean_vector(adversarial.tokens, embeddings)
    if a is None and b is None:
        return 1.0
    if a is None or b is None:
        return 0.5
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0 if na == nb else 0.5
    cos = float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
    return (cos + 1.0) / 2.0


class EmbeddingSimilarity:
    """Similarity oracle over a fixed embedding table."""

    def __init__(self, embeddings):
        self.embeddings = embeddings

    def __call__(self, original: Document, adversarial: Document) -> float:
        return embedding_similarity(original, adversarial, self.embeddings)


# --------------------------------------------------------------------------
# Target sampling
# --------------------------------------------------------------------------


def predicted_topk(oracle, dataset: Dataset, k: int) -> list[tuple[int, ...]]:
    return [top_k(oracle(doc.tokens), k) for doc in dataset.documents]


def _cluster_targets(doc: Document, tree: ClusterTree) -> set[int]:
    """Labels l for which the document lies in NT_l."""
    out: set[int] = set()
    for a in doc.labels:
        try:
            leaf = tree.leaf_of(a)
        except KeyError:
            continue
        out.update(l for l in leaf if l != a)
    return out


def qualifying_pairs(
    dataset: Dataset,
    predictions: Sequence[Sequence[int]],
    kind: str,
    labels: Sequence[int],
    tree: ClusterTree | None = None,
) -> list[tuple[int, int]]:
    """All (doc id, target) pairs meeting the sampling conditions for ``kind``.

    Positive: the target is a true label predicted in the top-k. Negative:
    the target is neither a true label nor predicted, and, when ``tree`` is
    given, the document carries another label of the target's leaf.
    """
    allowed = set(int(l) for l in labels)
    pairs = []
    for i, (doc, pred) in enumerate(zip(dataset.documents, predictions)):
        pred = set(pred)
        if kind == POSITIVE:
            cands = doc.labels & pred & allowed
        elif kind == NEGATIVE:
            cands = allowed - doc.labels - pred
            if tree is not None:
                cands &= _cluster_targets(doc, tree)
        else:
            raise ValueError(f"unsupported goal kind {kind!r}")
        pairs.extend((i, l) for l in sorted(cands))
    return pairs


def sample_attack_targets(
    dataset: Dataset,
    oracle,
    kind: str,
    bins: FrequencyBins,
    per_bin: int | None = 200,
    k: int = 5,
    tree: ClusterTree | None = None,
    use_clustering: bool = False,
    seed: int = 0,
    total: int | None = None,
    also_correct_under=None,
) -> list[tuple[int, int]]:
    """Draw (doc id, target label) pairs per frequency bin.

    Each bin contributes ``per_bin`` pairs, or all of its qualifying pairs
    if it has fewer. With ``total`` set instead, pairs are drawn uniformly
    over every bin. ``also_correct_under`` is a second oracle whose top-k
    must satisfy the same conditions (used to compare two victims on the
    same samples). Output is sorted by (bin, doc id, label).
    """
    if kind == NEGATIVE and use_clustering and tree is None:
        raise ValueError("negative-targeted sampling with clustering needs a cluster tree")
    if per_bin is not None and per_bin < 1:
        raise ValueError("per_bin must be >= 1")
    if per_bin is None and total is None:
        raise ValueError("set per_bin or total")
    l2b = bins.label_to_bin()
    restrict = tree if (kind == NEGATIVE and use_clustering) else None
    pairs = qualifying_pairs(dataset, predicted_topk(oracle, dataset, k), kind, list(l2b), restrict)
    if also_correct_under is not None:
        other = qualifying_pairs(dataset, predicted_topk(also_correct_under, dataset, k), kind, list(l2b), restrict)
        keep = set(other)
        pairs = [p for p in pairs if p in keep]

    rng = np.random.default_rng(seed)
    if total is not None:
        chosen = pairs if len(pairs) <= total else [pairs[j] for j in rng.choice(len(pairs), total, replace=False)]
        return sorted(chosen, key=lambda p: (l2b[p[1]], p[0], p[1]))
    out = []
    for b in range(len(bins)):
        in_bin = [p for p in pairs if l2b[p[1]] == b]
        if len(in_bin) > per_bin:
            idx = np.sort(rng.choice(len(in_bin), per_bin, replace=False))
            in_bin = [in_bin[j] for j in idx]
        out.extend(in_bin)
    return out


# --------------------------------------------------------------------------
# Campaigns
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AttackRecord:
    doc_id: int
    target: int
    bin_id: int
    status: str
    change_rate: float = 0.0
    similarity: float | None = None
    queries: int = 0
    n_steps: int = 0
    error: str | None = None

    @property
    def success(self) -> bool:
        return self.status == SUCCESS


@dataclass
class CampaignResult:
    records: list[AttackRecord]
    outcomes: list[AttackOutcome | None]


def _goal_for(kind: str, target: int, k: int) -> AttackGoal:
    return AttackGoal(kind, k, frozenset({target}))


def run_campaign(
    oracle,
    provider,
    dataset: Dataset,
    pairs: Sequence[tuple[int, int]],
    kind: str,
    bins: FrequencyBins,
    cfg: AttackConfig = AttackConfig(),
    k: int = 5,
    similarity: Callable[[Document, Document], float] | None = None,
    workers: int = 1,
) -> CampaignResult:
    """Attack every pair. A failing engine call is recorded as status
    ``error`` for that pair only. Results keep the order of ``pairs``."""
    l2b = bins.label_to_bin()

    def one(pair):
        doc_id, target = pair
        doc = dataset.documents[doc_id]
        try:
            out = run_attack(oracle, provider, doc, _goal_for(kind, target, k), cfg)
            sim = similarity(doc, out.adversarial) if similarity is not None else None
        except Exception as exc:  # engine errors are reported, not raised
            msg = f"doc {doc_id} target {target}: {type(exc).__name__}: {exc}"
            log.warning("attack error: %s", msg)
            return AttackRecord(doc_id, target, l2b[target], ERROR, error=msg), None
        out.similarity = sim
        rec = AttackRecord(
            doc_id, target, l2b[target], SUCCESS if out.success else FAILURE,
            out.change_rate, sim, out.queries, len(out.steps),
        )
        return rec, out

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, pairs))
    else:
        results = [one(p) for p in pairs]
    return CampaignResult([r for r, _ in results], [o for _, o in results])


# --------------------------------------------------------------------------
# Aggregation and reports
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Thresholds:
    """Strict success: similarity above ``similarity`` and change rate below ``change``."""

    similarity: float = 0.8
    change: float = 0.10


def counts_as_success(rec: AttackRecord, strict: Thresholds | None) -> bool:
    if not rec.success:
        return False
    if strict is None:
        return True
    return rec.similarity is not None and rec.similarity > strict.similarity and rec.change_rate < strict.change


@dataclass(frozen=True)
class BinSummary:
    bin_lo: int | None
    bin_hi: int | None
    n_attacks: int
    n_success: int
    n_errors: int
    success_rate_pct: float
    mean_similarity: float | None
    mean_change_rate_pct: float | None


def _summarize(records, strict, lo=None, hi=None) -> BinSummary:
    valid = [r for r in records if r.status != ERROR]
    wins = [r for r in valid if counts_as_success(r, strict)]
    sims = [r.similarity for r in wins if r.similarity is not None]
    return BinSummary(
        lo, hi, len(valid), len(wins), len(records) - len(valid),
        100.0 * len(wins) / len(valid) if valid else 0.0,
        float(np.mean(sims)) if sims else None,
        100.0 * float(np.mean([r.change_rate for r in wins])) if wins else None,
    )


@dataclass
class AttackReport:
    records: list[AttackRecord]
    bins: FrequencyBins
    strict: Thresholds | None
    per_bin: list[BinSummary] = field(default_factory=list)
    overall: BinSummary | None = None

    def success_rates(self) -> list[float]:
        return [b.success_rate_pct for b in self.per_bin]


def _fold_order(records):
    return sorted(records, key=lambda r: (r.bin_id, r.doc_id, r.target))


def aggregate_report(records: Sequence[AttackRecord], bins: FrequencyBins,
                     strict: Thresholds | None = None) -> AttackReport:
    """Success rates per bin and overall.

    Non-strict mode counts every attack that reached its goal; strict mode
    also requires similarity above the floor and change rate below the cap.
    Means of similarity and change rate are taken over counted successes.
    Engine errors are excluded from ``n_attacks``.
    """
    for r in records:
        if not 0 <= r.bin_id < len(bins):
            raise ValueError(f"record for label {r.target} has no bin")
    ordered = _fold_order(records)
    per_bin = [
        _summarize([r for r in ordered if r.bin_id == b], strict, lo, hi)
        for b, (lo, hi) in enumerate(bins.ranges)
    ]
    return AttackReport(list(ordered), bins, strict, per_bin, _summarize(ordered, strict))


def _fmt(x):
    return "" if x is None else repr(x)


def export_report(report: AttackReport, path, fmt: str = "csv") -> None:
    """``csv``: one row per bin with CSV_COLUMNS. ``json``: bins, thresholds,
    every record and the aggregates."""
    if fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for s in report.per_bin:
                if s.n_attacks == 0 and s.n_errors == 0:
                    continue
                w.writerow([s.bin_lo, s.bin_hi, s.n_attacks, repr(s.success_rate_pct),
                            _fmt(s.mean_similarity), _fmt(s.mean_change_rate_pct)])
    elif fmt == "json":
        doc = {
            "bins": {"ranges": [list(r) for r in report.bins.ranges],
                     "members": [list(m) for m in report.bins.members]},
            "strict": asdict(report.strict) if report.strict else None,
            "records": [asdict(r) for r in report.records],
            "per_bin": [asdict(s) for s in report.per_bin],
            "overall": asdict(report.overall) if report.overall else None,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def load_report(path) -> AttackReport:
    """Re-import a JSON report, recomputing aggregates from its records."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    bins = FrequencyBins(tuple(tuple(r) for r in doc["bins"]["ranges"]),
                         tuple(tuple(m) for m in doc["bins"]["members"]))
    strict = Thresholds(**doc["strict"]) if doc["strict"] else None
    records = [AttackRecord(**r) for r in doc["records"]]
    return aggregate_report(records, bins, strict)


def read_report_csv(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({
                "bin_lo": int(row["bin_lo"]),
                "bin_hi": int(row["bin_hi"]),
                "n_attacks": int(row["n_attacks"]),
                "success_rate_pct": float(row["success_rate_pct"]),
                "mean_similarity": float(row["mean_similarity"]) if row["mean_similarity"] else None,
                "mean_change_rate_pct": float(row["mean_change_rate_pct"]) if row["mean_change_rate_pct"] else None,
            })
    return rows


def export_plot_data(series: dict[str, AttackReport], path) -> None:
    """Long-format CSV: series, bin_lo, bin_hi, bin_mid, success_rate_pct."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("series", "bin_lo", "bin_hi", "bin_mid", "success_rate_pct"))
        for name in series:
            for s in series[name].per_bin:
                if s.n_attacks:
                    w.writerow((name, s.bin_lo, s.bin_hi, repr((s.bin_lo + s.bin_hi) / 2.0), repr(s.success_rate_pct)))


def outcome_to_dict(rec: AttackRecord, outcome: AttackOutcome | None) -> dict:
    d = asdict(rec)
    if outcome is not None:
        d["gamma"] = list(outcome.gamma)
        d["steps"] = [[s.position, s.old, s.new, s.delta] for s in outcome.steps]
        d["adversarial"] = " ".join(outcome.adversarial.tokens)
    return d


def write_outcomes(result: CampaignResult, path) -> None:
    """One JSON object per line in campaign order."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec, out in zip(result.records, result.outcomes):
            fh.write(json.dumps(outcome_to_dict(rec, out), sort_keys=True) + "\n")


def read_outcomes(path) -> list[AttackRecord]:
    keys = set(AttackRecord.__dataclass_fields__)
    with open(path, encoding="utf-8") as fh:
        return [AttackRecord(**{k: v for k, v in json.loads(line).items() if k in keys})
                for line in fh if line.strip()]

