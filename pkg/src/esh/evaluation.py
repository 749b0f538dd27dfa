"""Retrieval metrics over packed Hamming codes.

Everything rests on one ranking primitive: XOR + popcount distances, then
a stable sort so equal distances break toward the lower database id. On
top of that sit average precision, precision at a depth, precision within
a Hamming ball, and per-query precision/recall curves, aggregated into a
report. Query fan-out can use a thread pool (ESH_THREADS caps workers);
results are reduced in query order, so the thread count never changes a
number.
"""

import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .dataset import LabelSet
from .encoder import PackedCodes

PR_GRID_POINTS = 101


def thread_count(requested=None):
    """Worker count: explicit argument, else ESH_THREADS, else one."""
    if requested is not None:
        n = int(requested)
    else:
        n = int(os.environ.get("ESH_THREADS", "1"))
    if n < 1:
        raise ValueError("thread count must be >= 1")
    return n


def hamming_distance(a_words, b_words):
    """Differing bits between two packed codes of equal width."""
    a = np.asarray(a_words, dtype=np.uint64)
    b = np.asarray(b_words, dtype=np.uint64)
    if a.shape != b.shape:
        raise ValueError("codes have different word counts")
    return int(np.bitwise_count(np.bitwise_xor(a, b)).sum())


def hamming_distances(query_words, db: PackedCodes):
    """Distances from one packed code (1-D word array) to every db code."""
    query_words = np.asarray(query_words, dtype=np.uint64)
    if query_words.shape != (db.n_words,):
        raise ValueError("query word count does not match database")
    x = np.bitwise_xor(query_words[None, :], db.words)
    return np.bitwise_count(x).sum(axis=1).astype(np.int64)


@dataclass(frozen=True)
class Ranking:
    """Database ids sorted by ascending distance, ties by ascending id."""

    ids: np.ndarray
    distances: np.ndarray
    query_id: object = None


def rank_database(query_words, db: PackedCodes, exclude_id=None, query_id=None):
    dist = hamming_distances(query_words, db)
    order = np.argsort(dist, kind="stable")
    if exclude_id is not None:
        order = order[order != exclude_id]
    return Ranking(ids=order, distances=dist[order], query_id=query_id)


class GroundTruth:
    """Which database items count as relevant for each query.

    Single-label: relevant iff labels are equal. Multi-label: relevant iff
    the label sets intersect.
    """

    def __init__(self, query_labels: LabelSet, db_labels: LabelSet):
        self.query_labels = query_labels
        self.db_labels = db_labels
        if query_labels.kind == "single" and db_labels.kind == "single":
            self._q = query_labels.single_array()
            self._db = db_labels.single_array()
            self._q_inc = self._db_inc = None
        else:
            classes = sorted({c for row in query_labels.labels for c in row}
                             | {c for row in db_labels.labels for c in row})
            self._class_index = {c: i for i, c in enumerate(classes)}
            self._q_inc = self._incidence(query_labels, len(classes))
            self._db_inc = self._incidence(db_labels, len(classes))
            self._q = self._db = None

    def _incidence(self, labels, n_classes):
        rows, cols = [], []
        for i, row in enumerate(labels.labels):
            for c in row:
                rows.append(i)
                cols.append(self._class_index[c])
        data = np.ones(len(rows), dtype=bool)
        return sp.csr_matrix((data, (rows, cols)), shape=(len(labels), n_classes))

    def positives_mask(self, query_index):
        """Boolean relevance over the database for one query."""
        if self._q is not None:
            return self._db == self._q[query_index]
        overlap = self._db_inc @ self._q_inc[query_index].T  # (n_db, 1) counts
        return np.asarray(overlap.todense()).ravel() > 0

    def query_classes(self, query_index):
        return self.query_labels.labels[query_index]

    @property
    def n_queries(self):
        return len(self.query_labels)


def average_precision(ranking: Ranking, positives_mask, cutoff=None):
    """Mean of precision-at-hit over all relevant items.

    The denominator is the total relevant count even under a cutoff, so a
    truncated list is penalized for what it failed to retrieve. No
    relevant items at all gives 0.
    """
    rel = np.asarray(positives_mask)[ranking.ids]
    n_pos = int(np.asarray(positives_mask).sum())
    if n_pos == 0:
        return 0.0
    if cutoff is not None:
        rel = rel[:cutoff]
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        return 0.0
    prec = np.arange(1, hits.size + 1) / (hits + 1.0)
    # plain left-to-right accumulation so results are reproducible against
    # a naive per-rank loop, term for term
    total = 0.0
    for v in prec.tolist():
        total += v
    return total / n_pos


def precision_at(ranking: Ranking, positives_mask, depth):
    """Fraction of the top `depth` that is relevant; depth caps at db size."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    depth = min(depth, ranking.ids.size)
    rel = np.asarray(positives_mask)[ranking.ids[:depth]]
    return float(rel.sum() / depth)


def precision_within_radius(ranking: Ranking, positives_mask, radius=2):
    """Precision over codes within Hamming distance `radius`; 0 if none."""
    within = int(np.searchsorted(ranking.distances, radius, side="right"))
    if within == 0:
        return 0.0
    rel = np.asarray(positives_mask)[ranking.ids[:within]]
    return float(rel.sum() / within)


def pr_curve(ranking: Ranking, positives_mask):
    """Precision/recall points at each rank where recall changes.

    Returns (recall, precision) arrays of length |positives retrieved|.
    """
    rel = np.asarray(positives_mask)[ranking.ids]
    n_pos = int(np.asarray(positives_mask).sum())
    if n_pos == 0:
        return np.empty(0), np.empty(0)
    hits = np.flatnonzero(rel)
    j = np.arange(1, hits.size + 1)
    return j / n_pos, j / (hits + 1.0)


def _grid_precision(precision, n_pos):
    """Precision at the first hit reaching each grid recall level.

    The j-th hit (1-based) is the first with recall j/P >= i/100, i.e.
    j = ceil(i*P/100). Integer arithmetic: float ceil picks the wrong j
    when i*P/100 lands an ulp away from an integer.
    """
    i = np.arange(PR_GRID_POINTS, dtype=np.int64)
    j = np.maximum(-(-(i * n_pos) // (PR_GRID_POINTS - 1)), 1)
    out = np.zeros(PR_GRID_POINTS)
    have = j <= precision.size
    out[have] = precision[j[have] - 1]
    return out


@dataclass
class EvalReport:
    n_queries: int
    map: float
    macro_map: float
    precision_at: dict
    precision_at_radius: float
    radius: int
    pr_recall: np.ndarray
    pr_precision: np.ndarray
    per_class_ap: dict

    def to_json(self, path):
        doc = {
            "n_queries": self.n_queries,
            "map": self.map,
            "macro_map": self.macro_map,
            "precision_at": {str(n): v for n, v in self.precision_at.items()},
            "precision_at_radius": self.precision_at_radius,
            "radius": self.radius,
            "per_class_ap": {str(c): v for c, v in self.per_class_ap.items()},
        }
        with open(path, "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")

    def pr_to_csv(self, path):
        with open(path, "w") as f:
            f.write("recall,precision\n")
            for r, p in zip(self.pr_recall, self.pr_precision):
                f.write(f"{r:.2f},{float(p)!r}\n")


def _eval_one(args):
    qi, q_words, db, gt, depths, radius, exclude, cutoff = args
    mask = gt.positives_mask(qi)
    if exclude:
        # the query's own row leaves both the ranking and the positive set
        mask = mask.copy()
        mask[qi] = False
    ranking = rank_database(q_words, db, exclude_id=qi if exclude else None, query_id=qi)
    n_pos = int(mask.sum())
    ap = average_precision(ranking, mask, cutoff=cutoff)
    pn = [precision_at(ranking, mask, n) for n in depths]
    pr = precision_within_radius(ranking, mask, radius)
    if n_pos:
        _, prec = pr_curve(ranking, mask)
        grid_prec = _grid_precision(prec, n_pos)
    else:
        grid_prec = None
    return ap, pn, pr, grid_prec, n_pos


def evaluate(query_codes: PackedCodes, db_codes: PackedCodes, gt: GroundTruth,
             depths=(300,), radius=2, exclude_self=False, cutoff=None,
             count_empty=True, threads=None):
    """Run the full metric suite for a query set against a database.

    exclude_self drops database item i from query i's ranking; only
    meaningful when the query set is the database itself. Queries with no
    relevant database item score 0 and stay in the averages (conservative);
    count_empty=False drops them instead. Macro mAP averages per-class AP
    means; a multi-label query contributes its AP to every class it
    carries, and database classes with no queries are skipped with a
    warning.
    """
    if query_codes.k != db_codes.k:
        raise ValueError("query and database code lengths differ")
    if gt.n_queries != query_codes.n:
        raise ValueError("query label count does not match query codes")
    if len(gt.db_labels) != db_codes.n:
        raise ValueError("database label count does not match database codes")
    if exclude_self and query_codes.n != db_codes.n:
        raise ValueError("exclude_self requires query set == database")
    depths = tuple(int(n) for n in depths)
    jobs = [(qi, query_codes.words[qi], db_codes, gt, depths, radius, exclude_self, cutoff)
            for qi in range(query_codes.n)]
    workers = thread_count(threads)
    if workers == 1:
        results = [_eval_one(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_eval_one, jobs))  # in query order

    keep = [i for i, r in enumerate(results) if count_empty or r[4] > 0]
    if not keep:
        raise ValueError("no query has a relevant database item")
    aps = np.array([results[i][0] for i in keep])
    pn_mat = np.array([results[i][1] for i in keep])  # (kept, len(depths))
    prs = np.array([results[i][2] for i in keep])
    curves = [r[3] for r in results if r[3] is not None]

    by_class = {}
    for qi in keep:
        for c in gt.query_classes(qi):
            by_class.setdefault(c, []).append(results[qi][0])
    db_classes = {c for row in gt.db_labels.labels for c in row}
    silent = sorted(db_classes - set(by_class))
    if silent:
        warnings.warn(f"classes with no queries skipped in macro mAP: {silent}", stacklevel=2)
    per_class_ap = {c: float(np.mean(v)) for c, v in sorted(by_class.items())}

    grid = np.linspace(0.0, 1.0, PR_GRID_POINTS)
    mean_curve = np.mean(curves, axis=0) if curves else np.zeros(PR_GRID_POINTS)
    return EvalReport(
        n_queries=len(keep),
        map=float(aps.mean()),
        macro_map=float(np.mean(list(per_class_ap.values()))) if per_class_ap else 0.0,
        precision_at={n: float(pn_mat[:, i].mean()) for i, n in enumerate(depths)},
        precision_at_radius=float(prs.mean()),
        radius=int(radius),
        pr_recall=grid,
        pr_precision=mean_curve,
        per_class_ap=per_class_ap,
    )
