"""Triple classification and filtered link prediction."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .kg import TRAIN, KnowledgeGraph, sample_negatives, triple_keys
from .kge import EmbeddingTable, score_triples


@dataclass
class EvalReport:
    split: str
    accuracy: float | None = None
    hit1: float | None = None
    hit3: float | None = None
    hit10: float | None = None
    mean_rank: float | None = None
    wall_time: float = 0.0

    def __post_init__(self):
        if self.hit1 is not None and not (self.hit1 <= self.hit3 <= self.hit10):
            raise ValueError("hit@k must be non-decreasing in k")
        if self.mean_rank is not None and self.mean_rank < 1:
            raise ValueError("mean rank below 1")

    def as_dict(self) -> dict:
        return asdict(self)

    METRICS = ("accuracy", "hit1", "hit3", "hit10", "mean_rank")


# --------------------------------------------------------------------------- classification

def best_threshold(pos: np.ndarray, neg: np.ndarray) -> tuple[float, float]:
    """Threshold maximising accuracy of the rule ``score <= threshold`` -> positive.

    Returns ``(threshold, accuracy)``; among equally good thresholds the
    smallest is chosen. ``-inf`` (everything negative) is a candidate.
    """
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    order = np.argsort(scores, kind="stable")
    s, lab = scores[order], labels[order]
    # correct(k) when the first k sorted scores are called positive
    correct = len(neg) + np.concatenate([[0.0], np.cumsum(2 * lab - 1)])
    # a threshold can only sit at the end of a tie block
    ends = np.concatenate([[True], np.append(s[1:] != s[:-1], True)])
    correct = np.where(ends, correct, -np.inf)
    k = int(np.argmax(correct))
    thr = -np.inf if k == 0 else float(s[k - 1])
    return thr, float(correct[k] / len(scores))


def classification_accuracy(valid_pos, valid_neg, valid_rel, eval_pos, eval_neg, eval_rel) -> float:
    """Per-relation thresholds fitted on the valid scores, applied to the eval scores.

    Relations without valid triples fall back to one global threshold.
    """
    global_thr, _ = best_threshold(valid_pos, valid_neg)
    thresholds = {}
    for r in np.unique(valid_rel):
        m = valid_rel == r
        thresholds[int(r)], _ = best_threshold(valid_pos[m], valid_neg[m])
    thr = np.array([thresholds.get(int(r), global_thr) for r in eval_rel])
    correct = (eval_pos <= thr).sum() + (eval_neg > thr).sum()
    return float(correct / (len(eval_pos) + len(eval_neg)))


def _corrupted(g: KnowledgeGraph, triples: np.ndarray, seed: int) -> np.ndarray:
    return sample_negatives(g, triples, seed=seed)


def triple_classification(g: KnowledgeGraph, tbl: EmbeddingTable, split: str = "valid",
                          seed: int = 0) -> float:
    """Balanced triple-classification accuracy on ``split``.

    Each valid and test triple is corrupted once (seeded), thresholds are
    learnt per relation on valid and applied to ``split``.
    """
    valid = g.valid
    if not len(valid):
        raise ValueError(f"{g.graph_id}: valid split is empty")
    target = g.subset(split)
    if not len(target):
        raise ValueError(f"{g.graph_id}: {split} split is empty")
    vneg = _corrupted(g, valid, seed)
    vp, vn = score_triples(tbl, valid), score_triples(tbl, vneg)
    if split == "valid":
        tp, tn, trel = vp, vn, valid[:, 1]
    else:
        tneg = _corrupted(g, target, seed + 1)
        tp, tn, trel = score_triples(tbl, target), score_triples(tbl, tneg), target[:, 1]
    return classification_accuracy(vp, vn, valid[:, 1], tp, tn, trel)


# --------------------------------------------------------------------------- link prediction

def candidate_scores(tbl: EmbeddingTable, anchor: np.ndarray, rel: np.ndarray,
                     predict_head: bool) -> np.ndarray:
    """Score of every entity filling the missing slot, one row per query."""
    anchor = np.ascontiguousarray(anchor, dtype=np.int64)
    rel = np.ascontiguousarray(rel, dtype=np.int64)
    if tbl.model == "TransE":
        return kernels.transe_candidate_scores(np.ascontiguousarray(tbl.entity),
                                               np.ascontiguousarray(tbl.relation),
                                               anchor, rel, tbl.norm, predict_head)
    n = tbl.n_entities
    out = np.empty((len(anchor), n))
    ents = np.arange(n)
    for i, (a, r) in enumerate(zip(anchor, rel)):
        trip = np.empty((n, 3), dtype=np.int64)
        trip[:, 1] = r
        if predict_head:
            trip[:, 0], trip[:, 2] = ents, a
        else:
            trip[:, 0], trip[:, 2] = a, ents
        out[i] = score_triples(tbl, trip)
    return out


def tie_rank(scores: np.ndarray, true_idx: int, mask: np.ndarray | None = None) -> float:
    """Rank of ``scores[true_idx]`` (ascending), ties placed at the block mean.

    ``mask`` marks candidates that take part; the true entity always does.
    """
    s = scores if mask is None else scores[mask | (np.arange(len(scores)) == true_idx)]
    target = scores[true_idx]
    better = np.count_nonzero(s < target)
    ties = np.count_nonzero(s == target) - 1
    return 1.0 + better + ties / 2.0


def _slot_candidates(g: KnowledgeGraph) -> tuple[dict, dict]:
    tr = g.train
    heads, tails = {}, {}
    for r in np.unique(tr[:, 1]):
        m = tr[:, 1] == r
        heads[int(r)] = np.unique(tr[m, 0])
        tails[int(r)] = np.unique(tr[m, 2])
    return heads, tails


def link_prediction(g: KnowledgeGraph, tbl: EmbeddingTable, split: str = "test",
                    filtered: bool = True, filter_train: bool = False,
                    type_constraint: bool = False) -> EvalReport:
    """Head and tail ranking of every ``split`` triple.

    In the filtered setting candidates that complete a known valid or test
    triple (and train, with ``filter_train``) are removed; ``type_constraint``
    limits candidates to entities seen in that slot of the relation in train.
    """
    t0 = time.perf_counter()
    target = g.subset(split)
    if not len(target):
        raise ValueError(f"{g.graph_id}: {split} split is empty")
    n = g.n_entities
    known = g.split != TRAIN if not filter_train else np.ones(len(g), bool)
    known_keys = np.unique(g.triple_keys(g.triples[known]))
    heads, tails = _slot_candidates(g) if type_constraint else ({}, {})
    ents = np.arange(n)
    ranks = []
    for predict_head in (True, False):
        anchor = target[:, 2] if predict_head else target[:, 0]
        scores = candidate_scores(tbl, anchor, target[:, 1], predict_head)
        for i, (h, r, t) in enumerate(target):
            true_idx = h if predict_head else t
            mask = np.ones(n, dtype=bool)
            if filtered:
                cand = np.empty((n, 3), dtype=np.int64)
                cand[:, 1] = r
                if predict_head:
                    cand[:, 0], cand[:, 2] = ents, t
                else:
                    cand[:, 0], cand[:, 2] = h, ents
                keys = triple_keys(cand, n, g.n_relations)
                mask &= ~np.isin(keys, known_keys)
            if type_constraint:
                allowed = np.zeros(n, dtype=bool)
                allowed[(heads if predict_head else tails).get(int(r), ents)] = True
                mask &= allowed
            ranks.append(tie_rank(scores[i], int(true_idx), mask))
    ranks = np.asarray(ranks)
    return EvalReport(
        split=split,
        hit1=float((ranks <= 1).mean()),
        hit3=float((ranks <= 3).mean()),
        hit10=float((ranks <= 10).mean()),
        mean_rank=float(ranks.mean()),
        wall_time=time.perf_counter() - t0,
    )


def evaluate(g: KnowledgeGraph, tbl: EmbeddingTable, split: str = "test", seed: int = 0,
             **lp_kwargs) -> EvalReport:
    t0 = time.perf_counter()
    rep = link_prediction(g, tbl, split, **lp_kwargs)
    rep.accuracy = triple_classification(g, tbl, split, seed)
    rep.wall_time = time.perf_counter() - t0
    return rep


def improvement_score(g: KnowledgeGraph, tbl: EmbeddingTable, seed: int = 0,
                      weights: dict[str, float] | None = None) -> float:
    """Scalar used by backtracking: valid accuracy, or a weighted mix of metrics."""
    if not weights:
        return triple_classification(g, tbl, "valid", seed)
    total = 0.0
    rep = None
    for metric, w in weights.items():
        if metric == "accuracy":
            total += w * triple_classification(g, tbl, "valid", seed)
            continue
        if rep is None:
            rep = link_prediction(g, tbl, "valid")
        val = getattr(rep, metric)
        total += w * (-val if metric == "mean_rank" else val)
    return total
