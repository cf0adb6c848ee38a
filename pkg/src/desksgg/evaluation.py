"""Post-processing, triplet matching and scene-graph metrics.

Conventions used throughout:

* A ranked list is the post-processed output for one scene, sorted by
  ``score = p_sub * p_prd * p_obj`` (ties keep slot order).
* Ground truth for a scene is a :class:`TripletTargets`.
* Recall matching is greedy in rank order; each GT triplet and each
  candidate is consumed at most once.
* Corpus R@K is the mean of per-scene recalls over scenes with GT.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .boxes import elementwise_iou, pairwise_iou, union_box
from .matching import hungarian, triplet_cost_matrix
from .structures import TripletSet, TripletTargets

ENTITY_IOU = 0.5
SELF_IOU = 0.7
SATURATED = -1e9  # logit that softmaxes to exactly 0 next to a 0 logit


@dataclass
class RankedTriplet:
    sub_label: int
    sub_score: float
    sub_box: tuple[float, float, float, float]
    obj_label: int
    obj_score: float
    obj_box: tuple[float, float, float, float]
    prd_label: int
    prd_score: float
    score: float
    slot: int = -1
    prd_scores: tuple[float, ...] = ()  # distribution over real predicates, for no-graph recall

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sub_box"], d["obj_box"], d["prd_scores"] = list(self.sub_box), list(self.obj_box), list(self.prd_scores)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RankedTriplet":
        return cls(
            int(d["sub_label"]), float(d["sub_score"]), tuple(map(float, d["sub_box"])),
            int(d["obj_label"]), float(d["obj_score"]), tuple(map(float, d["obj_box"])),
            int(d["prd_label"]), float(d["prd_score"]), float(d["score"]),
            int(d.get("slot", -1)), tuple(map(float, d.get("prd_scores", ()))),
        )


def postprocess(preds: TripletSet, self_iou_thresh: float = SELF_IOU) -> list[RankedTriplet]:
    """Labels and scores per slot, same-entity removal, descending sort."""
    ps, po, pp = preds.probs()
    ps, po, pp = ps[:, :-1], po[:, :-1], pp[:, :-1]
    sub_l, obj_l, prd_l = ps.argmax(1), po.argmax(1), pp.argmax(1)
    rows = np.arange(len(preds))
    sub_s, obj_s, prd_s = ps[rows, sub_l], po[rows, obj_l], pp[rows, prd_l]
    self_iou = elementwise_iou(preds.sub_boxes, preds.obj_boxes)
    out = []
    for i in rows:
        if sub_l[i] == obj_l[i] and self_iou[i] >= self_iou_thresh:
            continue
        out.append(RankedTriplet(
            int(sub_l[i]), float(sub_s[i]), tuple(map(float, preds.sub_boxes[i])),
            int(obj_l[i]), float(obj_s[i]), tuple(map(float, preds.obj_boxes[i])),
            int(prd_l[i]), float(prd_s[i]), float(sub_s[i] * prd_s[i] * obj_s[i]),
            int(i), tuple(map(float, pp[i])),
        ))
    out.sort(key=lambda t: -t.score)
    return out


def triplet_match(pred: RankedTriplet, gts: TripletTargets, j: int, entity_iou_thresh: float = ENTITY_IOU) -> bool:
    """All three labels equal and both boxes overlap GT ``j`` by at least the threshold."""
    if pred.sub_label != gts.sub_labels[j] or pred.obj_label != gts.obj_labels[j] or pred.prd_label != gts.prd_labels[j]:
        return False
    return (
        pairwise_iou(pred.sub_box, gts.sub_boxes[j])[0, 0] >= entity_iou_thresh
        and pairwise_iou(pred.obj_box, gts.obj_boxes[j])[0, 0] >= entity_iou_thresh
    )


def _match_table(cands: Sequence[RankedTriplet], gts: TripletTargets, thresh: float) -> np.ndarray:
    """(n_cand, n_gt) boolean table of triplet_match, vectorized."""
    n, g = len(cands), len(gts)
    if n == 0 or g == 0:
        return np.zeros((n, g), dtype=bool)
    sl = np.array([c.sub_label for c in cands])
    ol = np.array([c.obj_label for c in cands])
    pl = np.array([c.prd_label for c in cands])
    sb = np.array([c.sub_box for c in cands])
    ob = np.array([c.obj_box for c in cands])
    labels = (sl[:, None] == gts.sub_labels[None]) & (ol[:, None] == gts.obj_labels[None]) & (pl[:, None] == gts.prd_labels[None])
    return labels & (pairwise_iou(sb, gts.sub_boxes) >= thresh) & (pairwise_iou(ob, gts.obj_boxes) >= thresh)


def _greedy(table: np.ndarray) -> np.ndarray:
    """Walk candidates in order; each takes the lowest-index free GT it matches."""
    hit = np.zeros(table.shape[1], dtype=bool)
    for row in table:
        free = row & ~hit
        if free.any():
            hit[int(np.argmax(free))] = True
    return hit


def no_graph_candidates(ranked: Sequence[RankedTriplet], k: int) -> list[RankedTriplet]:
    """The top-k slots, each expanded to one candidate per predicate class, re-ranked.

    Taking the same k slots as the graph-constrained list keeps the graph
    candidates a subset of these, so no-graph recall never falls below it.
    """
    cands = []
    for rank, t in enumerate(ranked[:k]):
        for c, pc in enumerate(t.prd_scores):
            cands.append((-(t.sub_score * pc * t.obj_score), rank, c, t))
    cands.sort(key=lambda x: x[:3])
    return [
        RankedTriplet(t.sub_label, t.sub_score, t.sub_box, t.obj_label, t.obj_score, t.obj_box, c, t.prd_scores[c], -neg, t.slot, t.prd_scores)
        for neg, _, c, t in cands
    ]


def matched_gt(ranked: Sequence[RankedTriplet], gts: TripletTargets, k: int, mode: str = "graph",
               entity_iou_thresh: float = ENTITY_IOU) -> np.ndarray:
    """Boolean mask over GT triplets recovered within the top-k."""
    if k <= 0:
        raise ValueError(f"K must be positive, got {k}")
    if mode == "graph":
        cands = list(ranked[:k])
    elif mode == "no-graph":
        cands = no_graph_candidates(ranked, k)
    else:
        raise ValueError(f"mode must be 'graph' or 'no-graph', got {mode!r}")
    return _greedy(_match_table(cands, gts, entity_iou_thresh))


def recall_at_k(ranked: Sequence[RankedTriplet], gts: TripletTargets, k: int, mode: str = "graph",
                entity_iou_thresh: float = ENTITY_IOU) -> float:
    if len(gts) == 0:
        raise ValueError("recall is undefined for a scene without ground-truth triplets")
    return float(matched_gt(ranked, gts, k, mode, entity_iou_thresh).sum() / len(gts))


def _mean(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def _per_scene_masks(ranked_per_scene, gts_per_scene, k, mode, thresh):
    return [matched_gt(r, g, k, mode, thresh) if len(g) else np.zeros(0, dtype=bool) for r, g in zip(ranked_per_scene, gts_per_scene)]


def corpus_recall(masks: list[np.ndarray], select: list[np.ndarray] | None = None) -> float | None:
    """Mean over scenes of the recalled fraction of (selected) GT triplets."""
    vals = []
    for i, m in enumerate(masks):
        sel = np.ones(len(m), dtype=bool) if select is None else select[i]
        if sel.any():
            vals.append(m[sel].sum() / sel.sum())
    return _mean(vals)


def per_predicate_recall(masks, gts_per_scene, num_predicates: int) -> dict[int, float]:
    out = {}
    for c in range(num_predicates):
        r = corpus_recall(masks, [g.prd_labels == c for g in gts_per_scene])
        if r is not None:
            out[c] = r
    return out


def mean_recall(ranked_per_scene, gts_per_scene, k: int, num_predicates: int, mode: str = "graph",
                entity_iou_thresh: float = ENTITY_IOU) -> float | None:
    masks = _per_scene_masks(ranked_per_scene, gts_per_scene, k, mode, entity_iou_thresh)
    per = per_predicate_recall(masks, gts_per_scene, num_predicates)
    return _mean(list(per.values()))


def zero_shot_select(gts_per_scene, holdout: Iterable[tuple[int, int, int]]) -> list[np.ndarray]:
    hold = set(map(tuple, holdout))
    return [np.array([(int(s), int(p), int(o)) in hold for s, p, o in zip(g.sub_labels, g.prd_labels, g.obj_labels)], dtype=bool)
            for g in gts_per_scene]


def zero_shot_recall(ranked_per_scene, gts_per_scene, k: int, holdout, mode: str = "graph",
                     entity_iou_thresh: float = ENTITY_IOU) -> float | None:
    """Recall over GT triplets whose type is held out of training; None when there are none."""
    masks = _per_scene_masks(ranked_per_scene, gts_per_scene, k, mode, entity_iou_thresh)
    return corpus_recall(masks, zero_shot_select(gts_per_scene, holdout))


def group_recall(per_predicate: dict[int, float], groups: dict[str, list[int]]) -> dict[str, float | None]:
    return {name: _mean([per_predicate[c] for c in members if c in per_predicate]) for name, members in groups.items()}


# ---------------------------------------------------------------------------
# Weighted mAP
# ---------------------------------------------------------------------------


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """All-point interpolated AP from a score-sorted TP indicator list."""
    if num_gt == 0:
        raise ValueError("AP needs at least one ground-truth instance")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _phrase_table(cands: Sequence[RankedTriplet], gts: TripletTargets, thresh: float) -> np.ndarray:
    n, g = len(cands), len(gts)
    if n == 0 or g == 0:
        return np.zeros((n, g), dtype=bool)
    sl = np.array([c.sub_label for c in cands])
    ol = np.array([c.obj_label for c in cands])
    pl = np.array([c.prd_label for c in cands])
    ub = union_box(np.array([c.sub_box for c in cands]), np.array([c.obj_box for c in cands]))
    gub = union_box(gts.sub_boxes, gts.obj_boxes)
    labels = (sl[:, None] == gts.sub_labels[None]) & (ol[:, None] == gts.obj_labels[None]) & (pl[:, None] == gts.prd_labels[None])
    return labels & (pairwise_iou(ub, gub) >= thresh)


def class_ap(ranked_per_scene, gts_per_scene, predicate: int, phrase: bool = False,
             entity_iou_thresh: float = ENTITY_IOU) -> float | None:
    """AP for one predicate class over the corpus; None if it has no GT."""
    num_gt = int(sum((g.prd_labels == predicate).sum() for g in gts_per_scene))
    if num_gt == 0:
        return None
    dets = []
    tables = []
    for si, (ranked, gts) in enumerate(zip(ranked_per_scene, gts_per_scene)):
        mine = [t for t in ranked if t.prd_label == predicate]
        table = (_phrase_table if phrase else _match_table)(mine, gts, entity_iou_thresh)
        tables.append(table)
        dets += [(-t.score, si, r) for r, t in enumerate(mine)]
    dets.sort()
    used = [np.zeros(len(g), dtype=bool) for g in gts_per_scene]
    tp = np.zeros(len(dets))
    for i, (_, si, r) in enumerate(dets):
        free = tables[si][r] & ~used[si]
        if free.any():
            used[si][int(np.argmax(free))] = True
            tp[i] = 1.0
    return average_precision(tp, num_gt)


def weighted_map(ranked_per_scene, gts_per_scene, num_predicates: int,
                 entity_iou_thresh: float = ENTITY_IOU) -> tuple[float, float]:
    """(wmAP_rel, wmAP_phr): per-predicate APs weighted by GT frequency."""
    counts = np.zeros(num_predicates)
    for g in gts_per_scene:
        counts += np.bincount(g.prd_labels, minlength=num_predicates)[:num_predicates]
    if counts.sum() == 0:
        raise ValueError("weighted mAP needs ground-truth triplets")
    weights = counts / counts.sum()
    rel = phr = 0.0
    for c in np.flatnonzero(counts):
        rel += weights[c] * class_ap(ranked_per_scene, gts_per_scene, int(c), False, entity_iou_thresh)
        phr += weights[c] * class_ap(ranked_per_scene, gts_per_scene, int(c), True, entity_iou_thresh)
    return float(rel), float(phr)


def score_wtd(recall_50: float, wmap_rel: float, wmap_phr: float) -> float:
    return 0.2 * recall_50 + 0.4 * wmap_rel + 0.4 * wmap_phr


# ---------------------------------------------------------------------------
# GT substitution (PredCLS / SGCLS)
# ---------------------------------------------------------------------------


def substitute_ground_truth(preds: TripletSet, gts: TripletTargets, mode: str) -> TripletSet:
    """Give Hungarian-matched slots the GT boxes (sgcls) or boxes and labels (predcls)."""
    if mode not in ("predcls", "sgcls"):
        raise ValueError(f"mode must be 'predcls' or 'sgcls', got {mode!r}")
    out = preds.copy()
    if len(gts) == 0:
        return out
    slots = hungarian(triplet_cost_matrix(preds, gts))
    out.sub_boxes[slots] = gts.sub_boxes
    out.obj_boxes[slots] = gts.obj_boxes
    if mode == "predcls":
        for logits, labels in ((out.sub_logits, gts.sub_labels), (out.obj_logits, gts.obj_labels)):
            logits[slots] = SATURATED
            logits[slots, labels] = 0.0
    return out


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    recall: dict[int, float | None] = field(default_factory=dict)
    mean_recall: dict[int, float | None] = field(default_factory=dict)
    zero_shot_recall: dict[int, float | None] = field(default_factory=dict)
    ng_recall: dict[int, float | None] = field(default_factory=dict)
    ng_zero_shot_recall: dict[int, float | None] = field(default_factory=dict)
    per_predicate_recall: dict[int, float] = field(default_factory=dict)
    group_mean_recall: dict[str, float | None] = field(default_factory=dict)
    wmap_rel: float | None = None
    wmap_phr: float | None = None
    score_wtd: float | None = None

    def to_dict(self) -> dict:
        def keyed(d, prefix):
            return {f"{prefix}@{k}": v for k, v in d.items()}

        return {
            **keyed(self.recall, "R"),
            **keyed(self.mean_recall, "mR"),
            **keyed(self.zero_shot_recall, "zsR"),
            **keyed(self.ng_recall, "ng-R"),
            **keyed(self.ng_zero_shot_recall, "ng-zsR"),
            "per_predicate_R@100": {str(k): v for k, v in self.per_predicate_recall.items()},
            "group_mR@100": self.group_mean_recall,
            "wmAP_rel": self.wmap_rel,
            "wmAP_phr": self.wmap_phr,
            "score_wtd": self.score_wtd,
        }


def evaluate(
    ranked_per_scene: list[list[RankedTriplet]],
    gts_per_scene: list[TripletTargets],
    num_predicates: int,
    holdout: Iterable[tuple[int, int, int]] = (),
    groups: dict[str, list[int]] | None = None,
    entity_iou_thresh: float = ENTITY_IOU,
) -> MetricReport:
    holdout = list(holdout)
    zs = zero_shot_select(gts_per_scene, holdout)
    rep = MetricReport()
    masks = {}
    for mode in ("graph", "no-graph"):
        for k in (20, 50, 100):
            masks[mode, k] = _per_scene_masks(ranked_per_scene, gts_per_scene, k, mode, entity_iou_thresh)
    for k in (20, 50, 100):
        rep.recall[k] = corpus_recall(masks["graph", k])
        rep.mean_recall[k] = _mean(list(per_predicate_recall(masks["graph", k], gts_per_scene, num_predicates).values()))
    for k in (50, 100):
        rep.zero_shot_recall[k] = corpus_recall(masks["graph", k], zs) if holdout else None
        rep.ng_recall[k] = corpus_recall(masks["no-graph", k])
        rep.ng_zero_shot_recall[k] = corpus_recall(masks["no-graph", k], zs) if holdout else None
    rep.per_predicate_recall = per_predicate_recall(masks["graph", 100], gts_per_scene, num_predicates)
    if groups:
        rep.group_mean_recall = group_recall(rep.per_predicate_recall, groups)
    if any(len(g) for g in gts_per_scene):
        rep.wmap_rel, rep.wmap_phr = weighted_map(ranked_per_scene, gts_per_scene, num_predicates, entity_iou_thresh)
        if rep.recall[50] is not None:
            rep.score_wtd = score_wtd(rep.recall[50], rep.wmap_rel, rep.wmap_phr)
    return rep


# ---------------------------------------------------------------------------
# Prediction dumps
# ---------------------------------------------------------------------------


def write_predictions(path: str, scene_ids: list[str], ranked_per_scene: list[list[RankedTriplet]]) -> None:
    tmp = path + ".tmp"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(tmp, "w", encoding="utf-8") as fh:
        for sid, ranked in zip(scene_ids, ranked_per_scene):
            fh.write(json.dumps({"scene_id": sid, "ranked": [t.to_dict() for t in ranked]}, sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_predictions(path: str) -> tuple[list[str], list[list[RankedTriplet]]]:
    ids, ranked = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ids.append(str(rec["scene_id"]))
                ranked.append([RankedTriplet.from_dict(t) for t in rec["ranked"]])
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed prediction record ({exc})") from exc
    return ids, ranked
