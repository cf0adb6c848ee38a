"""Brute-force scene-graph metrics, written from the definitions with plain loops.

Shares nothing with ``desksgg.evaluation`` beyond the RankedTriplet record.
Corpus recall is the per-scene mean; mR averages per-predicate recalls over
predicates present in GT, each itself a per-scene mean.
"""

from __future__ import annotations

import math


def iou(a, b):
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def union(a, b):
    x0 = min(a[0] - a[2] / 2, b[0] - b[2] / 2)
    y0 = min(a[1] - a[3] / 2, b[1] - b[3] / 2)
    x1 = max(a[0] + a[2] / 2, b[0] + b[2] / 2)
    y1 = max(a[1] + a[3] / 2, b[1] + b[3] / 2)
    return ((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def gt_rows(g):
    return [
        (int(g.sub_labels[j]), tuple(g.sub_boxes[j]), int(g.prd_labels[j]), int(g.obj_labels[j]), tuple(g.obj_boxes[j]))
        for j in range(len(g))
    ]


def hits(c, row, phrase=False):
    sl, sb, pl, ol, ob = row
    if (c.sub_label, c.prd_label, c.obj_label) != (sl, pl, ol):
        return False
    if phrase:
        return iou(union(c.sub_box, c.obj_box), union(sb, ob)) >= 0.5
    return iou(c.sub_box, sb) >= 0.5 and iou(c.obj_box, ob) >= 0.5


def expand(ranked, k):
    """Top-k slots, one candidate per predicate class each, re-ranked."""
    out = []
    for rank, t in enumerate(ranked[:k]):
        for c, pc in enumerate(t.prd_scores):
            out.append((t.sub_score * pc * t.obj_score, rank, c, t))
    out.sort(key=lambda x: (-x[0], x[1], x[2]))
    return [(c, t) for _, _, c, t in out]


class Cand:
    def __init__(self, t, prd_label=None):
        self.sub_label, self.sub_box = t.sub_label, t.sub_box
        self.obj_label, self.obj_box = t.obj_label, t.obj_box
        self.prd_label = t.prd_label if prd_label is None else prd_label


def recalled(ranked, g, k, no_graph=False):
    """Set of GT indices consumed by a greedy walk down the top-k."""
    cands = [Cand(t, c) for c, t in expand(ranked, k)] if no_graph else [Cand(t) for t in ranked[:k]]
    rows = gt_rows(g)
    taken = set()
    for c in cands:
        for j, row in enumerate(rows):
            if j not in taken and hits(c, row):
                taken.add(j)
                break
    return taken


def corpus_recall(ranked_all, gts_all, k, no_graph=False, keep=lambda row: True):
    per_scene = []
    for ranked, g in zip(ranked_all, gts_all):
        rows = gt_rows(g)
        chosen = [j for j, row in enumerate(rows) if keep(row)]
        if not chosen:
            continue
        got = recalled(ranked, g, k, no_graph)
        per_scene.append(sum(1 for j in chosen if j in got) / len(chosen))
    return sum(per_scene) / len(per_scene) if per_scene else None


def mean_recall(ranked_all, gts_all, k, num_predicates):
    vals = []
    for p in range(num_predicates):
        r = corpus_recall(ranked_all, gts_all, k, keep=lambda row, p=p: row[2] == p)
        if r is not None:
            vals.append(r)
    return sum(vals) / len(vals) if vals else None


def zero_shot_recall(ranked_all, gts_all, k, holdout, no_graph=False):
    hold = {tuple(h) for h in holdout}
    return corpus_recall(ranked_all, gts_all, k, no_graph, keep=lambda row: (row[0], row[2], row[3]) in hold)


def ap_for(ranked_all, gts_all, p, phrase):
    num_gt = sum(1 for g in gts_all for row in gt_rows(g) if row[2] == p)
    if num_gt == 0:
        return None
    dets = [(t.score, si, r, t) for si, ranked in enumerate(ranked_all) for r, t in enumerate([t for t in ranked if t.prd_label == p])]
    dets.sort(key=lambda d: (-d[0], d[1], d[2]))
    taken = [set() for _ in gts_all]
    flags = []
    for _, si, _, t in dets:
        tp = 0
        for j, row in enumerate(gt_rows(gts_all[si])):
            if j not in taken[si] and hits(t, row, phrase):
                taken[si].add(j)
                tp = 1
                break
        flags.append(tp)
    # every TP raises recall by 1/num_gt; it contributes the best precision at or after it
    precisions = [sum(flags[: i + 1]) / (i + 1) for i in range(len(flags))]
    return sum(max(precisions[i:]) / num_gt for i, f in enumerate(flags) if f)


def weighted_map(ranked_all, gts_all, num_predicates):
    counts = [sum(1 for g in gts_all for row in gt_rows(g) if row[2] == p) for p in range(num_predicates)]
    total = sum(counts)
    rel = sum(counts[p] / total * ap_for(ranked_all, gts_all, p, False) for p in range(num_predicates) if counts[p])
    phr = sum(counts[p] / total * ap_for(ranked_all, gts_all, p, True) for p in range(num_predicates) if counts[p])
    return rel, phr


def close(a, b, tol=1e-12):
    if a is None or b is None:
        return a is None and b is None
    return math.isclose(a, b, rel_tol=0, abs_tol=tol)
