"""Matching costs, the Hungarian algorithm and IoU-relaxed triplet assignment."""

from __future__ import annotations

import math

import numpy as np

from .boxes import box_giou, box_l1, pairwise_giou, pairwise_iou, pairwise_l1
from .structures import AssignmentResult, EntitySet, TripletSet, TripletTargets, softmax_np

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
FOCAL_EPS = 1e-8
L1_WEIGHT = 5.0
GIOU_WEIGHT = 2.0


def class_cost(prob_of_target):
    """Focal-style matching cost c+ - c- for the target-class probability.

    Works on floats and numpy arrays alike.
    """
    p = np.asarray(prob_of_target, dtype=np.float64)
    pos = FOCAL_ALPHA * (1 - p) ** FOCAL_GAMMA * -np.log(p + FOCAL_EPS)
    neg = (1 - FOCAL_ALPHA) * p**FOCAL_GAMMA * -np.log(1 - p + FOCAL_EPS)
    out = pos - neg
    return float(out) if out.ndim == 0 else out


def entity_cost(logits, box, gt_class: int, gt_box=None) -> float:
    """c_m for one prediction: class cost plus, when the GT has a box, 5*L1 + 2*(1 - GIoU)."""
    p = softmax_np(np.asarray(logits, dtype=np.float64))[gt_class]
    cost = class_cost(p)
    if gt_box is not None:
        cost += L1_WEIGHT * box_l1(box, gt_box) + GIOU_WEIGHT * (1.0 - box_giou(box, gt_box))
    return cost


def predicate_cost(logits, gt_class: int) -> float:
    return entity_cost(logits, None, gt_class, None)


def triplet_cost(preds: TripletSet, slot: int, gts: TripletTargets, j: int) -> float:
    """Subject + object + predicate cost between prediction ``slot`` and GT ``j``."""
    return (
        entity_cost(preds.sub_logits[slot], preds.sub_boxes[slot], int(gts.sub_labels[j]), gts.sub_boxes[j])
        + entity_cost(preds.obj_logits[slot], preds.obj_boxes[slot], int(gts.obj_labels[j]), gts.obj_boxes[j])
        + predicate_cost(preds.prd_logits[slot], int(gts.prd_labels[j]))
    )


def _box_cost_matrix(pred_boxes: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    return L1_WEIGHT * pairwise_l1(pred_boxes, gt_boxes) + GIOU_WEIGHT * (1.0 - pairwise_giou(pred_boxes, gt_boxes))


def entity_cost_matrix(preds: EntitySet, gt_labels: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    probs = softmax_np(preds.logits)
    return class_cost(probs[:, gt_labels]) + _box_cost_matrix(preds.boxes, gt_boxes)


def triplet_cost_matrix(preds: TripletSet, gts: TripletTargets) -> np.ndarray:
    """(N_t, #gt) matrix of triplet costs."""
    ps, po, pp = preds.probs()
    return (
        class_cost(ps[:, gts.sub_labels]) + _box_cost_matrix(preds.sub_boxes, gts.sub_boxes)
        + class_cost(po[:, gts.obj_labels]) + _box_cost_matrix(preds.obj_boxes, gts.obj_boxes)
        + class_cost(pp[:, gts.prd_labels])
    )


def hungarian(cost) -> np.ndarray:
    """Minimum-cost assignment of every column to a distinct row.

    ``cost`` is (rows, cols) with rows >= cols.  Returns an int array of
    length ``cols`` holding the chosen row for each column.  Shortest
    augmenting paths with dual potentials, O(cols^2 * rows); among equal
    reduced costs the lowest row index wins.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix contains non-finite entries")
    n_rows, n_cols = c.shape
    if n_cols > n_rows:
        raise ValueError(f"need at least as many rows as columns, got {n_rows} rows for {n_cols} columns")
    if n_cols == 0:
        return np.zeros(0, dtype=np.int64)

    # columns are the "workers" being assigned, rows the "jobs"; 1-based with a sentinel at 0
    a = c.T
    u = np.zeros(n_cols + 1)
    v = np.zeros(n_rows + 1)
    owner = np.zeros(n_rows + 1, dtype=np.int64)  # owner[row] = column (1-based), 0 = free
    way = np.zeros(n_rows + 1, dtype=np.int64)
    for i in range(1, n_cols + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n_rows + 1, math.inf)
        used = np.zeros(n_rows + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], math.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    result = np.empty(n_cols, dtype=np.int64)
    for row in range(1, n_rows + 1):
        if owner[row]:
            result[owner[row] - 1] = row - 1
    return result


def match_entities(preds: EntitySet, gt_labels: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    if len(preds) < len(gt_labels):
        raise ValueError(f"{len(preds)} entity queries cannot cover {len(gt_labels)} ground-truth entities")
    if len(gt_labels) == 0:
        return np.zeros(0, dtype=np.int64)
    return hungarian(entity_cost_matrix(preds, gt_labels, gt_boxes))


def assign_triplets(preds: TripletSet, gts: TripletTargets, iou_threshold: float) -> AssignmentResult:
    """Hungarian triplet assignment with the IoU relaxation for unmatched slots.

    An unmatched slot's subject (object) branch is switched off (theta = 0)
    when its argmax label equals the label of the GT subject (object) box it
    overlaps most and that IoU reaches ``iou_threshold``.  A threshold of 1
    disables the relaxation.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"IoU threshold must lie in (0, 1], got {iou_threshold}")
    n, g = len(preds), len(gts)
    if n < g:
        raise ValueError(f"{n} triplet queries cannot cover {g} ground-truth triplets; raise the query count")
    bg_ent = preds.num_entity_classes
    no_rel = preds.num_predicate_classes

    pred_for_gt = hungarian(triplet_cost_matrix(preds, gts)) if g else np.zeros(0, dtype=np.int64)
    matched = np.zeros(n, dtype=bool)
    matched[pred_for_gt] = True
    gt_for_pred = np.full(n, -1, dtype=np.int64)
    gt_for_pred[pred_for_gt] = np.arange(g)

    sub_labels = np.full(n, bg_ent, dtype=np.int64)
    obj_labels = np.full(n, bg_ent, dtype=np.int64)
    prd_labels = np.full(n, no_rel, dtype=np.int64)
    sub_boxes = np.zeros((n, 4))
    obj_boxes = np.zeros((n, 4))
    sub_labels[pred_for_gt] = gts.sub_labels
    obj_labels[pred_for_gt] = gts.obj_labels
    prd_labels[pred_for_gt] = gts.prd_labels
    sub_boxes[pred_for_gt] = gts.sub_boxes
    obj_boxes[pred_for_gt] = gts.obj_boxes

    theta_sub = np.ones(n)
    theta_obj = np.ones(n)
    if g and iou_threshold < 1.0:
        free = ~matched
        for pred_boxes, logits, gt_boxes, gt_labels, theta in (
            (preds.sub_boxes, preds.sub_logits, gts.sub_boxes, gts.sub_labels, theta_sub),
            (preds.obj_boxes, preds.obj_logits, gts.obj_boxes, gts.obj_labels, theta_obj),
        ):
            iou = pairwise_iou(pred_boxes, gt_boxes)
            best = np.argmax(iou, axis=1)
            best_iou = iou[np.arange(n), best]
            label_ok = np.argmax(logits, axis=1) == gt_labels[best]
            theta[free & label_ok & (best_iou >= iou_threshold)] = 0.0

    return AssignmentResult(
        pred_for_gt=pred_for_gt,
        matched=matched,
        sub_labels=sub_labels,
        sub_boxes=sub_boxes,
        obj_labels=obj_labels,
        obj_boxes=obj_boxes,
        prd_labels=prd_labels,
        theta_sub=theta_sub,
        theta_obj=theta_obj,
        gt_for_pred=gt_for_pred,
    )
