"""Set-prediction losses: entity loss, theta-gated triplet loss, total with auxiliaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .matching import GIOU_WEIGHT, L1_WEIGHT, assign_triplets, match_entities
from .model import EntityHeads, ModelOutput, TripletHeads
from .numerics import Tensor
from .structures import AssignmentResult, GroundTruthScene, TripletTargets

BACKGROUND_WEIGHT = 0.1

COMPONENTS = ("entity_cls", "entity_box", "sub_cls", "sub_box", "obj_cls", "obj_box", "prd_cls")


@dataclass
class LossBreakdown:
    """Float components (summed over decoder layers) plus the differentiable total."""

    components: dict[str, float]
    total: Tensor
    per_layer: list[dict[str, float]] = field(default_factory=list)

    @property
    def value(self) -> float:
        return float(self.total.data)

    def __getitem__(self, key: str) -> float:
        return self.value if key == "total" else self.components[key]

    def as_dict(self) -> dict[str, float]:
        return {**self.components, "total": self.value}


def _col(t: Tensor, i: int) -> Tensor:
    return nx.take(t, (slice(None), i))


def giou_loss_sum(pred: Tensor, target: np.ndarray) -> Tensor:
    """Sum over rows of 1 - GIoU(pred_i, target_i); boxes are (n, 4) cx, cy, w, h."""
    n = pred.shape[0]
    tgt = np.asarray(target, dtype=np.float64)
    cx, cy, w, h = (_col(pred, i) for i in range(4))
    px0, px1 = nx.sub(cx, nx.scale(w, 0.5)), nx.add(cx, nx.scale(w, 0.5))
    py0, py1 = nx.sub(cy, nx.scale(h, 0.5)), nx.add(cy, nx.scale(h, 0.5))
    tx0, tx1 = nx.tensor(tgt[:, 0] - tgt[:, 2] / 2), nx.tensor(tgt[:, 0] + tgt[:, 2] / 2)
    ty0, ty1 = nx.tensor(tgt[:, 1] - tgt[:, 3] / 2), nx.tensor(tgt[:, 1] + tgt[:, 3] / 2)
    iw = nx.relu(nx.sub(nx.minimum(px1, tx1), nx.maximum(px0, tx0)))
    ih = nx.relu(nx.sub(nx.minimum(py1, ty1), nx.maximum(py0, ty0)))
    inter = nx.mul(iw, ih)
    area_p = nx.mul(w, h)
    area_t = nx.tensor(tgt[:, 2] * tgt[:, 3])
    union = nx.sub(nx.add(area_p, area_t), inter)
    ew = nx.sub(nx.maximum(px1, tx1), nx.minimum(px0, tx0))
    eh = nx.sub(nx.maximum(py1, ty1), nx.minimum(py0, ty0))
    encl = nx.mul(ew, eh)
    giou = nx.sub(nx.div(inter, union), nx.div(nx.sub(encl, union), encl))
    return nx.sub(nx.tensor(np.full((), float(n))), nx.sum(giou))


def box_loss(pred_boxes: Tensor, slots: np.ndarray, targets: np.ndarray, num_boxes: int) -> tuple[Tensor | None, float]:
    """5 * L1 + 2 * (1 - GIoU), summed over the given slots and divided by ``num_boxes``."""
    if len(slots) == 0:
        return None, 0.0
    picked = nx.take(pred_boxes, np.asarray(slots))
    l1 = nx.sum(nx.absolute(nx.sub(picked, nx.tensor(targets))))
    gl = giou_loss_sum(picked, targets)
    total = nx.scale(nx.add(nx.scale(l1, L1_WEIGHT), nx.scale(gl, GIOU_WEIGHT)), 1.0 / max(num_boxes, 1))
    return total, float(total.data)


def weighted_ce(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> tuple[Tensor | None, float]:
    """Weighted-mean cross-entropy; rows with weight 0 get exactly zero gradient."""
    norm = weights.sum()
    if norm <= 0:
        return None, 0.0
    ce = nx.scale(nx.cross_entropy(logits, targets, weights), 1.0 / norm)
    return ce, float(ce.data)


def _class_weights(targets: np.ndarray, background: int, bg_weight: float) -> np.ndarray:
    return np.where(targets == background, bg_weight, 1.0)


def entity_loss(
    heads: EntityHeads, gt_labels: np.ndarray, gt_boxes: np.ndarray, bg_weight: float = BACKGROUND_WEIGHT
) -> tuple[dict[str, float], list[Tensor]]:
    """Hungarian-matched DETR-style loss for one entity decoder layer.

    Returns float components and the Tensor terms to be summed into the total.
    """
    preds = heads.numpy()
    background = heads.logits.shape[1] - 1
    slot_for_gt = match_entities(preds, gt_labels, gt_boxes)
    targets = np.full(len(preds), background, dtype=np.int64)
    targets[slot_for_gt] = gt_labels
    cls, cls_v = weighted_ce(heads.logits, targets, _class_weights(targets, background, bg_weight))
    box, box_v = box_loss(heads.boxes, slot_for_gt, np.asarray(gt_boxes).reshape(-1, 4), len(gt_labels))
    return {"entity_cls": cls_v, "entity_box": box_v}, [t for t in (cls, box) if t is not None]


def triplet_loss(
    heads: TripletHeads, assignment: AssignmentResult, bg_weight: float = BACKGROUND_WEIGHT
) -> tuple[dict[str, float], list[Tensor]]:
    """Subject and object losses gated per slot by theta, plus predicate cross-entropy."""
    bg_ent = heads.sub_logits.shape[1] - 1
    no_rel = heads.prd_logits.shape[1] - 1
    slots = assignment.pred_for_gt
    n_gt = len(slots)
    comps: dict[str, float] = {}
    terms: list[Tensor] = []
    for branch, logits, boxes, labels, tgt_boxes, theta in (
        ("sub", heads.sub_logits, heads.sub_boxes, assignment.sub_labels, assignment.sub_boxes, assignment.theta_sub),
        ("obj", heads.obj_logits, heads.obj_boxes, assignment.obj_labels, assignment.obj_boxes, assignment.theta_obj),
    ):
        w = theta * _class_weights(labels, bg_ent, bg_weight)
        cls, comps[f"{branch}_cls"] = weighted_ce(logits, labels, w)
        # matched slots always have theta = 1, so the box term needs no gate
        box, comps[f"{branch}_box"] = box_loss(boxes, slots, tgt_boxes[slots], n_gt)
        terms += [t for t in (cls, box) if t is not None]
    prd = assignment.prd_labels
    cls, comps["prd_cls"] = weighted_ce(heads.prd_logits, prd, _class_weights(prd, no_rel, bg_weight))
    if cls is not None:
        terms.append(cls)
    return comps, terms


def _sum_terms(terms: list[Tensor]) -> Tensor:
    total = nx.tensor(np.zeros(()))
    for t in terms:
        total = nx.add(total, t)
    return total


def layer_loss(
    entity_heads: EntityHeads,
    triplet_heads: TripletHeads,
    scene: GroundTruthScene,
    iou_threshold: float,
    bg_weight: float = BACKGROUND_WEIGHT,
    targets: TripletTargets | None = None,
) -> tuple[dict[str, float], list[Tensor], AssignmentResult]:
    targets = targets if targets is not None else scene.targets()
    ent_comps, ent_terms = entity_loss(entity_heads, scene.entity_labels(), scene.entity_boxes(), bg_weight)
    assignment = assign_triplets(triplet_heads.numpy(), targets, iou_threshold)
    tri_comps, tri_terms = triplet_loss(triplet_heads, assignment, bg_weight)
    return {**ent_comps, **tri_comps}, ent_terms + tri_terms, assignment


def total_loss(
    model_out: ModelOutput, scene: GroundTruthScene, iou_threshold: float = 0.7, bg_weight: float = BACKGROUND_WEIGHT
) -> LossBreakdown:
    """Final-layer loss plus equally weighted auxiliary losses of earlier layers."""
    targets = scene.targets()
    per_layer = []
    terms: list[Tensor] = []
    for ent, tri in zip(model_out.entities, model_out.triplets):
        comps, layer_terms, _ = layer_loss(ent, tri, scene, iou_threshold, bg_weight, targets)
        per_layer.append(comps)
        terms += layer_terms
    summed = {k: float(sum(layer[k] for layer in per_layer)) for k in COMPONENTS}
    return LossBreakdown(summed, _sum_terms(terms), per_layer)
