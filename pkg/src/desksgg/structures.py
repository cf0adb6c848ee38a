"""Plain data records shared by the model, matching, loss and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Entity:
    class_id: int
    box: tuple[float, float, float, float]  # cx, cy, w, h
    color: int = 0


@dataclass(frozen=True)
class Triplet:
    subject: int  # entity index
    predicate: int
    object: int


@dataclass
class GroundTruthScene:
    image: np.ndarray  # (3, IH, IW) in [0, 1]
    entities: list[Entity]
    triplets: list[Triplet]
    scene_id: str = ""

    def __post_init__(self):
        n = len(self.entities)
        seen = set()
        for t in self.triplets:
            if not (0 <= t.subject < n and 0 <= t.object < n):
                raise ValueError(f"triplet {t} references a missing entity (scene has {n})")
            if t.subject == t.object:
                raise ValueError(f"triplet {t} relates an entity to itself")
            if t in seen:
                raise ValueError(f"duplicate triplet {t}")
            seen.add(t)

    def entity_labels(self) -> np.ndarray:
        return np.array([e.class_id for e in self.entities], dtype=np.int64)

    def entity_boxes(self) -> np.ndarray:
        return np.array([e.box for e in self.entities], dtype=np.float64).reshape(-1, 4)

    def targets(self) -> "TripletTargets":
        return TripletTargets.from_scene(self)


@dataclass
class TripletTargets:
    """Ground-truth triplets flattened into parallel arrays."""

    sub_labels: np.ndarray
    sub_boxes: np.ndarray
    prd_labels: np.ndarray
    obj_labels: np.ndarray
    obj_boxes: np.ndarray

    def __len__(self) -> int:
        return len(self.prd_labels)

    @classmethod
    def from_scene(cls, scene: GroundTruthScene) -> "TripletTargets":
        labels, boxes = scene.entity_labels(), scene.entity_boxes()
        s = np.array([t.subject for t in scene.triplets], dtype=np.int64)
        o = np.array([t.object for t in scene.triplets], dtype=np.int64)
        p = np.array([t.predicate for t in scene.triplets], dtype=np.int64)
        return cls(labels[s], boxes[s].reshape(-1, 4), p, labels[o], boxes[o].reshape(-1, 4))

    @classmethod
    def from_arrays(cls, rows) -> "TripletTargets":
        """Build from an iterable of (sub_label, sub_box, prd, obj_label, obj_box)."""
        rows = list(rows)
        return cls(
            np.array([r[0] for r in rows], dtype=np.int64),
            np.array([r[1] for r in rows], dtype=np.float64).reshape(-1, 4),
            np.array([r[2] for r in rows], dtype=np.int64),
            np.array([r[3] for r in rows], dtype=np.int64),
            np.array([r[4] for r in rows], dtype=np.float64).reshape(-1, 4),
        )


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class TripletSet:
    """N_t triplet predictions as numpy arrays.

    Class axes include a trailing background / no-relation column.
    """

    sub_logits: np.ndarray
    sub_boxes: np.ndarray
    obj_logits: np.ndarray
    obj_boxes: np.ndarray
    prd_logits: np.ndarray
    sub_heatmaps: np.ndarray | None = None
    obj_heatmaps: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.prd_logits)

    @property
    def num_entity_classes(self) -> int:
        return self.sub_logits.shape[1] - 1

    @property
    def num_predicate_classes(self) -> int:
        return self.prd_logits.shape[1] - 1

    def probs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return softmax_np(self.sub_logits), softmax_np(self.obj_logits), softmax_np(self.prd_logits)

    def permute(self, perm) -> "TripletSet":
        perm = np.asarray(perm)

        def pick(a):
            return None if a is None else a[perm]

        return TripletSet(
            self.sub_logits[perm],
            self.sub_boxes[perm],
            self.obj_logits[perm],
            self.obj_boxes[perm],
            self.prd_logits[perm],
            pick(self.sub_heatmaps),
            pick(self.obj_heatmaps),
        )

    def copy(self) -> "TripletSet":
        return TripletSet(
            *(None if a is None else a.copy() for a in (
                self.sub_logits, self.sub_boxes, self.obj_logits, self.obj_boxes,
                self.prd_logits, self.sub_heatmaps, self.obj_heatmaps,
            ))
        )


@dataclass
class EntitySet:
    logits: np.ndarray  # (N_e, C_e + 1)
    boxes: np.ndarray  # (N_e, 4)

    def __len__(self) -> int:
        return len(self.logits)


@dataclass
class AssignmentResult:
    """Prediction <-> ground-truth assignment for one scene.

    ``pred_for_gt[j]`` is the prediction slot matched to GT triplet ``j``.
    Unmatched slots carry background / no-relation targets; their
    ``theta_sub`` / ``theta_obj`` flags may be 0, which removes that branch
    from the loss.
    """

    pred_for_gt: np.ndarray
    matched: np.ndarray  # bool per slot
    sub_labels: np.ndarray
    sub_boxes: np.ndarray
    obj_labels: np.ndarray
    obj_boxes: np.ndarray
    prd_labels: np.ndarray
    theta_sub: np.ndarray
    theta_obj: np.ndarray
    gt_for_pred: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
