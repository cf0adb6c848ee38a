"""Hand-built prediction sets shared by several test modules."""

import numpy as np

from desksgg import numerics as nx
from desksgg.model import TripletHeads
from desksgg.structures import TripletSet, TripletTargets

C_E, C_P = 10, 8
GT_SUB = (1, (0.30, 0.50, 0.20, 0.40))
GT_OBJ = (3, (0.70, 0.50, 0.30, 0.30))
GT_PRD = 2


def peaked(label, n_classes, height=8.0):
    row = np.zeros(n_classes + 1)
    row[label] = height
    return row


def fig5_targets():
    return TripletTargets.from_arrays([(GT_SUB[0], GT_SUB[1], GT_PRD, GT_OBJ[0], GT_OBJ[1])])


def fig5_predictions():
    """Four proposals against one GT triplet.

    A: right labels, exact boxes (gets the Hungarian match).
    B: wrong labels, far boxes.
    C: right subject label on a box overlapping the GT subject (IoU 0.8), poor object.
    D: wrong subject label on the exact subject box, right object label at IoU ~0.9.
    """
    sub_box_c = (0.30 + 0.2 * 0.2 / 1.8, 0.50, 0.20, 0.40)
    obj_box_d = (0.70 + 0.3 / 19 * 0.5, 0.50, 0.30, 0.30)
    far = (0.9, 0.1, 0.1, 0.1)
    sub_labels = [GT_SUB[0], 5, GT_SUB[0], 4]
    obj_labels = [GT_OBJ[0], 6, 7, GT_OBJ[0]]
    sub_boxes = [GT_SUB[1], far, sub_box_c, GT_SUB[1]]
    obj_boxes = [GT_OBJ[1], far, far, obj_box_d]
    prd = [GT_PRD, 0, 1, 5]
    return TripletSet(
        np.array([peaked(c, C_E) for c in sub_labels]),
        np.array(sub_boxes, dtype=np.float64),
        np.array([peaked(c, C_E) for c in obj_labels]),
        np.array(obj_boxes, dtype=np.float64),
        np.array([peaked(c, C_P) for c in prd]),
    )


def heads_from(preds: TripletSet) -> TripletHeads:
    """Leaf parameter tensors wrapped as model heads, so loss gradients land on them."""
    n = len(preds)
    return TripletHeads(
        nx.parameter(preds.sub_logits.copy(), "sub_logits"),
        nx.parameter(preds.sub_boxes.copy(), "sub_boxes"),
        nx.parameter(preds.obj_logits.copy(), "obj_logits"),
        nx.parameter(preds.obj_boxes.copy(), "obj_boxes"),
        nx.parameter(preds.prd_logits.copy(), "prd_logits"),
        nx.tensor(np.full((n, 4), 0.25)),
        nx.tensor(np.full((n, 4), 0.25)),
    )


def random_boxes(rng, n, lo=0.05, hi=0.5):
    wh = rng.uniform(lo, hi, size=(n, 2))
    c = rng.uniform(wh / 2, 1 - wh / 2)
    return np.concatenate([c, wh], axis=1)


def random_triplet_set(rng, n, n_ent=C_E, n_prd=C_P, scale=3.0):
    return TripletSet(
        rng.normal(0, scale, (n, n_ent + 1)),
        random_boxes(rng, n),
        rng.normal(0, scale, (n, n_ent + 1)),
        random_boxes(rng, n),
        rng.normal(0, scale, (n, n_prd + 1)),
    )


def random_micro_corpus(rng, max_scenes=5, max_gt=6, n_ent=3, n_prd=3):
    """A few scenes with ranked predictions scattered around their GT.

    Small label spaces so labels collide often; box jitter straddles the
    0.5 IoU cut; repeated GT rows and duplicate predictions both occur.
    """
    from desksgg.evaluation import RankedTriplet

    ranked_all, gts_all = [], []
    for _ in range(int(rng.integers(1, max_scenes + 1))):
        n_gt = int(rng.integers(1, max_gt + 1))
        rows = []
        for _ in range(n_gt):
            if rows and rng.random() < 0.15:
                rows.append(rows[int(rng.integers(len(rows)))])
                continue
            sb, ob = random_boxes(rng, 2, 0.1, 0.4)
            rows.append((int(rng.integers(n_ent)), tuple(sb), int(rng.integers(n_prd)), int(rng.integers(n_ent)), tuple(ob)))
        preds = []
        for sl, sb, pl, ol, ob in rows:
            for _ in range(int(rng.integers(0, 3))):
                sb2 = np.array(sb) + rng.normal(0, 0.04, 4) * np.array([1, 1, 0.5, 0.5])
                ob2 = np.array(ob) + rng.normal(0, 0.04, 4) * np.array([1, 1, 0.5, 0.5])
                sl2 = sl if rng.random() < 0.8 else int(rng.integers(n_ent))
                ol2 = ol if rng.random() < 0.8 else int(rng.integers(n_ent))
                bias = np.zeros(n_prd)
                bias[pl] = rng.uniform(0, 2)
                preds.append((sl2, np.abs(sb2), ol2, np.abs(ob2), bias))
        for _ in range(int(rng.integers(0, 4))):
            sb, ob = random_boxes(rng, 2, 0.1, 0.4)
            preds.append((int(rng.integers(n_ent)), sb, int(rng.integers(n_ent)), ob, np.zeros(n_prd)))
        ranked = []
        for slot, (sl, sb, ol, ob, bias) in enumerate(preds):
            dist = rng.dirichlet(np.ones(n_prd)) + bias
            dist /= dist.sum()
            ss, os_ = rng.uniform(0.2, 1.0, 2)
            pl = int(np.argmax(dist))
            ranked.append(RankedTriplet(sl, float(ss), tuple(map(float, sb)), ol, float(os_), tuple(map(float, ob)),
                                        pl, float(dist[pl]), float(ss * dist[pl] * os_), slot, tuple(map(float, dist))))
        ranked.sort(key=lambda t: -t.score)
        ranked_all.append(ranked)
        gts_all.append(TripletTargets.from_arrays(rows))
    return ranked_all, gts_all
