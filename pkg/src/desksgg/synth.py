"""Procedural scenes with exact relation ground truth.

Entities are axis-aligned coloured shapes (5 shapes x 2 sizes = 10 classes).
Relations come from fixed geometric rules over the entity boxes, then get
thinned per predicate so the corpus follows a geometric long-tail profile.

Rules for subject ``a`` and object ``b`` (boxes as corners x0, y0, x1, y1):

* ``left_of``       a.x1 < b.x0
* ``above``         a.y1 < b.y0
* ``larger_than``   area(a) > 2 * area(b)
* ``overlapping``   boxes intersect with positive area and neither contains the other
* ``same_color_as`` equal colour index
* ``touching``      zero intersection area and Euclidean box distance at most 0.03
* ``inside``        a lies strictly within b
* ``surrounds``     b lies strictly within a
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .structures import Entity, GroundTruthScene, Triplet

SHAPES = ("square", "circle", "triangle", "diamond", "cross")
SIZES = ("small", "large")
PREDICATES = ("left_of", "above", "larger_than", "overlapping", "same_color_as", "touching", "inside", "surrounds")
COLORS = ((0.9, 0.15, 0.1), (0.1, 0.8, 0.25), (0.2, 0.35, 0.95), (0.95, 0.85, 0.1))
BACKGROUND = (0.05, 0.05, 0.05)

TOUCH_GAP = 0.03
LARGER_RATIO = 2.0
SIZE_RANGES = {0: (0.14, 0.24), 1: (0.32, 0.5)}
MAX_ATTEMPTS = 100
SPLIT_CODES = {"train": 0, "val": 1, "test": 2, "calibration": 9}


class SceneGenerationError(RuntimeError):
    pass


class CorpusFormatError(ValueError):
    pass


def class_name(class_id: int) -> str:
    return f"{SIZES[class_id % 2]}_{SHAPES[class_id // 2]}"


@dataclass
class CorpusConfig:
    num_entity_classes: int = 10
    num_predicate_classes: int = 8
    image_size: int = 32
    train_scenes: int = 500
    val_scenes: int = 50
    test_scenes: int = 100
    min_entities: int = 2
    max_entities: int = 6
    max_triplets: int = 8
    mean_triplets: float = 4.0
    decay: float = 0.55
    holdout: list[tuple[int, int, int]] = field(default_factory=lambda: [(0, 0, 3), (5, 1, 2), (3, 4, 9)])
    seed: int = 0

    def __post_init__(self):
        self.holdout = [tuple(int(v) for v in h) for h in self.holdout]
        if self.num_entity_classes != len(SHAPES) * len(SIZES):
            raise ValueError(f"the generator draws {len(SHAPES) * len(SIZES)} entity classes")
        if self.num_predicate_classes != len(PREDICATES):
            raise ValueError(f"the generator defines {len(PREDICATES)} predicates")
        if self.image_size % 4:
            raise ValueError("image_size must be divisible by 4")
        if not 2 <= self.min_entities <= self.max_entities:
            raise ValueError("need 2 <= min_entities <= max_entities")
        if not 0 < self.decay < 1:
            raise ValueError("decay must lie in (0, 1)")
        for s, p, o in self.holdout:
            if not (0 <= s < self.num_entity_classes and 0 <= o < self.num_entity_classes and 0 <= p < self.num_predicate_classes):
                raise ValueError(f"holdout type {(s, p, o)} out of range")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["holdout"] = [list(h) for h in self.holdout]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown corpus config keys: {sorted(unknown)}")
        return cls(**d)

    def key(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# ---------------------------------------------------------------------------
# Geometry rules
# ---------------------------------------------------------------------------


def _corners(box):
    cx, cy, w, h = box
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def _inter_area(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    return max(0.0, min(ax1, bx1) - max(ax0, bx0)) * max(0.0, min(ay1, by1) - max(ay0, by0))


def _strictly_within(a, b) -> bool:
    return a[0] > b[0] and a[1] > b[1] and a[2] < b[2] and a[3] < b[3]


def _gap(a, b) -> float:
    dx = max(0.0, b[0] - a[2], a[0] - b[2])
    dy = max(0.0, b[1] - a[3], a[1] - b[3])
    return float(np.hypot(dx, dy))


def _area(c) -> float:
    return (c[2] - c[0]) * (c[3] - c[1])


def relation_holds(predicate: int, a: Entity, b: Entity) -> bool:
    ca, cb = _corners(a.box), _corners(b.box)
    name = PREDICATES[predicate]
    if name == "left_of":
        return ca[2] < cb[0]
    if name == "above":
        return ca[3] < cb[1]
    if name == "larger_than":
        return _area(ca) > LARGER_RATIO * _area(cb)
    if name == "overlapping":
        return _inter_area(ca, cb) > 0 and not _contains(ca, cb) and not _contains(cb, ca)
    if name == "same_color_as":
        return a.color == b.color
    if name == "touching":
        return _inter_area(ca, cb) == 0 and _gap(ca, cb) <= TOUCH_GAP
    if name == "inside":
        return _strictly_within(ca, cb)
    if name == "surrounds":
        return _strictly_within(cb, ca)
    raise ValueError(f"unknown predicate {predicate}")


def _contains(a, b) -> bool:
    """Non-strict containment of b in a."""
    return a[0] <= b[0] and a[1] <= b[1] and a[2] >= b[2] and a[3] >= b[3]


def derive_relations(entities: list[Entity]) -> list[Triplet]:
    """Every (subject, predicate, object) for which a rule holds, in (s, o, p) order."""
    if len(entities) < 2:
        raise ValueError("need at least two entities")
    out = []
    for s, a in enumerate(entities):
        for o, b in enumerate(entities):
            if s == o:
                continue
            for p in range(len(PREDICATES)):
                if relation_holds(p, a, b):
                    out.append(Triplet(s, p, o))
    return out


# ---------------------------------------------------------------------------
# Sampling and rasterization
# ---------------------------------------------------------------------------


def _shape_mask(shape: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    name = SHAPES[shape]
    if name == "square":
        return np.ones_like(u, dtype=bool)
    if name == "circle":
        return (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    if name == "triangle":
        return np.abs(u - 0.5) <= v / 2
    if name == "diamond":
        return np.abs(u - 0.5) + np.abs(v - 0.5) <= 0.5
    return (np.abs(u - 0.5) <= 1 / 6) | (np.abs(v - 0.5) <= 1 / 6)


def rasterize(entities: list[Entity], size: int) -> np.ndarray:
    """Paint entities largest-first so nested ones stay visible; float32-exact values."""
    img = np.empty((3, size, size))
    img[:] = np.array(BACKGROUND)[:, None, None]
    centers = (np.arange(size) + 0.5) / size
    ys, xs = np.meshgrid(centers, centers, indexing="ij")
    order = sorted(range(len(entities)), key=lambda i: (-entities[i].box[2] * entities[i].box[3], i))
    for i in order:
        e = entities[i]
        x0, y0, x1, y1 = _corners(e.box)
        inside = (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
        u = (xs - x0) / e.box[2]
        v = (ys - y0) / e.box[3]
        mask = inside & _shape_mask(e.class_id // 2, u, v)
        img[:, mask] = np.array(COLORS[e.color])[:, None]
    return img.astype(np.float32).astype(np.float64)


def _round_box(cx, cy, w, h):
    return tuple(float(np.float32(v)) for v in (cx, cy, w, h))


def _place(rng: np.random.Generator, size_class: int, existing: list[Entity]) -> tuple | None:
    lo, hi = SIZE_RANGES[size_class]
    w, h = rng.uniform(lo, hi, size=2)
    mode = rng.random()
    if existing and mode < 0.25 and size_class == 0:
        hosts = [e for e in existing if e.class_id % 2 == 1 and e.box[2] > w + 0.04 and e.box[3] > h + 0.04]
        if hosts:
            host = hosts[rng.integers(len(hosts))]
            hx0, hy0, hx1, hy1 = _corners(host.box)
            cx = rng.uniform(hx0 + w / 2 + 0.01, hx1 - w / 2 - 0.01)
            cy = rng.uniform(hy0 + h / 2 + 0.01, hy1 - h / 2 - 0.01)
            return _round_box(cx, cy, w, h)
    if existing and mode > 0.7:
        nb = existing[rng.integers(len(existing))]
        nx0, ny0, nx1, ny1 = _corners(nb.box)
        gap = rng.uniform(0.002, TOUCH_GAP * 0.9)
        side = rng.integers(4)
        if side == 0:
            cx, cy = nx1 + gap + w / 2, rng.uniform(ny0, ny1)
        elif side == 1:
            cx, cy = nx0 - gap - w / 2, rng.uniform(ny0, ny1)
        elif side == 2:
            cx, cy = rng.uniform(nx0, nx1), ny1 + gap + h / 2
        else:
            cx, cy = rng.uniform(nx0, nx1), ny0 - gap - h / 2
        return _round_box(cx, cy, w, h)
    return _round_box(rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h)


def _valid_layout(entities: list[Entity]) -> bool:
    """Inside the frame, no near-duplicates, no heavy partial occlusion."""
    for e in entities:
        x0, y0, x1, y1 = _corners(e.box)
        if x0 < 0 or y0 < 0 or x1 > 1 or y1 > 1:
            return False
    for i, a in enumerate(entities):
        ca = _corners(a.box)
        for b in entities[i + 1:]:
            cb = _corners(b.box)
            if abs(a.box[0] - b.box[0]) < 0.05 and abs(a.box[1] - b.box[1]) < 0.05:
                return False
            if _strictly_within(ca, cb) or _strictly_within(cb, ca):
                continue
            inter = _inter_area(ca, cb)
            if inter > 0.35 * min(_area(ca), _area(cb)):
                return False
    return True


def _sample_entities(rng: np.random.Generator, cfg: CorpusConfig) -> list[Entity] | None:
    n = int(rng.integers(cfg.min_entities, cfg.max_entities + 1))
    # large entities first so small ones can nest inside them
    size_classes = sorted((int(rng.integers(2)) for _ in range(n)), reverse=True)
    entities: list[Entity] = []
    for sc in size_classes:
        for _ in range(20):
            box = _place(rng, sc, entities)
            cand = Entity(int(rng.integers(len(SHAPES))) * 2 + sc, box, int(rng.integers(len(COLORS))))
            if _valid_layout(entities + [cand]):
                entities.append(cand)
                break
        else:
            return None
    order = rng.permutation(len(entities))
    return [entities[i] for i in order]


@lru_cache(maxsize=8)
def _keep_probabilities(cfg_key: str) -> tuple[float, ...]:
    """Per-predicate thinning so expected counts follow decay**rank.

    Calibrated on a fixed batch of scenes drawn from the config's own seed.
    """
    cfg = CorpusConfig.from_dict(json.loads(cfg_key))
    counts = np.zeros(cfg.num_predicate_classes)
    n_scenes = 400
    for i in range(n_scenes):
        rng = np.random.default_rng([cfg.seed, SPLIT_CODES["calibration"], i])
        ents = None
        while ents is None:
            ents = _sample_entities(rng, cfg)
        for t in derive_relations(ents):
            counts[t.predicate] += 1
    natural = counts / n_scenes
    profile = cfg.decay ** np.arange(cfg.num_predicate_classes)
    if np.any(natural <= 0):
        raise SceneGenerationError(f"calibration found no instances of predicates {np.flatnonzero(natural <= 0).tolist()}")
    scale = min(np.min(natural / profile), cfg.mean_triplets / profile.sum())
    return tuple(float(v) for v in np.minimum(1.0, scale * profile / natural))


def keep_probabilities(cfg: CorpusConfig) -> np.ndarray:
    return np.array(_keep_probabilities(cfg.key()))


def generate_scene(seed: int, cfg: CorpusConfig, split: str = "train", exclude_holdout: bool | None = None) -> GroundTruthScene:
    """One scene, a pure function of (cfg.seed, split, seed)."""
    if exclude_holdout is None:
        exclude_holdout = split == "train"
    keep = keep_probabilities(cfg)
    holdout = set(cfg.holdout)
    rng = np.random.default_rng([cfg.seed, SPLIT_CODES[split], seed])
    for _ in range(MAX_ATTEMPTS):
        entities = _sample_entities(rng, cfg)
        if entities is None:
            continue
        candidates = derive_relations(entities)
        kept = [t for t in candidates if rng.random() < keep[t.predicate]]
        if len(kept) > cfg.max_triplets:
            idx = np.sort(rng.choice(len(kept), size=cfg.max_triplets, replace=False))
            kept = [kept[i] for i in idx]
        if not kept:
            continue
        if exclude_holdout and any((entities[t.subject].class_id, t.predicate, entities[t.object].class_id) in holdout for t in kept):
            continue
        return GroundTruthScene(rasterize(entities, cfg.image_size), entities, kept, scene_id=f"{split}-{seed:06d}")
    raise SceneGenerationError(f"could not satisfy layout/holdout constraints for {split} scene {seed} in {MAX_ATTEMPTS} attempts")


def generate_split(cfg: CorpusConfig, split: str, count: int | None = None) -> list[GroundTruthScene]:
    if count is None:
        count = {"train": cfg.train_scenes, "val": cfg.val_scenes, "test": cfg.test_scenes}[split]
    return [generate_scene(i, cfg, split) for i in range(count)]


def triplet_type(scene: GroundTruthScene, t: Triplet) -> tuple[int, int, int]:
    return scene.entities[t.subject].class_id, t.predicate, scene.entities[t.object].class_id


def predicate_histogram(scenes: list[GroundTruthScene], num_predicates: int = len(PREDICATES)) -> np.ndarray:
    hist = np.zeros(num_predicates, dtype=np.int64)
    for s in scenes:
        for t in s.triplets:
            hist[t.predicate] += 1
    return hist


def frequency_groups(hist: np.ndarray, head_frac: float = 0.3, tail_frac: float = 0.03) -> dict[str, list[int]]:
    """Split predicates by training frequency share into head / body / tail.

    A predicate is head when it holds more than ``head_frac`` of all
    training triplets, tail when it holds less than ``tail_frac``.
    """
    share = hist / max(hist.sum(), 1)
    groups = {"head": [], "body": [], "tail": []}
    for p, s in enumerate(share):
        groups["head" if s > head_frac else "tail" if s < tail_frac else "body"].append(p)
    return groups


# ---------------------------------------------------------------------------
# Corpus files
# ---------------------------------------------------------------------------


def _image_dir(path: str) -> str:
    stem = os.path.splitext(os.path.basename(path))[0]
    return os.path.join(os.path.dirname(os.path.abspath(path)), f"{stem}_images")


def write_image(path: str, image: np.ndarray) -> None:
    c, ih, iw = image.shape
    if c != 3:
        raise ValueError(f"images must have 3 channels, got {c}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", ih, iw))
        fh.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_image(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise CorpusFormatError(f"{path}: missing image header")
    ih, iw = struct.unpack("<II", blob[:8])
    expected = 8 + 4 * 3 * ih * iw
    if len(blob) != expected:
        raise CorpusFormatError(f"{path}: expected {expected} bytes for a 3x{ih}x{iw} image, found {len(blob)}")
    return np.frombuffer(blob[8:], dtype="<f4").astype(np.float64).reshape(3, ih, iw)


def scene_record(scene: GroundTruthScene, image_ref: str) -> dict:
    return {
        "scene_id": scene.scene_id,
        "image_ref": image_ref,
        "entities": [{"class_id": e.class_id, "box": list(e.box), "color": e.color} for e in scene.entities],
        "triplets": [[t.subject, t.predicate, t.object] for t in scene.triplets],
    }


def write_corpus(scenes: list[GroundTruthScene], path: str) -> None:
    """One JSON record per line; images go to ``<stem>_images/`` beside the file."""
    img_dir = _image_dir(path)
    if scenes:
        os.makedirs(img_dir, exist_ok=True)
    lines = []
    for i, scene in enumerate(scenes):
        name = f"{i:06d}.f32"
        write_image(os.path.join(img_dir, name), scene.image)
        ref = f"{os.path.basename(img_dir)}/{name}"
        lines.append(json.dumps(scene_record(scene, ref), sort_keys=True))
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("".join(line + "\n" for line in lines))
    os.replace(tmp, path)


def read_corpus(path: str) -> list[GroundTruthScene]:
    base = os.path.dirname(os.path.abspath(path))
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                entities = [Entity(int(e["class_id"]), tuple(float(v) for v in e["box"]), int(e.get("color", 0))) for e in rec["entities"]]
                if any(len(e.box) != 4 for e in entities):
                    raise ValueError("boxes need 4 coordinates")
                triplets = [Triplet(int(s), int(p), int(o)) for s, p, o in rec["triplets"]]
                image = read_image(os.path.join(base, rec["image_ref"]))
                scenes.append(GroundTruthScene(image, entities, triplets, scene_id=str(rec.get("scene_id", ""))))
            except CorpusFormatError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: {exc}") from exc
            except (ValueError, KeyError, TypeError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed scene record ({exc})") from exc
    return scenes
