"""The relation transformer: stem, feature encoder, entity decoder, triplet
decoder (coupled self-attention, decoupled visual and entity attention) and
the prediction heads.

Parameters live in one flat ``dict[str, Tensor]`` keyed by dotted names, so
optimizers, checkpoints and gradient checks can treat them uniformly.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable

import numpy as np

from . import numerics as nx
from .attention import AttentionParams, att_block
from .numerics import ShapeError, Tensor
from .structures import EntitySet, TripletSet

ABLATIONS = ("csa", "dva", "dea", "mask")


@dataclass
class ModelConfig:
    model_dim: int = 64
    heads: int = 4
    encoder_layers: int = 3
    decoder_layers: int = 3
    num_entity_queries: int = 12
    num_triplet_queries: int = 16
    num_entity_classes: int = 10
    num_predicate_classes: int = 8
    dropout: float = 0.1
    mask_resolution: int = 28
    image_size: int = 32
    ffn_dim: int = 128
    stem_channels: tuple[int, int] = (16, 32)
    spatial_dim: int = 128
    disabled: tuple[str, ...] = ()
    dea_wiring: str = "aligned"  # or "final": every triplet layer reads the last entity layer

    def __post_init__(self):
        self.stem_channels = tuple(self.stem_channels)
        self.disabled = tuple(sorted(set(self.disabled)))
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} must be divisible by heads {self.heads}")
        if self.model_dim % 4:
            raise ValueError("model_dim must be divisible by 4 for the 2-D positional encoding")
        if self.num_triplet_queries < 1 or self.num_entity_queries < 1:
            raise ValueError("query counts must be positive")
        if self.decoder_layers < 1:
            raise ValueError("need at least one decoder layer")
        if self.image_size % 4:
            raise ValueError(f"image_size {self.image_size} must be divisible by 4")
        unknown = set(self.disabled) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablation(s) {sorted(unknown)}; choose from {ABLATIONS}")
        if self.dea_wiring not in ("aligned", "final"):
            raise ValueError(f"dea_wiring must be 'aligned' or 'final', got {self.dea_wiring!r}")
        if self.mask_resolution != 28:
            raise ValueError("the mask head is built for 28x28 heat maps")

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        base = dict(
            model_dim=256, heads=8, encoder_layers=6, decoder_layers=6,
            num_entity_queries=100, num_triplet_queries=200, ffn_dim=2048,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size // 4, self.image_size // 4

    def enabled(self, module: str) -> bool:
        return module not in self.disabled

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stem_channels"] = list(self.stem_channels)
        d["disabled"] = list(self.disabled)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# Parameter initialization
# ---------------------------------------------------------------------------


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return nx.parameter(rng.uniform(-bound, bound, size=shape))


def _zeros(*shape):
    return nx.parameter(np.zeros(shape))


def _linear_params(params, prefix, rng, fan_in, fan_out):
    params[f"{prefix}.w"] = _uniform(rng, fan_in, (fan_in, fan_out))
    params[f"{prefix}.b"] = _zeros(fan_out)


def _attention_params(params, prefix, rng, d):
    a = AttentionParams.init(d, 1, rng)
    for k, t in a.tensors().items():
        params[f"{prefix}.{k}"] = t


def _ffn_params(params, prefix, rng, d, hidden):
    _linear_params(params, f"{prefix}.l1", rng, d, hidden)
    _linear_params(params, f"{prefix}.l2", rng, hidden, d)
    params[f"{prefix}.ln_gain"] = nx.parameter(np.ones(d))
    params[f"{prefix}.ln_bias"] = _zeros(d)


def _mlp_params(params, prefix, rng, dims):
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        _linear_params(params, f"{prefix}.{i}", rng, a, b)


def _conv_params(params, prefix, rng, c_in, c_out, k):
    params[f"{prefix}.w"] = _uniform(rng, c_in * k * k, (c_out, c_in, k, k))
    params[f"{prefix}.b"] = _zeros(c_out)


MASK_CONVS = ((2, 8, 5, 2, 2), (8, 16, 3, 2, 1), (16, 8, 3, 2, 1))  # c_in, c_out, kernel, stride, pad


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d = cfg.model_dim
    p: dict[str, Tensor] = {}
    c1, c2 = cfg.stem_channels
    _conv_params(p, "stem.conv1", rng, 3, c1, 3)
    _conv_params(p, "stem.conv2", rng, c1, c2, 3)
    _linear_params(p, "stem.proj", rng, c2, d)

    for i in range(cfg.encoder_layers):
        _attention_params(p, f"encoder.{i}.attn", rng, d)
        _ffn_params(p, f"encoder.{i}.ffn", rng, d, cfg.ffn_dim)

    p["entity.query_pos"] = nx.parameter(rng.normal(0.0, 1.0, size=(cfg.num_entity_queries, d)))
    for i in range(cfg.decoder_layers):
        _attention_params(p, f"entity.{i}.self", rng, d)
        _attention_params(p, f"entity.{i}.cross", rng, d)
        _ffn_params(p, f"entity.{i}.ffn", rng, d, cfg.ffn_dim)

    nt = cfg.num_triplet_queries
    p["triplet.query_sub"] = nx.parameter(rng.normal(0.0, 0.02, size=(nt, d)))
    p["triplet.query_obj"] = nx.parameter(rng.normal(0.0, 0.02, size=(nt, d)))
    p["triplet.enc_triplet"] = nx.parameter(rng.normal(0.0, 1.0, size=(nt, d)))
    p["triplet.enc_sub"] = nx.parameter(rng.normal(0.0, 1.0, size=(d,)))
    p["triplet.enc_obj"] = nx.parameter(rng.normal(0.0, 1.0, size=(d,)))
    for i in range(cfg.decoder_layers):
        _attention_params(p, f"triplet.{i}.csa", rng, d)
        for br in ("sub", "obj"):
            _attention_params(p, f"triplet.{i}.dva_{br}", rng, d)
            _attention_params(p, f"triplet.{i}.dea_{br}", rng, d)
            _ffn_params(p, f"triplet.{i}.ffn_{br}", rng, d, cfg.ffn_dim)

    ce, cp = cfg.num_entity_classes + 1, cfg.num_predicate_classes + 1
    _linear_params(p, "head.entity_cls", rng, d, ce)
    _mlp_params(p, "head.entity_box", rng, (d, d, d, 4))
    for br in ("sub", "obj"):
        _linear_params(p, f"head.{br}_cls", rng, d, ce)
        _mlp_params(p, f"head.{br}_box", rng, (d, d, d, 4))
    for i, (ci, co, k, _, _) in enumerate(MASK_CONVS):
        _conv_params(p, f"head.mask.{i}", rng, ci, co, k)
    _mlp_params(p, "head.predicate", rng, (2 * d + cfg.spatial_dim, d, d, cp))
    for name, t in p.items():
        t.name = name
    return p


def _att(params: dict[str, Tensor], prefix: str, cfg: ModelConfig) -> AttentionParams:
    return AttentionParams(
        *(params[f"{prefix}.{k}"] for k in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o", "ln_gain", "ln_bias")),
        heads=cfg.heads,
        dropout_rate=cfg.dropout,
    )


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


@dataclass
class Ctx:
    """Per-forward settings threaded through the blocks."""

    cfg: ModelConfig
    params: dict[str, Tensor]
    training: bool = False
    rng: np.random.Generator | None = None

    def att(self, prefix: str) -> AttentionParams:
        return _att(self.params, prefix, self.cfg)


def _ffn(x: Tensor, ctx: Ctx, prefix: str) -> Tensor:
    p = ctx.params
    h = nx.relu(nx.linear(x, p[f"{prefix}.l1.w"], p[f"{prefix}.l1.b"]))
    h = nx.linear(h, p[f"{prefix}.l2.w"], p[f"{prefix}.l2.b"])
    h = nx.dropout(h, ctx.cfg.dropout, ctx.rng, ctx.training)
    return nx.layer_norm(nx.add(x, h), p[f"{prefix}.ln_gain"], p[f"{prefix}.ln_bias"])


def _mlp(x: Tensor, params: dict[str, Tensor], prefix: str, layers: int) -> Tensor:
    for i in range(layers):
        x = nx.linear(x, params[f"{prefix}.{i}.w"], params[f"{prefix}.{i}.b"])
        if i < layers - 1:
            x = nx.relu(x)
    return x


def stem_forward(image, params: dict[str, Tensor], cfg: ModelConfig | None = None) -> Tensor:
    """Two stride-2 conv+relu stages and a 1x1 projection; returns (H, W, d)."""
    img = image if isinstance(image, Tensor) else nx.tensor(image)
    if img.data.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"image must be (3, IH, IW), got {img.shape}")
    _, ih, iw = img.shape
    if ih % 4 or iw % 4:
        raise ShapeError(f"image extents {ih}x{iw} must be divisible by 4")
    x = nx.reshape(img, (1, 3, ih, iw))
    x = nx.relu(nx.conv2d(x, params["stem.conv1.w"], params["stem.conv1.b"], stride=2, padding=1))
    x = nx.relu(nx.conv2d(x, params["stem.conv2.w"], params["stem.conv2.b"], stride=2, padding=1))
    c = x.shape[1]
    h, w = ih // 4, iw // 4
    x = nx.reshape(nx.transpose(x, (0, 2, 3, 1)), (h, w, c))
    return nx.linear(x, params["stem.proj.w"], params["stem.proj.b"])


@lru_cache(maxsize=32)
def _positional_encoding_cached(h: int, w: int, d: int) -> np.ndarray:
    quarter = d // 4
    freqs = 10000.0 ** (-np.arange(quarter) * 2.0 / (d // 2))

    def encode(pos):
        ang = pos[:, None] * freqs[None, :]
        out = np.empty((len(pos), d // 2))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    rows = encode(np.arange(h, dtype=np.float64))
    cols = encode(np.arange(w, dtype=np.float64))
    pe = np.concatenate([np.repeat(rows, w, axis=0), np.tile(cols, (h, 1))], axis=1)
    pe.setflags(write=False)
    return pe


def positional_encoding(h: int, w: int, d: int) -> Tensor:
    """Fixed 2-D sinusoidal encoding, (H*W, d).

    Channels ``[0, d/2)`` encode the row index, ``[d/2, d)`` the column
    index; within each half, even channels are sines and odd channels
    cosines of geometrically spaced frequencies (base 10000).
    """
    if d % 4:
        raise ValueError(f"positional encoding needs d divisible by 4, got {d}")
    return nx.tensor(_positional_encoding_cached(h, w, d).copy())


def encoder_forward(z0: Tensor, pos: Tensor, ctx: Ctx) -> Tensor:
    if z0.shape != pos.shape:
        raise ShapeError(f"features {z0.shape} and positional encoding {pos.shape} differ")
    z = z0
    for i in range(ctx.cfg.encoder_layers):
        qk = nx.add(z, pos)
        z, _ = att_block(qk, qk, z, z, ctx.att(f"encoder.{i}.attn"), ctx.training, ctx.rng)
        z = _ffn(z, ctx, f"encoder.{i}.ffn")
    return z


def entity_decoder_forward(z: Tensor, pos: Tensor, ctx: Ctx) -> list[Tensor]:
    """Returns each decoder layer's (N_e, d) entity representations."""
    cfg, p = ctx.cfg, ctx.params
    query_pos = p["entity.query_pos"]
    tgt = nx.tensor(np.zeros((cfg.num_entity_queries, cfg.model_dim)))
    keys = nx.add(z, pos)
    outs = []
    for i in range(cfg.decoder_layers):
        q = nx.add(tgt, query_pos)
        tgt, _ = att_block(q, q, tgt, tgt, ctx.att(f"entity.{i}.self"), ctx.training, ctx.rng)
        tgt, _ = att_block(nx.add(tgt, query_pos), keys, z, tgt, ctx.att(f"entity.{i}.cross"), ctx.training, ctx.rng)
        tgt = _ffn(tgt, ctx, f"entity.{i}.ffn")
        outs.append(tgt)
    return outs


def csa(q_sub: Tensor, q_obj: Tensor, enc_sub: Tensor, enc_obj: Tensor, enc_triplet: Tensor, params: AttentionParams,
        training: bool = False, rng=None) -> tuple[Tensor, Tensor]:
    """Coupled self-attention over the 2*N_t stacked subject/object rows."""
    nt = q_sub.shape[0]
    if q_obj.shape != q_sub.shape or enc_triplet.shape != q_sub.shape:
        raise ShapeError(f"CSA inputs disagree: {q_sub.shape}, {q_obj.shape}, {enc_triplet.shape}")
    qk = nx.concat([nx.add(nx.add(q_sub, enc_sub), enc_triplet), nx.add(nx.add(q_obj, enc_obj), enc_triplet)], axis=0)
    values = nx.concat([q_sub, q_obj], axis=0)
    out, _ = att_block(qk, qk, values, values, params, training, rng)
    return nx.take(out, slice(0, nt)), nx.take(out, slice(nt, 2 * nt))


def dva(q_x: Tensor, enc_triplet: Tensor, z: Tensor, pos: Tensor, params: AttentionParams,
        training: bool = False, rng=None) -> tuple[Tensor, Tensor]:
    """Decoupled visual attention for one branch; returns (Q_x', heat maps (N_t, HW))."""
    if z.shape != pos.shape:
        raise ShapeError(f"features {z.shape} and positional encoding {pos.shape} differ")
    return att_block(nx.add(q_x, enc_triplet), nx.add(z, pos), z, q_x, params, training, rng)


def dea(q_x: Tensor, enc_triplet: Tensor, q_entity: Tensor, params: AttentionParams,
        training: bool = False, rng=None) -> Tensor:
    """Decoupled entity attention for one branch."""
    out, _ = att_block(nx.add(q_x, enc_triplet), q_entity, q_entity, q_x, params, training, rng)
    return out


@dataclass
class DecoderLayerOutput:
    q_sub: Tensor
    q_obj: Tensor
    heat_sub: Tensor  # (N_t, HW)
    heat_obj: Tensor


def triplet_decoder_forward(z: Tensor, pos: Tensor, entity_layers: list[Tensor], ctx: Ctx) -> list[DecoderLayerOutput]:
    cfg, p = ctx.cfg, ctx.params
    if len(entity_layers) != cfg.decoder_layers:
        raise ShapeError(f"expected {cfg.decoder_layers} entity decoder layers, got {len(entity_layers)}")
    q_sub, q_obj = p["triplet.query_sub"], p["triplet.query_obj"]
    enc_t, enc_s, enc_o = p["triplet.enc_triplet"], p["triplet.enc_sub"], p["triplet.enc_obj"]
    hw = z.shape[0]
    uniform = nx.tensor(np.full((cfg.num_triplet_queries, hw), 1.0 / hw))
    outs = []
    for i in range(cfg.decoder_layers):
        if cfg.enabled("csa"):
            q_sub, q_obj = csa(q_sub, q_obj, enc_s, enc_o, enc_t, ctx.att(f"triplet.{i}.csa"), ctx.training, ctx.rng)
        if cfg.enabled("dva"):
            q_sub, heat_s = dva(q_sub, enc_t, z, pos, ctx.att(f"triplet.{i}.dva_sub"), ctx.training, ctx.rng)
            q_obj, heat_o = dva(q_obj, enc_t, z, pos, ctx.att(f"triplet.{i}.dva_obj"), ctx.training, ctx.rng)
        else:
            heat_s = heat_o = uniform
        if cfg.enabled("dea"):
            q_e = entity_layers[i] if cfg.dea_wiring == "aligned" else entity_layers[-1]
            q_sub = dea(q_sub, enc_t, q_e, ctx.att(f"triplet.{i}.dea_sub"), ctx.training, ctx.rng)
            q_obj = dea(q_obj, enc_t, q_e, ctx.att(f"triplet.{i}.dea_obj"), ctx.training, ctx.rng)
        q_sub = _ffn(q_sub, ctx, f"triplet.{i}.ffn_sub")
        q_obj = _ffn(q_obj, ctx, f"triplet.{i}.ffn_obj")
        outs.append(DecoderLayerOutput(q_sub, q_obj, heat_s, heat_o))
    return outs


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) half-pixel-centred linear interpolation weights."""
    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        src = min(max((o + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[o, i0] += 1.0 - t
        m[o, i1] += t
    return m


@lru_cache(maxsize=16)
def resize_matrix(h: int, w: int, size: int) -> np.ndarray:
    """(H*W, size*size) matrix mapping a flattened H x W map to its bilinear resize."""
    r = np.kron(_bilinear_matrix(h, size), _bilinear_matrix(w, size)).T.copy()
    r.setflags(write=False)
    return r


def mask_head(heat_sub: Tensor, heat_obj: Tensor, params: dict[str, Tensor], grid: tuple[int, int], size: int = 28) -> Tensor:
    """Resize both heat maps to size x size, stack as 2 channels, convolve, flatten.

    Inputs are (N_t, H*W); output is (N_t, spatial_dim).
    """
    h, w = grid
    n = heat_sub.shape[0]
    r = nx.tensor(resize_matrix(h, w, size))
    s = nx.reshape(nx.matmul(heat_sub, r), (n, 1, size, size))
    o = nx.reshape(nx.matmul(heat_obj, r), (n, 1, size, size))
    x = nx.concat([s, o], axis=1)
    for i, (_, _, _, stride, pad) in enumerate(MASK_CONVS):
        x = nx.conv2d(x, params[f"head.mask.{i}.w"], params[f"head.mask.{i}.b"], stride=stride, padding=pad)
        if i < len(MASK_CONVS) - 1:
            x = nx.relu(x)
    return nx.reshape(x, (n, x.size // n))


@dataclass
class TripletHeads:
    """Per-layer triplet predictions as Tensors (gradients flow through these)."""

    sub_logits: Tensor
    sub_boxes: Tensor
    obj_logits: Tensor
    obj_boxes: Tensor
    prd_logits: Tensor
    heat_sub: Tensor
    heat_obj: Tensor

    def numpy(self, grid: tuple[int, int] | None = None) -> TripletSet:
        n = self.prd_logits.shape[0]
        hs, ho = self.heat_sub.data, self.heat_obj.data
        if grid is not None:
            hs, ho = hs.reshape(n, *grid), ho.reshape(n, *grid)
        return TripletSet(
            self.sub_logits.data.copy(), self.sub_boxes.data.copy(),
            self.obj_logits.data.copy(), self.obj_boxes.data.copy(),
            self.prd_logits.data.copy(), hs.copy(), ho.copy(),
        )


@dataclass
class EntityHeads:
    logits: Tensor
    boxes: Tensor

    def numpy(self) -> EntitySet:
        return EntitySet(self.logits.data.copy(), self.boxes.data.copy())


def entity_heads_forward(q_e: Tensor, params: dict[str, Tensor]) -> EntityHeads:
    logits = nx.linear(q_e, params["head.entity_cls.w"], params["head.entity_cls.b"])
    boxes = nx.sigmoid(_mlp(q_e, params, "head.entity_box", 3))
    return EntityHeads(logits, boxes)


def heads_forward(layer: DecoderLayerOutput, params: dict[str, Tensor], cfg: ModelConfig) -> TripletHeads:
    q_s, q_o = layer.q_sub, layer.q_obj
    sub_logits = nx.linear(q_s, params["head.sub_cls.w"], params["head.sub_cls.b"])
    obj_logits = nx.linear(q_o, params["head.obj_cls.w"], params["head.obj_cls.b"])
    sub_boxes = nx.sigmoid(_mlp(q_s, params, "head.sub_box", 3))
    obj_boxes = nx.sigmoid(_mlp(q_o, params, "head.obj_box", 3))
    if cfg.enabled("mask"):
        spatial = mask_head(layer.heat_sub, layer.heat_obj, params, cfg.grid, cfg.mask_resolution)
        feats = nx.concat([q_s, q_o, spatial], axis=1)
        prd_logits = _mlp(feats, params, "head.predicate", 3)
    else:
        # drop the spatial block: only the first 2d input rows of the first layer are used
        w0 = nx.take(params["head.predicate.0.w"], slice(0, 2 * cfg.model_dim))
        h = nx.relu(nx.linear(nx.concat([q_s, q_o], axis=1), w0, params["head.predicate.0.b"]))
        h = nx.relu(nx.linear(h, params["head.predicate.1.w"], params["head.predicate.1.b"]))
        prd_logits = nx.linear(h, params["head.predicate.2.w"], params["head.predicate.2.b"])
    return TripletHeads(sub_logits, sub_boxes, obj_logits, obj_boxes, prd_logits, layer.heat_sub, layer.heat_obj)


@dataclass
class ModelOutput:
    entities: list[EntityHeads]
    triplets: list[TripletHeads]

    @property
    def final_triplets(self) -> TripletHeads:
        return self.triplets[-1]


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class RelationTransformer:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "RelationTransformer":
        return cls(config, init_params(config, seed))

    def parameters(self) -> Iterable[Tensor]:
        return self.params.values()

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def forward(self, image, training: bool = False, rng: np.random.Generator | None = None) -> ModelOutput:
        cfg = self.config
        ctx = Ctx(cfg, self.params, training, rng)
        feat = stem_forward(image, self.params, cfg)
        h, w, d = feat.shape
        if (h, w) != cfg.grid:
            raise ShapeError(f"image gives a {h}x{w} grid but the config expects {cfg.grid}")
        z0 = nx.reshape(feat, (h * w, d))
        pos = positional_encoding(h, w, d)
        z = encoder_forward(z0, pos, ctx)
        entity_layers = entity_decoder_forward(z, pos, ctx)
        layers = triplet_decoder_forward(z, pos, entity_layers, ctx)
        return ModelOutput(
            [entity_heads_forward(q, self.params) for q in entity_layers],
            [heads_forward(layer, self.params, cfg) for layer in layers],
        )

    __call__ = forward

    def predict(self, image) -> TripletSet:
        """Eval-mode final-layer triplet predictions as numpy arrays."""
        with nx.no_tape():
            out = self.forward(image, training=False)
        return out.final_triplets.numpy(self.config.grid)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"DESKSGG-CKPT 1\n"


def _atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str, config: ModelConfig, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write config, metadata and named float64 arrays to one file.

    Layout: magic line, one JSON header line, then each array's raw
    little-endian float64 bytes in header order.
    """
    names = list(arrays)
    header = {
        "config": config.to_dict(),
        "meta": meta or {},
        "arrays": [[n, list(np.shape(arrays[n]))] for n in names],
    }
    parts = [_MAGIC, json.dumps(header, sort_keys=True).encode("utf-8"), b"\n"]
    for n in names:
        parts.append(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())
    _atomic_write(path, b"".join(parts))


def load_checkpoint(path: str) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    end = blob.find(b"\n", len(_MAGIC))
    try:
        header = json.loads(blob[len(_MAGIC):end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from exc
    offset = end + 1
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated while reading {name}")
        arrays[name] = np.frombuffer(blob[offset:offset + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return ModelConfig.from_dict(header["config"]), arrays, header["meta"]


def save_model(path: str, model: RelationTransformer, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
    arrays = {f"param/{k}": t.data for k, t in model.params.items()}
    for k, v in (extra or {}).items():
        arrays[f"extra/{k}"] = v
    save_checkpoint(path, model.config, arrays, meta)


def load_model(path: str) -> tuple[RelationTransformer, dict[str, np.ndarray], dict]:
    cfg, arrays, meta = load_checkpoint(path)
    params = {}
    extra = {}
    for k, v in arrays.items():
        kind, _, name = k.partition("/")
        if kind == "param":
            params[name] = nx.parameter(v.copy(), name=name)
        else:
            extra[name] = v
    expected = set(init_params(cfg, 0))
    if set(params) != expected:
        missing, unexpected = expected - set(params), set(params) - expected
        raise ValueError(f"{path}: parameter mismatch, missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
    return RelationTransformer(cfg, params), extra, meta
