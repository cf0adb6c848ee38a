"""Single-image-per-step training with decoupled weight decay Adam."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .loss import LossBreakdown, total_loss
from .model import ModelConfig, RelationTransformer, load_model, save_model
from .structures import GroundTruthScene
from .synth import CorpusConfig

log = logging.getLogger(__name__)


class NumericalFailure(RuntimeError):
    pass


@dataclass
class OptimConfig:
    lr: float = 1e-4
    lr_backbone: float = 1e-5
    weight_decay: float = 1e-4
    clip_norm: float = 0.1
    decay_at: float = 2 / 3  # fraction of total steps after which both rates drop x0.1
    decay_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    iou_threshold: float = 0.7
    steps: int = 2000
    checkpoint_every: int = 500
    seed: int = 0
    out_dir: str = "runs/default"
    data_dir: str = "data"

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must lie in (0, 1], got {self.iou_threshold}")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if os.path.abspath(self.out_dir) == os.path.abspath(self.data_dir):
            raise ValueError("out_dir and data_dir must differ")

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "corpus": self.corpus.to_dict(),
            "optim": dataclasses.asdict(self.optim),
            **{k: getattr(self, k) for k in ("iou_threshold", "steps", "checkpoint_every", "seed", "out_dir", "data_dir")},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        model = ModelConfig.from_dict(d.pop("model", {}))
        corpus = CorpusConfig.from_dict(d.pop("corpus", {}))
        optim_d = d.pop("optim", {})
        bad = set(optim_d) - {f.name for f in dataclasses.fields(OptimConfig)}
        if bad:
            raise ValueError(f"unknown optimizer keys: {sorted(bad)}")
        return cls(model=model, corpus=corpus, optim=OptimConfig(**optim_d), **d)


def is_backbone(name: str) -> bool:
    return name.startswith("stem.")


class AdamW:
    """Adam with decoupled weight decay and per-group step sizes."""

    def __init__(self, params: dict[str, nx.Tensor], cfg: OptimConfig, total_steps: int):
        self.params = params
        self.cfg = cfg
        self.total_steps = total_steps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step_count = 0

    def lr_for(self, name: str, step: int) -> float:
        base = self.cfg.lr_backbone if is_backbone(name) else self.cfg.lr
        if self.total_steps and step >= math.floor(self.cfg.decay_at * self.total_steps):
            base *= self.cfg.decay_factor
        return base

    def clip(self) -> float:
        """Scale all gradients so their joint L2 norm is at most clip_norm; returns the pre-clip norm."""
        sq = 0.0
        for p in self.params.values():
            if p.grad is not None:
                sq += float(np.sum(p.grad * p.grad))
        norm = math.sqrt(sq)
        if self.cfg.clip_norm > 0 and norm > self.cfg.clip_norm:
            factor = self.cfg.clip_norm / (norm + 1e-6)
            for p in self.params.values():
                if p.grad is not None:
                    p.grad *= factor
        return norm

    def step(self) -> None:
        c = self.cfg
        t = self.step_count + 1
        bc1 = 1 - c.beta1**t
        bc2 = 1 - c.beta2**t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            lr = self.lr_for(name, self.step_count)
            p.data *= 1 - lr * c.weight_decay
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
        self.step_count = t

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for k in self.params:
            self.m[k] = arrays[f"m/{k}"].copy()
            self.v[k] = arrays[f"v/{k}"].copy()
        self.step_count = step_count


def scene_order(seed: int, n: int, step: int) -> int:
    """Index of the scene used at ``step``: a fresh permutation each epoch."""
    epoch, pos = divmod(step, n)
    return int(np.random.default_rng([seed, 7, epoch]).permutation(n)[pos])


def train_step(model: RelationTransformer, opt: AdamW, scene: GroundTruthScene, iou_threshold: float,
               seed: int, step: int) -> tuple[LossBreakdown, float]:
    rng = np.random.default_rng([seed, 11, step])
    opt.zero_grad()
    with nx.Tape() as tape:
        out = model.forward(scene.image, training=True, rng=rng)
        loss = total_loss(out, scene, iou_threshold)
    if not np.isfinite(loss.value):
        raise NumericalFailure(f"non-finite loss at step {step}: {loss.as_dict()}")
    tape.backward(loss.total)
    norm = opt.clip()
    if not np.isfinite(norm):
        raise NumericalFailure(f"non-finite gradient norm at step {step}: {loss.as_dict()}")
    opt.step()
    return loss, norm


@dataclass
class TrainState:
    model: RelationTransformer
    opt: AdamW
    step: int = 0


def new_state(cfg: RunConfig) -> TrainState:
    model = RelationTransformer.create(cfg.model, seed=cfg.seed)
    return TrainState(model, AdamW(model.params, cfg.optim, cfg.steps))


def save_state(path: str, state: TrainState, cfg: RunConfig) -> None:
    save_model(path, state.model, extra=state.opt.state_arrays(), meta={"step": state.step, "run": cfg.to_dict()})


def load_state(path: str) -> tuple[TrainState, RunConfig]:
    model, extra, meta = load_model(path)
    cfg = RunConfig.from_dict(meta["run"]) if "run" in meta else RunConfig(model=model.config)
    opt = AdamW(model.params, cfg.optim, cfg.steps)
    if extra:
        opt.load_state(extra, int(meta.get("step", 0)))
    return TrainState(model, opt, int(meta.get("step", 0))), cfg


def train(
    cfg: RunConfig,
    scenes: list[GroundTruthScene],
    state: TrainState | None = None,
    steps: int | None = None,
    log_path: str | None = None,
    checkpoint_path: str | None = None,
    callback: Callable[[int, LossBreakdown], None] | None = None,
) -> tuple[TrainState, list[dict]]:
    """Run up to ``cfg.steps`` total steps (or ``steps`` more), returning the state and per-step log."""
    if not scenes:
        raise ValueError("training needs at least one scene")
    state = state or new_state(cfg)
    end = cfg.steps if steps is None else min(cfg.steps, state.step + steps)
    records: list[dict] = []
    log_fh = None
    if log_path:
        os.makedirs(os.path.dirname(os.path.abspath(log_path)), exist_ok=True)
        log_fh = open(log_path + ".tmp", "w", encoding="utf-8")
        log_fh.write(json.dumps({"header": True, "run": cfg.to_dict(), "disabled": list(cfg.model.disabled)}, sort_keys=True) + "\n")
    t0 = time.time()
    try:
        while state.step < end:
            scene = scenes[scene_order(cfg.seed, len(scenes), state.step)]
            loss, norm = train_step(state.model, state.opt, scene, cfg.iou_threshold, cfg.seed, state.step)
            rec = {"step": state.step, **loss.as_dict(), "grad_norm": norm}
            records.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if callback:
                callback(state.step, loss)
            state.step += 1
            if checkpoint_path and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_state(checkpoint_path, state, cfg)
            if state.step % 100 == 0:
                log.info("step %d loss %.4f (%.1fs)", state.step, loss.value, time.time() - t0)
    finally:
        if log_fh:
            log_fh.close()
            os.replace(log_path + ".tmp", log_path)
    if checkpoint_path:
        save_state(checkpoint_path, state, cfg)
    return state, records
