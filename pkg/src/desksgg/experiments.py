"""Desk-scale training experiments: overfit sanity and ablation direction."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

from .evaluation import evaluate, postprocess
from .model import ModelConfig
from .synth import CorpusConfig, generate_split
from .train import OptimConfig, RunConfig, train

log = logging.getLogger(__name__)

# Single-image steps on a 20-scene corpus: a larger step size than the
# default and no dropout, so the training set can be memorized in 2000 steps.
OVERFIT_OPTIM = OptimConfig(lr=5e-4, lr_backbone=5e-4)


def sgdet_recall(model, scenes, k: int = 20) -> float:
    ranked = [postprocess(model.predict(s.image)) for s in scenes]
    rep = evaluate(ranked, [s.targets() for s in scenes], model.config.num_predicate_classes)
    return rep.recall[k]


def overfit(scenes: int = 20, steps: int = 2000, seed: int = 0) -> dict:
    """Train the desk model on a handful of scenes; R@20 on those same scenes."""
    corpus = CorpusConfig(seed=seed)
    train_set = generate_split(corpus, "train", scenes)
    cfg = RunConfig(model=ModelConfig(dropout=0.0), corpus=corpus, optim=OVERFIT_OPTIM, steps=steps, seed=seed)
    t0 = time.time()
    state, records = train(cfg, train_set)
    return {
        "R@20": sgdet_recall(state.model, train_set),
        "seconds": time.time() - t0,
        "first_loss": records[0]["total"],
        "last_loss": records[-1]["total"],
    }


@dataclass
class AblationSetup:
    train_scenes: int = 500
    test_scenes: int = 100
    steps: int = 24000
    seeds: tuple[int, ...] = (0, 1, 2)
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=5e-4, lr_backbone=5e-4))
    dropout: float = 0.1
    variants: dict = field(default_factory=lambda: {
        "full": {},
        "no_csa": {"disabled": ("csa",)},
        "t1": {"iou_threshold": 1.0},
    })


def ablation_direction(setup: AblationSetup | None = None, progress=None) -> dict:
    """Test R@20 for each variant and seed; one corpus per seed, shared across variants."""
    setup = setup or AblationSetup()
    results: dict[str, dict[int, float]] = {name: {} for name in setup.variants}
    for seed in setup.seeds:
        corpus = CorpusConfig(seed=seed, train_scenes=setup.train_scenes, test_scenes=setup.test_scenes)
        train_set = generate_split(corpus, "train")
        test_set = generate_split(corpus, "test")
        for name, overrides in setup.variants.items():
            model = ModelConfig(dropout=setup.dropout, disabled=overrides.get("disabled", ()))
            cfg = RunConfig(model=model, corpus=corpus, optim=dataclasses.replace(setup.optim), steps=setup.steps,
                            seed=seed, iou_threshold=overrides.get("iou_threshold", 0.7))
            t0 = time.time()
            state, _ = train(cfg, train_set)
            results[name][seed] = sgdet_recall(state.model, test_set)
            log.info("seed %d %s: R@20 %.4f (%.0fs)", seed, name, results[name][seed], time.time() - t0)
            if progress:
                progress(seed, name, results[name][seed])
    return results
