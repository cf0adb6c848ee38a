"""Command-line entry points: gen-data, train, eval, infer, grad-check."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import numerics as nx
from .evaluation import evaluate, postprocess, substitute_ground_truth, write_predictions
from .loss import total_loss
from .model import CheckpointError, ModelConfig, RelationTransformer, load_model
from .synth import (
    CorpusConfig,
    CorpusFormatError,
    frequency_groups,
    generate_split,
    predicate_histogram,
    read_corpus,
    write_corpus,
)
from .train import NumericalFailure, RunConfig, load_state, train

log = logging.getLogger("desksgg")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2
SPLITS = ("train", "val", "test")
JITTER = 0.05


class ConfigError(ValueError):
    pass


def _write_json(path: str, obj) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Config file (JSON) first, then command-line overrides."""
    raw: dict = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
    raw = dict(raw)
    model = dict(raw.get("model", {}))
    corpus = dict(raw.get("corpus", {}))
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
        corpus["seed"] = args.seed
    if getattr(args, "disable", None):
        model["disabled"] = sorted(set(model.get("disabled", [])) | set(args.disable))
    if getattr(args, "num_triplet_queries", None) is not None:
        model["num_triplet_queries"] = args.num_triplet_queries
    if getattr(args, "iou_threshold", None) is not None:
        raw["iou_threshold"] = args.iou_threshold
    if getattr(args, "out", None):
        raw["out_dir"] = args.out
    if getattr(args, "steps", None) is not None:
        raw["steps"] = args.steps
    if getattr(args, "data", None):
        raw["data_dir"] = args.data
    raw["model"], raw["corpus"] = model, corpus
    try:
        return RunConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def corpus_path(data_dir: str, split: str) -> str:
    return os.path.join(data_dir, f"{split}.jsonl")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> dict:
    cc = cfg.corpus
    sizes = {"train": cc.train_scenes, "val": cc.val_scenes, "test": cc.test_scenes}
    hists = {}
    for split in SPLITS:
        scenes = generate_split(cc, split, sizes[split])
        write_corpus(scenes, corpus_path(cfg.data_dir, split))
        hists[split] = predicate_histogram(scenes, cc.num_predicate_classes).tolist()
        print(f"{split}: {len(scenes)} scenes, predicate histogram {hists[split]}")
    manifest = {
        "corpus": cc.to_dict(),
        "holdout": [list(h) for h in cc.holdout],
        "splits": sizes,
        "predicate_histogram": hists,
        "groups": frequency_groups(np.asarray(hists["train"])),
    }
    _write_json(os.path.join(cfg.data_dir, "manifest.json"), manifest)
    return manifest


def cmd_train(cfg: RunConfig, resume: str | None = None) -> str:
    path = corpus_path(cfg.data_dir, "train")
    if not os.path.exists(path):
        raise ConfigError(f"training corpus {path} not found; run gen-data first")
    scenes = read_corpus(path)
    ckpt = os.path.join(cfg.out_dir, "model.ckpt")
    state = None
    if resume:
        state, saved = load_state(resume)
        if saved.model.to_dict() != cfg.model.to_dict():
            raise ConfigError("resume checkpoint was trained with a different model config")
    _write_json(os.path.join(cfg.out_dir, "run_config.json"), cfg.to_dict())
    state, records = train(cfg, scenes, state=state, log_path=os.path.join(cfg.out_dir, "loss_log.jsonl"), checkpoint_path=ckpt)
    if records:
        print(f"trained to step {state.step}: loss {records[0]['total']:.4f} -> {records[-1]['total']:.4f}")
    return ckpt


def predict_corpus(model: RelationTransformer, scenes, mode: str = "sgdet"):
    ranked = []
    for s in scenes:
        preds = model.predict(s.image)
        if mode != "sgdet":
            preds = substitute_ground_truth(preds, s.targets(), mode)
        ranked.append(postprocess(preds))
    return ranked


def cmd_eval(checkpoint: str, corpus: str, mode: str, out: str | None = None, manifest: str | None = None) -> dict:
    model, _, _ = load_model(checkpoint)
    scenes = read_corpus(corpus)
    holdout, groups = [], None
    manifest = manifest or os.path.join(os.path.dirname(os.path.abspath(corpus)), "manifest.json")
    if os.path.exists(manifest):
        with open(manifest, encoding="utf-8") as fh:
            m = json.load(fh)
        holdout = [tuple(h) for h in m.get("holdout", [])]
        groups = m.get("groups")
    ranked = predict_corpus(model, scenes, mode)
    report = evaluate(ranked, [s.targets() for s in scenes], model.config.num_predicate_classes, holdout, groups).to_dict()
    report["mode"] = mode
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if out:
        _write_json(os.path.join(out, f"report_{mode}.json"), report)
    return report


def cmd_infer(checkpoint: str, corpus: str, out: str, mode: str = "sgdet") -> str:
    model, _, _ = load_model(checkpoint)
    scenes = read_corpus(corpus)
    path = os.path.join(out, f"predictions_{mode}.jsonl")
    write_predictions(path, [s.scene_id for s in scenes], predict_corpus(model, scenes, mode))
    print(path)
    return path


def grad_check_config() -> ModelConfig:
    """The smallest model that still exercises every module: one layer each, 8x8 grid."""
    return ModelConfig(
        model_dim=16, heads=2, encoder_layers=1, decoder_layers=1,
        num_entity_queries=4, num_triplet_queries=4, ffn_dim=32, image_size=32,
    )


def grad_check_problem(model_cfg: ModelConfig | None = None, seed: int = 0, iou_threshold: float = 0.7):
    """(loss closure, named parameters) for a small model on one generated scene."""
    model_cfg = model_cfg or grad_check_config()
    model = RelationTransformer.create(model_cfg, seed=seed)
    # Check at a generic point: fresh init has zero biases and a zero entity
    # target, which hands layer norm an all-zero row and leaves kinks a hair away.
    jitter = np.random.default_rng([seed, 5])
    for p in model.params.values():
        p.data += jitter.normal(0.0, JITTER, p.data.shape)
    cc = CorpusConfig(image_size=model_cfg.image_size, max_entities=4, seed=seed)
    fits = [s for s in generate_split(cc, "train", 50) if 2 <= len(s.triplets) <= model_cfg.num_triplet_queries]
    if not fits:
        raise ConfigError("no generated scene fits the triplet query count")
    scene = fits[0]

    def f():
        return total_loss(model.forward(scene.image, training=False), scene, iou_threshold).total

    return f, model.params


def cmd_grad_check(model_cfg: ModelConfig | None = None, seed: int = 0, iou_threshold: float = 0.7,
                   max_entries: int | None = 8, corrupt: str | None = None, factor: float = 1.5,
                   eps: float = 1e-6) -> nx.GradCheckResult:
    """Finite-difference check of the full loss; ``corrupt`` names an op whose backward rule is scaled.

    The loss has kinks (relu, box min/max, matching switches), so the
    default step is the smallest allowed one.
    """
    f, params = grad_check_problem(model_cfg, seed, iou_threshold)
    rng = np.random.default_rng([seed, 3])
    if corrupt:
        with nx.corrupt_backward(corrupt, factor):
            return nx.grad_check_report(f, params, eps, max_entries=max_entries, rng=rng)
    return nx.grad_check_report(f, params, eps, max_entries=max_entries, rng=rng)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="desksgg", description="One-stage scene graph generation on synthetic scenes.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate train/val/test corpora")
    _common(p)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--data", help="corpus directory")
    p.add_argument("--steps", type=int)
    p.add_argument("--disable", nargs="+", choices=["csa", "dva", "dea", "mask"], default=None)
    p.add_argument("--iou-threshold", type=float)
    p.add_argument("--num-triplet-queries", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")

    for name, helptext in (("eval", "evaluate a checkpoint"), ("infer", "dump ranked predictions")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("checkpoint")
        p.add_argument("corpus")
        p.add_argument("--mode", choices=["sgdet", "sgcls", "predcls"], default="sgdet")
        p.add_argument("--out")

    p = sub.add_parser("grad-check", help="finite-difference check of the full loss")
    _common(p)
    p.add_argument("--iou-threshold", type=float)
    p.add_argument("--max-entries", type=int, default=8, help="entries probed per parameter tensor (0 = all)")
    p.add_argument("--eps", type=float, default=1e-6, help="central-difference step")
    p.add_argument("--corrupt", help="op whose backward rule is deliberately broken (negative control)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    t0 = time.time()
    try:
        if args.command == "gen-data":
            args.data, args.out = args.out, None
            cmd_gen_data(load_run_config(args))
        elif args.command == "train":
            cmd_train(load_run_config(args), args.resume)
        elif args.command == "eval":
            cmd_eval(args.checkpoint, args.corpus, args.mode, args.out)
        elif args.command == "infer":
            cmd_infer(args.checkpoint, args.corpus, args.out or ".", args.mode)
        elif args.command == "grad-check":
            model_cfg = None
            if args.config:
                model_cfg = load_run_config(args).model
            res = cmd_grad_check(model_cfg, args.seed or 0, args.iou_threshold or 0.7,
                                 args.max_entries or None, args.corrupt, eps=args.eps)
            report = {"max_rel_error": res.max_rel_error, "worst_param": res.worst_param, "kinks": res.kinks,
                      "worst_index": res.worst_index, "seconds": round(time.time() - t0, 2)}
            print(json.dumps(report, sort_keys=True))
            if args.out:
                _write_json(os.path.join(args.out, "grad_check.json"), {**report, "per_param": res.per_param})
            if res.max_rel_error >= 1e-4:
                return EXIT_NUMERICAL
    except (ConfigError, CorpusFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
