import dataclasses
import json
import math

import numpy as np
import pytest

from desksgg import numerics as nx
from desksgg.experiments import OVERFIT_OPTIM
from desksgg.model import ModelConfig
from desksgg.structures import GroundTruthScene
from desksgg.synth import CorpusConfig, generate_split
from desksgg.train import (
    AdamW,
    NumericalFailure,
    OptimConfig,
    RunConfig,
    load_state,
    new_state,
    save_state,
    scene_order,
    train,
)

SMALL = ModelConfig(model_dim=32, heads=2, encoder_layers=2, decoder_layers=2, num_entity_queries=8,
                    num_triplet_queries=8, ffn_dim=64, dropout=0.1)


def smoothed(records, n=10):
    """Mean total over the first and last n steps: one image per step makes single values noisy."""
    tot = [r["total"] for r in records]
    return np.mean(tot[:n]), np.mean(tot[-n:])


@pytest.fixture(scope="module")
def scenes():
    return generate_split(CorpusConfig(), "train", 6)


class TestAdamW:
    def params(self):
        return {"stem.w": nx.parameter(np.array([1.0, -2.0]), "stem.w"), "head.w": nx.parameter(np.array([[0.5]]), "head.w")}

    def test_first_step_by_hand(self):
        cfg = OptimConfig(lr=0.1, lr_backbone=0.01, weight_decay=0.5, clip_norm=0.0)
        ps = self.params()
        opt = AdamW(ps, cfg, total_steps=100)
        ps["stem.w"].grad = np.array([0.3, -4.0])
        ps["head.w"].grad = np.array([[2.0]])
        opt.step()
        # bias-corrected first step moves each entry by lr * sign(g) (up to eps), after decay
        want_stem = np.array([1.0, -2.0]) * (1 - 0.01 * 0.5) - 0.01 * np.sign([0.3, -4.0])
        want_head = 0.5 * (1 - 0.1 * 0.5) - 0.1
        np.testing.assert_allclose(ps["stem.w"].data, want_stem, rtol=1e-7)
        np.testing.assert_allclose(ps["head.w"].data, [[want_head]], rtol=1e-7)

    def test_second_step_moments(self):
        cfg = OptimConfig(lr=0.1, weight_decay=0.0, clip_norm=0.0, beta1=0.9, beta2=0.99)
        ps = {"w": nx.parameter(np.array([0.0]), "w")}
        opt = AdamW(ps, cfg, 10)
        for g in (1.0, 3.0):
            ps["w"].grad = np.array([g])
            opt.step()
        m = (0.9 * 0.1 * 1.0 + 0.1 * 3.0) / (1 - 0.9**2)
        v = (0.99 * 0.01 * 1.0 + 0.01 * 9.0) / (1 - 0.99**2)
        first = -0.1 * 1.0 / (1.0 + 1e-8)
        assert ps["w"].data[0] == pytest.approx(first - 0.1 * m / (math.sqrt(v) + 1e-8), rel=1e-12)

    def test_decay_is_decoupled(self):
        cfg = OptimConfig(lr=0.1, weight_decay=0.5, clip_norm=0.0)
        ps = {"w": nx.parameter(np.array([2.0]), "w")}
        opt = AdamW(ps, cfg, 10)
        opt.step()  # no gradient: only the decay acts
        assert ps["w"].data[0] == pytest.approx(2.0 * (1 - 0.05))

    def test_schedule(self):
        opt = AdamW(self.params(), OptimConfig(lr=1e-4, lr_backbone=1e-5, decay_at=2 / 3), total_steps=300)
        assert opt.lr_for("head.w", 199) == 1e-4 and opt.lr_for("stem.w", 199) == 1e-5
        assert opt.lr_for("head.w", 200) == pytest.approx(1e-5) and opt.lr_for("stem.w", 299) == pytest.approx(1e-6)

    def test_clip(self):
        ps = self.params()
        opt = AdamW(ps, OptimConfig(clip_norm=0.1), 10)
        ps["stem.w"].grad = np.array([3.0, 0.0])
        ps["head.w"].grad = np.array([[4.0]])
        assert opt.clip() == pytest.approx(5.0)
        total = np.sqrt(np.sum(ps["stem.w"].grad ** 2) + np.sum(ps["head.w"].grad ** 2))
        assert total == pytest.approx(0.1, rel=1e-5)
        np.testing.assert_allclose(ps["stem.w"].grad / ps["head.w"].grad[0, 0], [0.75, 0.0])

    def test_small_norm_untouched(self):
        ps = self.params()
        opt = AdamW(ps, OptimConfig(clip_norm=0.1), 10)
        ps["stem.w"].grad = np.array([0.01, 0.0])
        opt.clip()
        assert ps["stem.w"].grad[0] == 0.01


class TestRunConfig:
    def test_defaults(self):
        c = RunConfig()
        assert (c.optim.lr, c.optim.lr_backbone, c.optim.weight_decay, c.optim.clip_norm) == (1e-4, 1e-5, 1e-4, 0.1)
        assert c.iou_threshold == 0.7

    def test_round_trip(self):
        c = RunConfig(model=SMALL, steps=12, iou_threshold=1.0, seed=5)
        assert RunConfig.from_dict(json.loads(json.dumps(c.to_dict()))).to_dict() == c.to_dict()

    @pytest.mark.parametrize("bad", [{"iou_threshold": 0.0}, {"iou_threshold": 1.5}, {"steps": -1},
                                     {"out_dir": "x", "data_dir": "x"}, {"lr": 1.0}, {"optim": {"momentum": 0.9}}])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            RunConfig.from_dict(bad)


class TestSceneOrder:
    def test_each_epoch_is_a_permutation(self):
        for epoch in range(3):
            seen = sorted(scene_order(4, 7, epoch * 7 + i) for i in range(7))
            assert seen == list(range(7))
        assert [scene_order(4, 7, i) for i in range(7)] != [scene_order(4, 7, 7 + i) for i in range(7)]


class TestTraining:
    def test_single_scene_loss_halves(self):
        """200 steps on one fixed scene reduce the total by half, on 10 seeds."""
        ratios = []
        for seed in range(10):
            scene = generate_split(CorpusConfig(seed=seed), "train", 1)
            cfg = RunConfig(model=dataclasses.replace(SMALL, dropout=0.0), optim=OVERFIT_OPTIM, steps=200, seed=seed)
            _, rec = train(cfg, scene)
            first, last = smoothed(rec)
            ratios.append(last / first)
        assert max(ratios) <= 0.5, ratios

    @pytest.mark.slow
    def test_twenty_scene_loss_halves(self):
        """Desk model, 200 steps on a 20-scene corpus: final total at most half the initial."""
        scenes = generate_split(CorpusConfig(), "train", 20)
        cfg = RunConfig(model=dataclasses.replace(ModelConfig(), dropout=0.0), optim=OVERFIT_OPTIM, steps=200)
        _, rec = train(cfg, scenes)
        first, last = smoothed(rec)
        assert last <= 0.5 * first, (first, last)

    def test_resume_is_bitwise(self, scenes, tmp_path):
        cfg = RunConfig(model=SMALL, steps=6, seed=3)
        straight, rec_a = train(cfg, scenes)
        half, _ = train(cfg, scenes, steps=3)
        save_state(str(tmp_path / "half.ckpt"), half, cfg)
        resumed, cfg2 = load_state(str(tmp_path / "half.ckpt"))
        assert resumed.step == 3 and cfg2.to_dict() == cfg.to_dict()
        resumed, rec_b = train(cfg2, scenes, state=resumed)
        assert [r["total"] for r in rec_b] == [r["total"] for r in rec_a[3:]]
        for k, p in straight.model.params.items():
            assert np.array_equal(p.data, resumed.model.params[k].data), k
        save_state(str(tmp_path / "a.ckpt"), straight, cfg)
        save_state(str(tmp_path / "b.ckpt"), resumed, cfg)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_log_and_checkpoints(self, scenes, tmp_path):
        cfg = RunConfig(model=dataclasses.replace(SMALL, disabled=("csa", "mask")), steps=4, checkpoint_every=2)
        log = tmp_path / "loss.jsonl"
        ckpt = tmp_path / "m.ckpt"
        state, rec = train(cfg, scenes, log_path=str(log), checkpoint_path=str(ckpt))
        lines = [json.loads(x) for x in log.read_text().splitlines()]
        assert lines[0]["header"] and lines[0]["disabled"] == ["csa", "mask"]
        assert [x["step"] for x in lines[1:]] == [0, 1, 2, 3]
        assert {"entity_cls", "sub_box", "prd_cls", "total", "grad_norm"} <= set(lines[1])
        assert load_state(str(ckpt))[0].step == 4
        assert not (tmp_path / "loss.jsonl.tmp").exists()

    def test_nan_aborts_with_breakdown(self, scenes):
        bad = GroundTruthScene(np.full_like(scenes[0].image, np.nan), scenes[0].entities, scenes[0].triplets)
        state = new_state(RunConfig(model=SMALL, steps=3))
        with pytest.raises(NumericalFailure, match="step 0.*entity_cls"):
            train(RunConfig(model=SMALL, steps=3), [bad], state=state)

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            train(RunConfig(model=SMALL, steps=1), [])
