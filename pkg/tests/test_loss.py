import numpy as np
import pytest

from desksgg import numerics as nx
from desksgg.boxes import box_giou
from desksgg.loss import BACKGROUND_WEIGHT, COMPONENTS, box_loss, giou_loss_sum, total_loss, triplet_loss, weighted_ce
from desksgg.matching import assign_triplets
from desksgg.model import ModelConfig, RelationTransformer
from desksgg.synth import CorpusConfig, generate_split
from conftest import assert_grads_match, tape_grads
from scenes import C_E, C_P, fig5_predictions, fig5_targets, heads_from, random_boxes


class TestBoxLoss:
    def test_giou_loss_matches_geometry(self, rng):
        a, b = random_boxes(rng, 6), random_boxes(rng, 6)
        expected = sum(1 - box_giou(x, y) for x, y in zip(a, b))
        assert float(giou_loss_sum(nx.tensor(a), b).data) == pytest.approx(expected, rel=1e-12)

    def test_giou_loss_gradient(self, rng):
        a = nx.parameter(random_boxes(rng, 4), name="boxes")
        b = random_boxes(rng, 4)
        assert_grads_match(lambda: giou_loss_sum(a, b), [a], rtol=1e-5)

    def test_weights_and_normalizer(self, rng):
        a, b = random_boxes(rng, 3), random_boxes(rng, 3)
        _, v = box_loss(nx.tensor(a), np.arange(3), b, 6)
        l1 = np.abs(a - b).sum()
        gl = sum(1 - box_giou(x, y) for x, y in zip(a, b))
        assert v == pytest.approx((5 * l1 + 2 * gl) / 6)

    def test_empty(self):
        assert box_loss(nx.tensor(np.zeros((2, 4))), np.zeros(0, int), np.zeros((0, 4)), 0) == (None, 0.0)


class TestWeightedCE:
    def test_weighted_mean(self, rng):
        logits = rng.normal(size=(4, 3))
        t = np.array([0, 2, 1, 2])
        w = np.array([1.0, 0.1, 1.0, 0.1])
        lp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
        expected = -(w * lp[np.arange(4), t]).sum() / w.sum()
        _, v = weighted_ce(nx.tensor(logits), t, w)
        assert v == pytest.approx(expected)

    def test_all_zero_weights(self):
        assert weighted_ce(nx.tensor(np.zeros((2, 3))), np.zeros(2, int), np.zeros(2)) == (None, 0.0)


class TestThetaGate:
    def _grads(self, threshold):
        preds, gts = fig5_predictions(), fig5_targets()
        heads = heads_from(preds)
        assignment = assign_triplets(preds, gts, threshold)

        def build():
            _, terms = triplet_loss(heads, assignment)
            total = terms[0]
            for t in terms[1:]:
                total = nx.add(total, t)
            return total

        leaves = [heads.sub_logits, heads.sub_boxes, heads.obj_logits, heads.obj_boxes, heads.prd_logits]
        return assignment, dict(zip(("sub_logits", "sub_boxes", "obj_logits", "obj_boxes", "prd_logits"), tape_grads(build, leaves)))

    def test_gated_rows_exactly_zero(self):
        assignment, g = self._grads(0.7)
        assert assignment.theta_sub[2] == 0 and assignment.theta_obj[3] == 0
        assert np.all(g["sub_logits"][2] == 0.0)
        assert np.all(g["obj_logits"][3] == 0.0)
        # ungated branches of the same proposals still learn
        assert np.any(g["obj_logits"][2] != 0.0) and np.any(g["sub_logits"][3] != 0.0)
        assert np.any(g["prd_logits"][2] != 0.0)

    def test_unmatched_boxes_get_nothing(self):
        _, g = self._grads(0.7)
        assert np.all(g["sub_boxes"][1:] == 0.0) and np.all(g["obj_boxes"][1:] == 0.0)

    def test_threshold_one_trains_everything(self):
        _, g = self._grads(1.0)
        assert np.all(np.any(g["sub_logits"] != 0.0, axis=1))
        assert np.all(np.any(g["obj_logits"] != 0.0, axis=1))

    def test_background_weight(self):
        preds, gts = fig5_predictions(), fig5_targets()
        assignment = assign_triplets(preds, gts, 1.0)
        comps, _ = triplet_loss(heads_from(preds), assignment)
        p = preds.prd_logits - np.log(np.exp(preds.prd_logits).sum(1, keepdims=True))
        t = assignment.prd_labels
        w = np.where(t == C_P, BACKGROUND_WEIGHT, 1.0)
        assert comps["prd_cls"] == pytest.approx(-(w * p[np.arange(4), t]).sum() / w.sum())


@pytest.fixture(scope="module")
def setup():
    cfg = ModelConfig(model_dim=16, heads=2, encoder_layers=1, decoder_layers=2, num_entity_queries=6,
                      num_triplet_queries=8, ffn_dim=32, dropout=0.0)
    scene = generate_split(CorpusConfig(), "train", 1)[0]
    return RelationTransformer.create(cfg), scene


class TestTotalLoss:
    def test_components_and_layers(self, setup):
        model, scene = setup
        loss = total_loss(model.forward(scene.image), scene)
        assert set(loss.components) == set(COMPONENTS)
        assert len(loss.per_layer) == 2
        assert loss.value == pytest.approx(sum(loss.components.values()))
        for k in COMPONENTS:
            assert loss.components[k] == pytest.approx(sum(layer[k] for layer in loss.per_layer))

    def test_finite_positive(self, setup):
        model, scene = setup
        loss = total_loss(model.forward(scene.image), scene)
        assert np.isfinite(loss.value) and loss.value > 0
        assert loss["total"] == loss.value
