import math

import numpy as np
import pytest
from oracle import contrastive_oracle

from sgscl import objectives as O
from sgscl import tensor as T
from sgscl.gradcheck import random_batch
from sgscl.tensor import Graph, Tensor


class TestClassWeights:
    def test_table1_counts(self):
        w = O.class_weights([2063, 1215, 501, 363])
        np.testing.assert_allclose(w, [0.5019, 0.8523, 2.0669, 2.8526], atol=1e-4)

    @pytest.mark.parametrize("counts", [[5, 5, 5, 5], [1, 1, 1, 1]])
    def test_balanced(self, counts):
        np.testing.assert_array_equal(O.class_weights(counts), 1.0)

    def test_zero_count(self):
        with pytest.raises(ValueError):
            O.class_weights([1, 0, 1, 1])


class TestWeightedCE:
    def test_perfect(self):
        assert O.weighted_ce(Tensor([[50.0, 0, 0, 0]]), [0]).item() < 1e-20

    def test_uniform(self):
        assert O.weighted_ce(Tensor(np.zeros((1, 4))), [2]).item() == pytest.approx(math.log(4), abs=1e-12)

    def test_weight_linearity(self, rng):
        logits = rng.standard_normal((6, 4))
        y = np.array([0, 1, 2, 3, 1, 1])
        base = np.ones(4)
        doubled = base.copy()
        doubled[1] = 2.0
        l1 = O.weighted_ce(Tensor(logits), y, base).item()
        l2 = O.weighted_ce(Tensor(logits), y, doubled).item()
        only1 = O.weighted_ce(Tensor(logits[y == 1]), y[y == 1]).item()
        assert l2 - l1 == pytest.approx(only1, rel=1e-12)

    def test_mean(self, rng):
        logits = Tensor(rng.standard_normal((5, 4)))
        y = [0, 1, 2, 3, 0]
        assert O.weighted_ce(logits, y, reduction="mean").item() == pytest.approx(O.weighted_ce(logits, y).item() / 5)

    def test_bad_labels(self):
        with pytest.raises(ValueError):
            O.weighted_ce(Tensor(np.zeros((1, 4))), [4])


class TestDat:
    def test_lambda_zero(self, rng):
        c, d = Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((3, 2)))
        total, l_ce, _ = O.dat_loss(c, d, [0, 1, 2], [0, 1, 1], 0.0)
        assert total.item() == l_ce.item()

    def test_uniform_domain(self):
        _, _, l_da = O.dat_loss(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))), [0], [3], 1.0)
        assert l_da.item() == pytest.approx(math.log(4))

    def test_both_zero(self):
        big = np.array([[80.0, 0, 0, 0]])
        total, _, _ = O.dat_loss(Tensor(big), Tensor(big), [0], [0], 1.0)
        assert total.item() < 1e-30

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            O.dat_loss(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))), [0], [0], -1.0)


class TestContrastive:
    def test_identical_embeddings(self):
        z = np.ones((4, 3))
        loss = O.contrastive_loss(Tensor(z), Tensor(z), [0, 0, 0, 0])
        assert loss.item() == pytest.approx(4 * math.log(3), abs=1e-12)

    def test_masks(self):
        pos = O.positive_mask([0, 0, 1, 1])
        assert not pos.diagonal().any()
        np.testing.assert_array_equal(pos.sum(axis=1), [1, 1, 1, 1])

    def test_no_positive(self):
        with pytest.raises(ValueError):
            O.contrastive_loss(Tensor(np.eye(4)), Tensor(np.eye(4)), [0, 0, 1, 2])

    def test_too_small(self):
        with pytest.raises(ValueError):
            O.contrastive_loss(Tensor(np.eye(2)), Tensor(np.eye(2)), [0, 0])

    @pytest.mark.parametrize("form", [O.LOG_OF_MEAN, O.MEAN_OF_LOG])
    def test_matches_oracle(self, rng, form):
        for _ in range(10):
            b = random_batch(rng, n_views=8, dim=5)
            t = rng.standard_normal((8, 5))
            got = O.contrastive_loss(Tensor(b["z"]), Tensor(t), b["d"], 0.06, form).item()
            want = contrastive_oracle(b["z"], t, b["d"], 0.06, mean_of_log=form == O.MEAN_OF_LOG)
            assert got == pytest.approx(want, abs=1e-10, rel=1e-12)

    def test_forms_agree_with_one_positive(self, rng):
        z = rng.standard_normal((4, 3))
        d = [0, 0, 1, 1]
        a = O.contrastive_loss(Tensor(z), Tensor(z), d, form=O.LOG_OF_MEAN).item()
        b = O.contrastive_loss(Tensor(z), Tensor(z), d, form=O.MEAN_OF_LOG).item()
        assert a == pytest.approx(b, rel=1e-12)


class TestVariants:
    def test_six(self):
        assert len(O.VARIANTS) == 6
        assert str(O.DEFAULT_VARIANT) == "h:h:sgd"
        assert O.DEFAULT_VARIANT.label == ("h(z_i)", "sgd(h(z_p))")

    def test_parse(self):
        assert O.Variant.parse("h:z:sgd") == O.Variant("h", "z", True)
        for bad in ("z:z:sgd", "x:h", "h"):
            with pytest.raises(ValueError):
                O.Variant.parse(bad)

    def test_projector_needed(self):
        with pytest.raises(ValueError):
            O.sgscl_loss(np.ones((4, 3)), [0, 0, 1, 1], None, O.ContrastiveConfig())

    def test_stop_gradient_target_branch(self, rng):
        # a parameter that only feeds the stop-gradient targets
        z = rng.standard_normal((8, 3))
        d = np.repeat([0, 1, 0, 1], 2)

        def target_only(s):
            h = Tensor(z) + s
            return O.contrastive_loss(Tensor(z), T.stop_gradient(h), d)
        assert T.grad_check(target_only, {"s": np.zeros(3)}) < 1e-12
        gg = Graph(target_only)
        gg.forward(s=np.zeros(3))
        np.testing.assert_array_equal(gg.backward()["s"], 0.0)

    def test_reversal_flips_extractor_gradient(self, rng):
        z = rng.standard_normal((8, 4))
        d = np.repeat([0, 1, 1, 0], 2)
        cfg = O.ContrastiveConfig(variant=O.Variant("z", "z"))
        plain = Graph(lambda z: O.contrastive_loss(z, z, d))
        plain.forward(z=z)
        rev = Graph(lambda z: O.sgscl_loss(z, d, None, cfg, reversal=1.0))
        rev.forward(z=z)
        np.testing.assert_array_equal(rev.backward()["z"], -plain.backward()["z"])
