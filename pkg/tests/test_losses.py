import math

import numpy as np
import pytest

from cxrkit.image import Image, l1_mean
from cxrkit.losses import DiscriminatorScores, abn2nor_loss, adversarial_term, realistic_loss


def scores(real, fake):
    return DiscriminatorScores(tuple(real), tuple(fake))


class TestAdversarialTerm:
    def test_perfect_discriminator_near_zero(self):
        v = adversarial_term(scores([1.0, 1.0], [0.0, 0.0]))
        assert abs(v) <= 1e-6
        assert v == pytest.approx(2 * math.log(1 - 1e-7), abs=1e-12)

    def test_coin_flip_scores(self):
        v = adversarial_term(scores([0.5, 0.5], [0.5]))
        assert v == pytest.approx(2 * math.log(0.5), abs=1e-6)
        assert v == pytest.approx(-1.386294, abs=1e-6)

    def test_clamp_keeps_finite(self):
        v = adversarial_term(scores([0.0], [0.0]))
        # real term is clamped at 1e-7, fake term is ~0
        assert v == pytest.approx(math.log(1e-7), abs=1e-6)
        assert math.isfinite(v)

    def test_permutation_invariance(self):
        a = adversarial_term(scores([0.2, 0.9, 0.5], [0.1, 0.7]))
        b = adversarial_term(scores([0.5, 0.2, 0.9], [0.7, 0.1]))
        assert a == pytest.approx(b, abs=1e-15)

    def test_maximized_by_perfect_scores(self):
        best = adversarial_term(scores([1.0], [0.0]))
        rng = np.random.default_rng(0)
        for _ in range(50):
            v = adversarial_term(scores(rng.random(3), rng.random(3)))
            assert v <= best + 1e-12

    def test_empty_scores_rejected(self):
        with pytest.raises(ValueError):
            DiscriminatorScores((), (0.5,))
        with pytest.raises(ValueError):
            DiscriminatorScores((0.5,), ())

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            DiscriminatorScores((1.2,), (0.5,))


class TestRealisticLoss:
    def test_perfect_everything_near_zero(self):
        img = Image.constant(8, 8, 0.6)
        v = realistic_loss(scores([1.0], [0.0]), img, img)
        assert abs(v) <= 1e-6

    def test_reconstruction_term_only(self):
        v = realistic_loss(scores([1.0], [0.0]),
                           Image.constant(8, 8, 1.0), Image.constant(8, 8, 0.0))
        assert v == pytest.approx(1.0, abs=1e-6)

    def test_adversarial_term_only(self):
        img = Image.constant(8, 8, 0.3)
        v = realistic_loss(scores([0.5], [0.5]), img, img)
        assert v == pytest.approx(-1.386294, abs=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            realistic_loss(scores([1.0], [0.0]),
                           Image.constant(8, 8, 0.0), Image.constant(8, 9, 0.0))


class TestAbn2NorLoss:
    def test_target_reached(self):
        rng = np.random.default_rng(1)
        target = Image(rng.random((12, 12)))
        v = abn2nor_loss(scores([1.0], [0.0]), target, target)
        assert abs(v) <= 1e-6

    def test_blurred_output_scores_worse(self):
        rng = np.random.default_rng(2)
        target = Image(rng.random((12, 12)))
        blurred = np.pad(target.pixels, 1, mode="edge")
        blurred = sum(blurred[1 + dy:13 + dy, 1 + dx:13 + dx]
                      for dy in (-1, 0, 1) for dx in (-1, 0, 1)) / 9.0
        s = scores([0.8], [0.3])
        exact = abn2nor_loss(s, target, target)
        worse = abn2nor_loss(s, target, Image(np.clip(blurred, 0, 1)))
        assert worse > exact

    def test_fooled_discriminator_clamps(self):
        rng = np.random.default_rng(3)
        target = Image(rng.random((8, 8)))
        v = abn2nor_loss(scores([1.0], [1.0]), target, target)
        assert v == pytest.approx(math.log(1e-7), abs=1e-3)


class TestMonotonicity:
    def test_losses_increase_with_reconstruction_error(self):
        rng = np.random.default_rng(4)
        s = scores([0.7, 0.4], [0.2, 0.6])
        base = Image(rng.random((10, 10)))
        prev_real = None
        prev_abn = None
        prev_l1 = -1.0
        for scale in (0.0, 0.05, 0.1, 0.2, 0.4):
            noisy = Image(np.clip(base.pixels + scale, 0.0, 1.0))
            l1 = l1_mean(base, noisy)
            assert l1 >= prev_l1
            v_real = realistic_loss(s, base, noisy)
            v_abn = abn2nor_loss(s, base, noisy)
            if prev_real is not None:
                assert v_real >= prev_real - 1e-12
                assert v_abn >= prev_abn - 1e-12
            prev_real, prev_abn, prev_l1 = v_real, v_abn, l1
