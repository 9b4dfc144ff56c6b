import numpy as np
import pytest

from cloudattack import attack as attack_mod
from cloudattack.attack import (AttackConfig, attack, cloud_color_image,
                                decode, default_bounds, encode, fitness, fuse,
                                render_adversarial, synthesize_cloud)
from cloudattack.de import DEConfig
from cloudattack.imaging import Image, load_png, save_png
from cloudattack.models import counting_wrapper
from cloudattack.perlin import ChannelEffectConfig, Mask
from cloudattack.pggn import GeneratorWeights


@pytest.fixture(scope="module")
def gen_w():
    return GeneratorWeights.random_init(q=52, seed=11)


@pytest.fixture
def plain_channel_cfg():
    return ChannelEffectConfig()


class TestParamLayout:
    def test_round_trip(self):
        rng = np.random.default_rng(0)
        z, k, t = rng.uniform(-1, 1, 52), rng.uniform(0, 1, 5), 0.3
        z2, k2, t2 = decode(encode(z, k, t))
        np.testing.assert_array_equal(z, z2)
        np.testing.assert_array_equal(k, k2)
        assert t == t2

    def test_bounds_endpoints(self):
        bounds = default_bounds()
        assert bounds.dim == 58
        _, _, t_low = decode(bounds.lower)
        _, _, t_high = decode(bounds.upper)
        assert t_low == 0.1
        assert t_high == 0.65

    def test_k_bounds(self):
        bounds = default_bounds()
        np.testing.assert_array_equal(bounds.lower[52:57], [0.0, 0.0, 0.0, 0.4, 0.6])
        np.testing.assert_array_equal(bounds.upper[52:57], [0.1, 0.2, 0.3, 0.8, 1.0])

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            decode(np.zeros(57))


class TestSynthesizeCloud:
    def test_thickness_bound_attained(self, gen_w, plain_channel_cfg):
        rng = np.random.default_rng(1)
        r = encode(rng.uniform(-1, 1, 52), [0.05, 0.1, 0.2, 0.6, 0.8], 0.1)
        mask = synthesize_cloud(r, gen_w, 32, 32, plain_channel_cfg)
        assert mask.channels == 3
        assert mask.values.max() == pytest.approx(0.1, abs=1e-12)
        assert mask.values.min() >= 0.0

    def test_deterministic(self, gen_w, plain_channel_cfg):
        r = encode(np.random.default_rng(2).uniform(-1, 1, 52),
                   [0.1, 0.1, 0.1, 0.5, 0.7], 0.4)
        a = synthesize_cloud(r, gen_w, 24, 24, plain_channel_cfg)
        b = synthesize_cloud(r, gen_w, 24, 24, plain_channel_cfg)
        np.testing.assert_array_equal(a.values, b.values)

    def test_coarse_masks_have_lower_spatial_frequency(self, gen_w, plain_channel_cfg):
        rng = np.random.default_rng(3)
        z = rng.uniform(-1, 1, 52)
        coarse = synthesize_cloud(encode(z, [1, 0, 0, 0, 0], 0.5), gen_w, 64, 64,
                                  plain_channel_cfg)
        fine = synthesize_cloud(encode(z, [0, 0, 0, 0, 1], 0.5), gen_w, 64, 64,
                                plain_channel_cfg)

        def neighbor_diff(mask):
            v = mask.values[:, :, 0]
            return np.abs(np.diff(v, axis=1)).mean()

        assert neighbor_diff(coarse) < neighbor_diff(fine)


class TestCloudColor:
    def test_zero_mask_gives_mean_color(self):
        rng = np.random.default_rng(4)
        img = Image(rng.random((8, 8, 3)))
        out = cloud_color_image(img, Mask(np.zeros((8, 8))))
        mu = img.data.reshape(-1, 3).mean(axis=0)
        np.testing.assert_allclose(out.data, np.broadcast_to(mu, (8, 8, 3)))

    def test_full_mask_gives_white(self):
        img = Image(np.random.default_rng(5).random((4, 4, 3)))
        out = cloud_color_image(img, Mask(np.ones((4, 4))))
        np.testing.assert_allclose(out.data, 1.0)

    def test_arithmetic(self):
        img = Image(np.full((2, 2, 3), 0.4))
        out = cloud_color_image(img, Mask(np.full((2, 2), 0.5)))
        np.testing.assert_allclose(out.data, 0.7)


class TestFuse:
    def test_zero_mask_identity(self):
        img = Image(np.random.default_rng(6).random((5, 5, 3)))
        cloud = Image(np.ones((5, 5, 3)))
        out = fuse(img, Mask(np.zeros((5, 5))), cloud)
        np.testing.assert_array_equal(out.data, img.data)

    def test_full_mask_gives_cloud(self):
        img = Image(np.zeros((3, 3, 3)))
        cloud = Image(np.random.default_rng(7).random((3, 3, 3)))
        out = fuse(img, Mask(np.ones((3, 3))), cloud)
        np.testing.assert_array_equal(out.data, cloud.data)

    def test_arithmetic(self):
        img = Image(np.full((2, 2, 3), 0.2))
        cloud = Image(np.full((2, 2, 3), 0.8))
        out = fuse(img, Mask(np.full((2, 2), 0.25)), cloud)
        np.testing.assert_allclose(out.data, 0.35)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            fuse(Image(np.zeros((4, 4, 3))), Mask(np.zeros((5, 5))),
                 Image(np.zeros((4, 4, 3))))


class TestFitness:
    def test_zero_thickness_identity(self, gen_w, plain_channel_cfg, toy_model,
                                     holdout_set):
        # t forced below its usual bound: the mask vanishes, the adversarial
        # image is the clean image, and L_f collapses to the class confidence
        img = holdout_set.images[0]
        c = int(np.argmax(toy_model.classify(img)))
        r = encode(np.zeros(52), [0.1, 0.1, 0.1, 0.5, 0.7], 0.0)
        l_f, l_adv, l_mse, label = fitness(r, img, c, toy_model, 0.25, gen_w,
                                           plain_channel_cfg)
        assert l_mse == 0.0
        assert l_f == l_adv == float(toy_model.classify(img)[c])
        assert label == c

    def test_weighted_sum(self, gen_w, plain_channel_cfg, toy_model, holdout_set):
        img = holdout_set.images[1]
        c = int(np.argmax(toy_model.classify(img)))
        r = encode(np.random.default_rng(8).uniform(-1, 1, 52),
                   [0.05, 0.1, 0.2, 0.6, 0.8], 0.5)
        alpha = 0.25
        l_f, l_adv, l_mse, _ = fitness(r, img, c, toy_model, alpha, gen_w,
                                       plain_channel_cfg)
        assert l_f == l_adv + alpha * l_mse
        assert l_mse > 0.0

    def test_known_confidence_contribution(self, gen_w, plain_channel_cfg):
        class FixedModel:
            label_count = 6
            concurrency = "safe"

            def classify(self, img):
                return np.array([0.8, 0.04, 0.04, 0.04, 0.04, 0.04])

        img = Image(np.full((32, 32, 3), 0.5))
        r = encode(np.zeros(52), [0.1, 0.1, 0.1, 0.5, 0.7], 0.0)
        l_f, l_adv, l_mse, _ = fitness(r, img, 0, FixedModel(), 0.25, gen_w,
                                       plain_channel_cfg)
        assert l_adv == 0.8
        assert l_f == pytest.approx(0.8 + 0.25 * l_mse)

    def test_exactly_one_query_per_call(self, gen_w, plain_channel_cfg, toy_model,
                                        holdout_set):
        counted = counting_wrapper(toy_model)
        img = holdout_set.images[2]
        r = encode(np.random.default_rng(9).uniform(-1, 1, 52),
                   [0.05, 0.1, 0.2, 0.6, 0.8], 0.3)
        for expected in (1, 2, 3):
            fitness(r, img, 0, counted, 0.25, gen_w, plain_channel_cfg)
            assert counted.queries == expected


class TestRenderPipeline:
    def test_zero_mask_bit_exact_through_full_path(self, gen_w, plain_channel_cfg,
                                                   holdout_set):
        # synthesize -> fuse with t = 0 must return the clean image bit-exact
        img = holdout_set.images[4]
        r = encode(np.random.default_rng(10).uniform(-1, 1, 52),
                   [0.1, 0.1, 0.1, 0.5, 0.7], 0.0)
        out = render_adversarial(r, img, gen_w, plain_channel_cfg)
        np.testing.assert_array_equal(out.data, img.data)

    def test_output_on_byte_lattice(self, gen_w, plain_channel_cfg, holdout_set):
        img = holdout_set.images[5]
        r = encode(np.random.default_rng(11).uniform(-1, 1, 52),
                   [0.05, 0.1, 0.2, 0.6, 0.8], 0.5)
        out = render_adversarial(r, img, gen_w, plain_channel_cfg)
        np.testing.assert_array_equal(out.data, np.round(out.data * 255) / 255)


class _ConstantModel:
    """Ignores its input entirely; no attack can ever move it."""

    label_count = 6
    concurrency = "safe"

    def __init__(self, label=0):
        self.label = label

    def classify(self, img):
        probs = np.full(6, 0.02)
        probs[self.label] = 0.9
        return probs


class _BrightnessFlipModel:
    """Predicts class 0 until mean brightness rises 0.05 above its anchor."""

    label_count = 6
    concurrency = "safe"

    def __init__(self, anchor):
        self.anchor = anchor

    def classify(self, img):
        probs = np.full(6, 0.02)
        if float(img.data.mean()) > self.anchor + 0.05:
            probs[1] = 0.9
        else:
            probs[0] = 0.9
        return probs


class TestAttack:
    def test_unattackable_constant_model(self, gen_w):
        img = Image(np.full((32, 32, 3), 0.5))
        cfg = AttackConfig(de=DEConfig(np=10, max_evals=60, seed=0), seed=0)
        result = attack(img, 0, _ConstantModel(), gen_w, cfg)
        assert not result.success
        assert result.queries == 60  # budget fully spent, checked per evaluation
        assert result.predicted_label == 0

    def test_brightness_flip_model_succeeds_fast(self, gen_w):
        img = Image(np.full((32, 32, 3), 0.4))
        model = _BrightnessFlipModel(anchor=0.4)
        cfg = AttackConfig(de=DEConfig(np=20, max_evals=400, seed=1), seed=1)
        result = attack(img, 0, model, gen_w, cfg)
        assert result.success
        assert result.queries <= 20  # found within the initial population
        assert result.predicted_label == 1

    def test_query_exactness_against_external_counter(self, gen_w, toy_model,
                                                      holdout_set):
        outer = counting_wrapper(toy_model)
        img = holdout_set.images[0]
        c = int(np.argmax(toy_model.classify(img)))
        cfg = AttackConfig(de=DEConfig(np=10, max_evals=50, seed=2), seed=2)
        result = attack(img, c, outer, gen_w, cfg)
        assert result.queries == outer.queries

    def test_success_reclassifies_as_misclassified(self, gen_w, toy_model,
                                                   holdout_set):
        for idx in range(4):
            img = holdout_set.images[idx]
            c = int(np.argmax(toy_model.classify(img)))
            cfg = AttackConfig(de=DEConfig(np=30, max_evals=900, seed=idx), seed=idx)
            result = attack(img, c, toy_model, gen_w, cfg)
            if result.success:
                again = int(np.argmax(toy_model.classify(result.adv_image)))
                assert again != c
                assert again == result.predicted_label
                break
        else:
            pytest.fail("no attack succeeded in four attempts")

    def test_success_survives_png_round_trip(self, gen_w, toy_model, holdout_set,
                                             tmp_path):
        img = holdout_set.images[6]
        c = int(np.argmax(toy_model.classify(img)))
        cfg = AttackConfig(de=DEConfig(np=30, max_evals=900, seed=5), seed=5)
        result = attack(img, c, toy_model, gen_w, cfg)
        if not result.success:
            pytest.skip("attack failed on this seed; covered by acceptance suite")
        path = tmp_path / "adv.png"
        save_png(result.adv_image, path)
        reloaded = load_png(path)
        np.testing.assert_array_equal(reloaded.data, result.adv_image.data)
        assert int(np.argmax(toy_model.classify(reloaded))) != c

    def test_deterministic(self, gen_w, toy_model, holdout_set):
        img = holdout_set.images[7]
        c = int(np.argmax(toy_model.classify(img)))
        cfg = AttackConfig(de=DEConfig(np=10, max_evals=80, seed=6), seed=6)
        a = attack(img, c, toy_model, gen_w, cfg)
        b = attack(img, c, toy_model, gen_w, cfg)
        assert a.queries == b.queries
        assert a.success == b.success
        np.testing.assert_array_equal(a.params, b.params)
        np.testing.assert_array_equal(a.adv_image.data, b.adv_image.data)

    def test_channel_offsets_fixed_within_attack(self, gen_w):
        # the same parameter vector must map to the same image throughout one
        # attack, so the fitness landscape is static
        seen = {}

        class RecordingModel:
            label_count = 6
            concurrency = "safe"

            def classify(self, img):
                key = img.data.tobytes()
                seen[key] = seen.get(key, 0) + 1
                probs = np.full(6, 0.02)
                probs[0] = 0.9
                return probs

        img = Image(np.full((24, 24, 3), 0.5))
        cfg = AttackConfig(de=DEConfig(np=5, cr=0.0, f=0.5, max_evals=30, seed=7),
                           seed=7)
        attack(img, 0, RecordingModel(), gen_w, cfg)
        # cr=0 keeps parents unchanged, so every generation re-renders the same
        # five vectors; identical renders prove the channel config never moved
        assert max(seen.values()) > 1

    def test_alpha_validation(self):
        with pytest.raises(ValueError):
            AttackConfig(alpha=-0.1)
