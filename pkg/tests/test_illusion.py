"""Perceptual quantifiers, task-solver wrappers, restorer training."""
import numpy as np
import pytest

from phantasmagoria import illusion, networks, odog, stimulus
from phantasmagoria.illusion import PqConfig
from phantasmagoria.stimulus import TargetSpec


def textured_inducer(size=128, channels=1, seed=0):
    rng = np.random.default_rng(seed)
    img = rng.random((size, size, channels))
    for _ in range(6):
        img = (img + np.roll(img, 1, 0) + np.roll(img, 1, 1)
               + np.roll(img, -1, 0) + np.roll(img, -1, 1)) / 5.0
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo) * 0.8 + 0.1


@pytest.fixture(scope="module")
def square_stim():
    return stimulus.composite(textured_inducer(), TargetSpec("square", 28, 0.5))


@pytest.fixture(scope="module")
def small_restorer():
    rng = np.random.default_rng(21)
    net = networks.init_restorenet(rng=rng).astype(np.float64)
    for k in net.tensors:
        net.tensors[k] = net.tensors[k] * 5.0  # spread the responses
    return net


class TestMichelsonContrast:
    def test_reference_values_exact(self):
        assert abs(illusion.michelson_contrast([0.8, 0.2]) - 0.6) < 1e-12
        assert abs(illusion.michelson_contrast([0.4, 0.4, 0.4]) - 0.0) < 1e-12
        assert abs(illusion.michelson_contrast([0.7, 0.0]) - 1.0) < 1e-12

    def test_invalid_patches(self):
        with pytest.raises(ValueError):
            illusion.michelson_contrast([])
        with pytest.raises(ValueError):
            illusion.michelson_contrast([-0.1, 0.5])
        with pytest.raises(ValueError):
            illusion.michelson_contrast([0.0, 0.0])


class TestPqConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            PqConfig(kind="loudness")
        with pytest.raises(ValueError):
            PqConfig(sign="up_minus_down")
        with pytest.raises(ValueError):
            PqConfig(kind="color", channel_weights=(0.0, 0.0, 0.0))


class TestQuantifiers:
    def test_identity_vts_on_pasted_targets_is_exactly_zero(self, square_stim):
        for kind in ("lightness", "michelson"):
            config = PqConfig(kind=kind)
            assert illusion.score_stimulus(square_stim, config) == 0.0

    def test_identity_zero_for_color(self):
        stim = stimulus.composite(textured_inducer(channels=3),
                                  TargetSpec("square", 28, (0.5, 0.4, 0.3)))
        config = PqConfig(kind="color", channel_weights=(1.0, 1.0, 1.0))
        assert illusion.score_stimulus(stim, config) == 0.0

    def test_sign_convention_flips_exactly(self, square_stim):
        rng = np.random.default_rng(1)
        response = rng.random((128, 128, 1))
        for kind in ("lightness", "michelson"):
            a = illusion.perceptual_quantifier(
                response, square_stim, PqConfig(kind=kind, sign="right_minus_left"))
            b = illusion.perceptual_quantifier(
                response, square_stim, PqConfig(kind=kind, sign="left_minus_right"))
            assert a == -b
            assert a != 0.0

    def test_lightness_is_mean_area_difference(self, square_stim):
        response = np.zeros((128, 128, 1))
        response[square_stim.central_right] = 0.75
        response[square_stim.central_left] = 0.25
        config = PqConfig(kind="lightness", sign="right_minus_left")
        pq = illusion.perceptual_quantifier(response, square_stim, config)
        assert abs(pq - 0.5) < 1e-12

    def test_color_channel_weights_select_channels(self, square_stim):
        response = np.zeros((128, 128, 3))
        response[..., 0][square_stim.central_right] = 0.2
        response[..., 2][square_stim.central_right] = 0.4
        redder = PqConfig(kind="color", channel_weights=(1.0, 0.0, 0.0))
        bluer = PqConfig(kind="color", channel_weights=(0.0, 0.0, 1.0))
        yellower = PqConfig(kind="color", channel_weights=(0.0, 0.0, -1.0))
        pq_r = illusion.perceptual_quantifier(response, square_stim, redder)
        pq_b = illusion.perceptual_quantifier(response, square_stim, bluer)
        pq_y = illusion.perceptual_quantifier(response, square_stim, yellower)
        assert abs(pq_r - 0.2) < 1e-12
        assert abs(pq_b - 0.4) < 1e-12
        assert pq_y == -pq_b

    def test_michelson_quantifier_contrasts_the_areas(self, square_stim):
        response = np.full((128, 128, 1), 0.5)
        right = square_stim.central_right
        vals = response[right]
        vals[0] = 0.8
        vals[1] = 0.2
        response[right] = vals
        config = PqConfig(kind="michelson")
        pq = illusion.perceptual_quantifier(response, square_stim, config)
        assert abs(pq - 0.6) < 1e-12  # right 0.6, left 0.0

    def test_misaligned_response_rejected(self, square_stim):
        with pytest.raises(ValueError):
            illusion.perceptual_quantifier(np.zeros((64, 64, 1)), square_stim,
                                           PqConfig())


class TestQuantifierGradients:
    def test_lightness_gradient_matches_fd(self, square_stim):
        rng = np.random.default_rng(2)
        response = rng.random((128, 128, 1))
        config = PqConfig(kind="lightness")
        grad = illusion.pq_gradient(response, square_stim, config)

        n = square_stim.central_left.sum()
        assert np.allclose(grad[square_stim.central_right], 1.0 / n)
        assert np.allclose(grad[square_stim.central_left], -1.0 / n)
        outside = ~(square_stim.central_left | square_stim.central_right)
        assert np.all(grad[outside] == 0.0)

    def test_michelson_gradient_matches_fd_at_unique_extrema(self, square_stim):
        rng = np.random.default_rng(3)
        response = rng.random((128, 128, 1))  # continuous: unique extrema
        config = PqConfig(kind="michelson")
        grad = illusion.pq_gradient(response, square_stim, config)

        step = 1e-7
        probes = []
        for mask in (square_stim.central_right, square_stim.central_left):
            rows, cols = np.nonzero(mask)
            vals = response[mask][:, 0]
            probes.append((rows[np.argmax(vals)], cols[np.argmax(vals)]))
            probes.append((rows[np.argmin(vals)], cols[np.argmin(vals)]))
            probes.append((rows[3], cols[3]))  # interior, gradient 0
        for r, c in probes:
            orig = response[r, c, 0]
            response[r, c, 0] = orig + step
            up = illusion.perceptual_quantifier(response, square_stim, config)
            response[r, c, 0] = orig - step
            down = illusion.perceptual_quantifier(response, square_stim, config)
            response[r, c, 0] = orig
            numeric = (up - down) / (2 * step)
            assert abs(grad[r, c, 0] - numeric) < 1e-5

    def test_color_gradient_carries_weights(self, square_stim):
        config = PqConfig(kind="color", channel_weights=(2.0, 0.0, -1.0))
        response = np.random.default_rng(4).random((128, 128, 3))
        grad = illusion.pq_gradient(response, square_stim, config)
        n = square_stim.central_left.sum()
        assert np.allclose(grad[square_stim.central_right],
                           np.array([2.0, 0.0, -1.0]) / n)
        assert np.allclose(grad[square_stim.central_left],
                           np.array([-2.0, 0.0, 1.0]) / n)


class TestTaskSolvers:
    def test_identity_is_the_image(self, square_stim):
        out = illusion.vts_identity(square_stim.image)
        assert np.array_equal(out, square_stim.image)

    def test_restorer_keeps_channel_count(self, small_restorer, square_stim):
        out = illusion.vts_restore(small_restorer, square_stim.image)
        assert out.shape == (128, 128, 1)
        color = np.repeat(square_stim.image, 3, axis=2)
        assert illusion.vts_restore(small_restorer, color).shape == (128, 128, 3)

    def test_restorer_gray_adjoint_matches_fd(self, small_restorer):
        rng = np.random.default_rng(5)
        batch = rng.random((1, 128, 128, 1))
        coeff = rng.standard_normal((1, 128, 128, 1))
        responses, cache = illusion.restore_batch_for_grad(small_restorer, batch)
        grad = illusion.restore_batch_backward(cache, coeff)
        assert grad.shape == batch.shape

        step = 1e-6
        for idx in [(0, 3, 5, 0), (0, 64, 64, 0), (0, 120, 9, 0)]:
            orig = batch[idx]
            batch[idx] = orig + step
            up = float((illusion.restore_batch_for_grad(small_restorer, batch)[0]
                        * coeff).sum())
            batch[idx] = orig - step
            down = float((illusion.restore_batch_for_grad(small_restorer, batch)[0]
                          * coeff).sum())
            batch[idx] = orig
            numeric = (up - down) / (2 * step)
            assert abs(grad[idx] - numeric) < 1e-6 * max(1.0, abs(numeric))

    def test_brightness_model_rejects_color(self):
        with pytest.raises(ValueError):
            illusion.vts_odog(np.zeros((128, 128, 3)))

    def test_score_with_grad_matches_score(self, small_restorer, square_stim):
        config = PqConfig(kind="lightness")
        for kwargs in ({"vts": "identity"},
                       {"vts": "restorenet", "restorer": small_restorer}):
            direct = illusion.score_stimulus(square_stim, config, **kwargs)
            paired, grad = illusion.score_stimulus_with_grad(square_stim,
                                                             config, **kwargs)
            assert direct == paired
            assert grad.shape == square_stim.image.shape

    def test_restorer_score_gradient_matches_fd(self, small_restorer):
        stim = stimulus.composite(textured_inducer(seed=6),
                                  TargetSpec("square", 28, 0.5))
        config = PqConfig(kind="lightness")
        pq, grad = illusion.score_stimulus_with_grad(
            stim, config, vts="restorenet", restorer=small_restorer)

        step = 1e-6
        img = stim.image
        # probe inducer pixels adjacent to the targets (inside the
        # restorer's receptive field) and a distant one (gradient ~0)
        probes = [(64, 34 - 15, 0), (64, 94 + 15, 0), (5, 5, 0)]
        for r, c, ch in probes:
            orig = img[r, c, ch]
            img[r, c, ch] = orig + step
            up = illusion.score_stimulus(stim, config, vts="restorenet",
                                         restorer=small_restorer)
            img[r, c, ch] = orig - step
            down = illusion.score_stimulus(stim, config, vts="restorenet",
                                           restorer=small_restorer)
            img[r, c, ch] = orig
            numeric = (up - down) / (2 * step)
            assert abs(grad[r, c, ch] - numeric) < 1e-6

    def test_odog_score_gradient_matches_fd(self):
        model = odog.OdogModel(canvas=(128, 128), pixels_per_degree=32.0 / 3.0)
        stim = stimulus.composite(textured_inducer(seed=7),
                                  TargetSpec("square", 28, 0.5))
        config = PqConfig(kind="lightness")
        pq, grad = illusion.score_stimulus_with_grad(stim, config, vts="odog",
                                                     model=model)
        step = 1e-6
        img = stim.image
        for r, c in [(64, 15), (20, 64), (100, 100)]:
            orig = img[r, c, 0]
            img[r, c, 0] = orig + step
            up = illusion.score_stimulus(stim, config, vts="odog", model=model)
            img[r, c, 0] = orig - step
            down = illusion.score_stimulus(stim, config, vts="odog", model=model)
            img[r, c, 0] = orig
            numeric = (up - down) / (2 * step)
            assert abs(grad[r, c, 0] - numeric) < 1e-6 * max(1.0, abs(numeric))

    def test_unknown_vts_rejected(self, square_stim):
        with pytest.raises(ValueError):
            illusion.score_stimulus(square_stim, PqConfig(), vts="oracle")

    def test_canonical_display_reads_brighter_on_dark_side(self):
        # brightness-contrast: the target on the dark half is perceived
        # lighter, so right-minus-left is positive
        model = odog.OdogModel(canvas=(128, 128), pixels_per_degree=32.0 / 3.0)
        stim = stimulus.canonical_contrast_stimulus(0.5)
        config = PqConfig(kind="lightness", sign="right_minus_left")
        pq = illusion.score_stimulus(stim, config, vts="odog", model=model)
        assert pq > 0.0


@pytest.fixture(scope="module")
def tiny_clean():
    rng = np.random.default_rng(8)
    base = rng.random((8, 48, 48, 3))
    return np.clip(base, 0.0, 1.0)


class TestRestorerTraining:
    def test_zero_epochs_returns_init(self, tiny_clean):
        rng = np.random.default_rng(9)
        init = networks.init_restorenet(rng=np.random.default_rng(10))
        before = {k: v.copy() for k, v in init.tensors.items()}
        out = illusion.train_vts_restoration(tiny_clean, epochs=0, rng=rng,
                                             params=init)
        for k in before:
            assert np.array_equal(out.tensors[k], before[k])

    def test_loss_decreases(self, tiny_clean):
        out = illusion.train_vts_restoration(tiny_clean, epochs=8,
                                             batch_size=4, patch_size=32,
                                             rng=np.random.default_rng(11))
        trace = out.meta["train_loss"]
        assert len(trace) == 8
        assert trace[-1] < trace[0]

    def test_input_validation(self):
        with pytest.raises(ValueError):
            illusion.train_vts_restoration(np.zeros((0, 48, 48, 3)))
        with pytest.raises(ValueError):
            illusion.train_vts_restoration(np.zeros((4, 48, 48, 1)))
        with pytest.raises(ValueError):
            illusion.train_vts_restoration(np.zeros((4, 16, 16, 3)),
                                           patch_size=32)

    def test_degradation_blurs_and_clips(self):
        rng = np.random.default_rng(12)
        batch = np.zeros((1, 32, 32, 3))
        batch[0, 16, 16, :] = 1.0
        out = illusion.default_degradation(batch, rng)
        assert out.shape == batch.shape
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert out[0, 16, 16, 0] < 1.0  # impulse spread out
