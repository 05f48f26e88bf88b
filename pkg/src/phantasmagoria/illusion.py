"""The illusion discriminator: visual task solvers (VTS) plus perceptual
quantifiers (PQ).

A VTS maps a 128x128 stimulus to a response map standing in for the human
percept: either the small restoration network (trained for joint
deblurring and denoising), the parameter-free oriented-DOG brightness
model, or the identity (for calibration, where every quantifier must
return exactly zero because the two targets are pixel-identical).

A PQ reduces the response to one signed scalar over the central target
areas. Sign conventions: "right_minus_left" subtracts the left area from
the right one; flipping the convention negates the value exactly.

Grayscale stimuli feed the restoration network as three replicated
channels and its response is averaged back to one channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import networks, odog
from .networks import NetParams
from .stimulus import Stimulus

PQ_KINDS = ("lightness", "color", "michelson")
SIGNS = ("right_minus_left", "left_minus_right")

BLUR_SIGMA = 1.0       # 5x5 support at truncate=2
NOISE_SIGMA = 0.1


@dataclass(frozen=True)
class PqConfig:
    kind: str = "lightness"
    sign: str = "right_minus_left"
    channel_weights: tuple[float, float, float] = (1.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in PQ_KINDS:
            raise ValueError(f"unknown quantifier kind {self.kind!r}")
        if self.sign not in SIGNS:
            raise ValueError(f"unknown sign convention {self.sign!r}")
        if self.kind == "color" and not any(w != 0 for w in self.channel_weights):
            raise ValueError("color quantifier needs at least one nonzero "
                             "channel weight")


# ---------------------------------------------------------------------------
# visual task solvers
# ---------------------------------------------------------------------------

def vts_identity(image) -> np.ndarray:
    """The stimulus itself as its own percept."""
    return np.asarray(image, dtype=np.float64)


def vts_restore(params: NetParams, image) -> np.ndarray:
    """Restoration-network percept; keeps the input's channel count."""
    out, _ = restore_batch_for_grad(params, np.asarray(image)[None])
    return out[0]


def restore_batch_for_grad(params: NetParams, batch):
    """Run the restorer on (n, 128, 128, 1|3); returns (responses, cache)."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or batch.shape[1:3] != (128, 128):
        raise ValueError(f"expected (n, 128, 128, c) batch, got {batch.shape}")
    gray = batch.shape[3] == 1
    fed = np.repeat(batch, 3, axis=3) if gray else batch
    tape = []
    out3 = networks.restorenet_apply(params, fed, tape)
    out = out3.mean(axis=3, keepdims=True) if gray else out3
    return out, (tape, gray)


def restore_batch_backward(cache, grad_responses):
    """Gradient wrt the batch fed to restore_batch_for_grad."""
    tape, gray = cache
    g = np.asarray(grad_responses)
    if gray:
        g = np.repeat(g / 3.0, 3, axis=3)
    _, grad_in = networks.restorenet_backward(tape, g)
    if gray:
        grad_in = grad_in.sum(axis=3, keepdims=True)
    return grad_in


def vts_odog(image, model: odog.OdogModel | None = None) -> np.ndarray:
    """Brightness-model percept of a single-channel 128x128 stimulus."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[2] != 1:
            raise ValueError("the brightness model takes luminance input; "
                             "convert color stimuli first")
        arr = arr[:, :, 0]
    model = model or odog.default_model()
    return model.evaluate(arr)[:, :, None]


# ---------------------------------------------------------------------------
# restoration training
# ---------------------------------------------------------------------------

def default_degradation(batch, rng) -> np.ndarray:
    """Gaussian blur (sigma 1 px, 5x5 support) then additive Gaussian noise
    (sigma 0.1), clipped back to [0,1]."""
    blurred = ndimage.gaussian_filter(
        batch, sigma=(0, BLUR_SIGMA, BLUR_SIGMA, 0), truncate=2.0,
        mode="nearest")
    noisy = blurred + rng.normal(0.0, NOISE_SIGMA, size=batch.shape)
    return np.clip(noisy, 0.0, 1.0)


def train_vts_restoration(dataset, degradation=default_degradation, epochs=20,
                          *, batch_size=16, patch_size=32, lr=2e-3,
                          rng=None, params=None) -> NetParams:
    """Fit the restorer to undo `degradation` by mean squared error.

    dataset: (n, h, w, 3) clean images in [0,1]. Training runs on random
    patch crops (the network is fully convolutional). epochs=0 returns the
    initialization untouched. The per-epoch loss trace lands in
    meta["train_loss"].
    """
    from .ops import Adam

    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 4 or data.shape[0] == 0 or data.shape[3] != 3:
        raise ValueError("dataset must be a nonempty (n, h, w, 3) array")
    if data.shape[1] < patch_size or data.shape[2] < patch_size:
        raise ValueError(f"images smaller than the {patch_size}px patch size")
    rng = rng or np.random.default_rng(0)
    params = params if params is not None else networks.init_restorenet(
        rng=rng, dtype=np.float64)
    if epochs == 0:
        return params

    opt = Adam(lr=lr)
    n = data.shape[0]
    steps = max(1, n // batch_size)
    trace = []
    for _ in range(epochs):
        epoch_loss = 0.0
        for _ in range(steps):
            idx = rng.integers(n, size=batch_size)
            ys = rng.integers(data.shape[1] - patch_size + 1, size=batch_size)
            xs = rng.integers(data.shape[2] - patch_size + 1, size=batch_size)
            clean = np.stack([data[i, y:y + patch_size, x:x + patch_size]
                              for i, y, x in zip(idx, ys, xs)])
            degraded = degradation(clean, rng)
            tape = []
            restored = networks.restorenet_apply(params, degraded, tape)
            diff = restored - clean
            loss = float(np.mean(diff ** 2))
            if not np.isfinite(loss):
                raise FloatingPointError("restoration loss became non-finite")
            grads, _ = networks.restorenet_backward(
                tape, 2.0 * diff / diff.size)
            opt.step(params.tensors, grads)
            epoch_loss += loss
        trace.append(epoch_loss / steps)
    params.meta["pretrained"] = True
    params.meta["train_loss"] = trace
    return params


# ---------------------------------------------------------------------------
# perceptual quantifiers
# ---------------------------------------------------------------------------

def _area_values(response, mask, channels):
    arr = np.asarray(response, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[2] != channels:
        raise ValueError(f"expected a {channels}-channel response, "
                         f"got {arr.shape[2]}")
    if arr.shape[:2] != mask.shape:
        raise ValueError(f"response {arr.shape[:2]} misaligned with mask "
                         f"{mask.shape}")
    return arr[mask]  # (n_pixels, channels), row-major


def _paired_areas(response, stim: Stimulus, channels):
    left = _area_values(response, stim.central_left, channels)
    right = _area_values(response, stim.central_right, channels)
    if left.shape != right.shape or left.shape[0] == 0:
        raise ValueError("central areas are empty or of unequal size")
    return left, right


def _signed(value, config: PqConfig):
    return value if config.sign == "right_minus_left" else -value


def pq_lightness(response, stim: Stimulus, config: PqConfig) -> float:
    """Mean pointwise difference of the two central areas (the masks are
    translates of each other, so row-major order pairs the points)."""
    left, right = _paired_areas(response, stim, 1)
    return _signed(float(np.mean(right - left)), config)


def pq_color(response, stim: Stimulus, config: PqConfig) -> float:
    """Channel-weighted mean pointwise difference; weight 0 leaves a
    channel free."""
    left, right = _paired_areas(response, stim, 3)
    per_channel = np.mean(right - left, axis=0)
    return _signed(float(np.dot(config.channel_weights, per_channel)), config)


def michelson_contrast(patch) -> float:
    """(max - min) / (max + min) over a nonnegative patch."""
    vals = np.asarray(patch, dtype=np.float64)
    if vals.size == 0:
        raise ValueError("empty patch")
    lo, hi = float(vals.min()), float(vals.max())
    if lo < 0.0:
        raise ValueError("Michelson contrast needs a nonnegative patch")
    if hi + lo == 0.0:
        raise ValueError("all-zero patch has no defined contrast")
    return (hi - lo) / (hi + lo)


def pq_michelson(response, stim: Stimulus, config: PqConfig) -> float:
    """Difference of the two central areas' Michelson contrasts."""
    left, right = _paired_areas(response, stim, 1)
    value = michelson_contrast(right) - michelson_contrast(left)
    return _signed(value, config)


def perceptual_quantifier(response, stim: Stimulus, config: PqConfig) -> float:
    fn = {"lightness": pq_lightness, "color": pq_color,
          "michelson": pq_michelson}[config.kind]
    return fn(response, stim, config)


def pq_gradient(response, stim: Stimulus, config: PqConfig) -> np.ndarray:
    """d(PQ)/d(response), same shape as the response.

    Michelson uses the subgradient concentrated on the first max/min pixel
    of each area.
    """
    arr = np.asarray(response, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    grad = np.zeros_like(arr)
    sgn = 1.0 if config.sign == "right_minus_left" else -1.0
    nl = int(stim.central_left.sum())

    if config.kind in ("lightness", "color"):
        weights = (np.array([1.0]) if config.kind == "lightness"
                   else np.asarray(config.channel_weights, dtype=np.float64))
        grad[stim.central_right] += sgn * weights / nl
        grad[stim.central_left] -= sgn * weights / nl
    else:
        for mask, s in ((stim.central_right, sgn), (stim.central_left, -sgn)):
            vals = arr[mask][:, 0]
            hi, lo = float(vals.max()), float(vals.min())
            if hi + lo == 0.0:
                raise ValueError("all-zero central area has no defined contrast")
            dmax = 2.0 * lo / (hi + lo) ** 2
            dmin = -2.0 * hi / (hi + lo) ** 2
            rows, cols = np.nonzero(mask)
            imax, imin = int(np.argmax(vals)), int(np.argmin(vals))
            grad[rows[imax], cols[imax], 0] += s * dmax
            grad[rows[imin], cols[imin], 0] += s * dmin
    return grad[:, :, 0] if squeeze else grad


# ---------------------------------------------------------------------------
# stimulus scoring (VTS + PQ composed, with gradient wrt the stimulus)
# ---------------------------------------------------------------------------

def score_stimulus(stim: Stimulus, config: PqConfig, *, vts="identity",
                   restorer: NetParams | None = None,
                   model: odog.OdogModel | None = None) -> float:
    if vts == "identity":
        response = vts_identity(stim.image)
    elif vts == "restorenet":
        response = vts_restore(restorer, stim.image)
    elif vts == "odog":
        response = vts_odog(stim.image, model)
    else:
        raise ValueError(f"unknown visual task solver {vts!r}")
    return perceptual_quantifier(response, stim, config)


def score_stimulus_with_grad(stim: Stimulus, config: PqConfig, *,
                             vts="identity", restorer: NetParams | None = None,
                             model: odog.OdogModel | None = None):
    """Returns (pq, d(pq)/d(stimulus image))."""
    image = np.asarray(stim.image, dtype=np.float64)
    if vts == "identity":
        pq = perceptual_quantifier(image, stim, config)
        return pq, pq_gradient(image, stim, config)
    if vts == "restorenet":
        responses, cache = restore_batch_for_grad(restorer, image[None])
        pq = perceptual_quantifier(responses[0], stim, config)
        g = pq_gradient(responses[0], stim, config)
        return pq, restore_batch_backward(cache, g[None])[0]
    if vts == "odog":
        m = model or odog.default_model()
        result, cache = m.evaluate_for_grad(image[:, :, 0])
        pq = perceptual_quantifier(result[:, :, None], stim, config)
        g = pq_gradient(result[:, :, None], stim, config)
        return pq, m.backward(g[:, :, 0], cache)[:, :, None]
    raise ValueError(f"unknown visual task solver {vts!r}")
