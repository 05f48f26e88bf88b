"""Oriented difference-of-Gaussians brightness model.

Six orientations in 30 degree steps, seven octave-spaced spatial scales.
Each filter is a DOG whose surround Gaussian is elongated 2:1 along the
filter orientation (0 degrees = vertical, rotating clockwise) with twice
the center standard deviation along that axis. Scale responses are summed
with weights (1/scale)^0.1, each orientation's combined response is divided
by its spatial root-mean-square, and the normalized orientations are summed.

Kernels are evaluated on the full analysis canvas and normalized by their
discrete sum, so every DOG integrates to zero to float precision. Inputs
smaller than the canvas are padded with the border value if it is constant,
otherwise with the image mean; filtering is circular via FFT. Stimuli are
assumed to subtend 3 degrees per 128 pixels.

The scale summation is folded into one combined kernel per orientation
before the FFT, which is exactly equal to weighting the per-scale responses
afterwards and makes the bank small enough to cache.
"""

from __future__ import annotations

import os

import numpy as np

ROBINSON_SCALES = 2.0 ** np.arange(-2, 5) * 1.5 * (np.log(2) / 6.0) ** 0.5
DEFAULT_ORIENTATIONS = np.arange(0.0, 180.0, 30.0)
DEFAULT_CANVAS = (512, 512)
DEFAULT_PIXELS_PER_DEGREE = 128.0 / 3.0
DEFAULT_WEIGHTS_SLOPE = 0.1

# center std in degrees from the scale (zero-crossing spacing) value
CENTER_SIGMA_FACTOR = 0.125 * np.sqrt(3.0 / np.log(2))

# orientations whose response RMS is below 1/GUARD carry no signal and are
# dropped from the sum instead of being amplified to noise
NORMALIZATION_GUARD = 1e10

SURROUND_SIGMA_RATIO = 2.0


def gaussian_kernel(sigma_y, sigma_x, angle_deg, shape) -> np.ndarray:
    """Rotated anisotropic Gaussian on a shape-sized grid, sum-normalized.

    sigma_y runs along the vertical at angle 0; positive angles rotate
    clockwise. The grid spans [-(n-1)/2, (n-1)/2] per axis, so even-sized
    canvases sample at half-integer offsets.
    """
    theta = np.radians(angle_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])
    cov = rot @ np.diag([sigma_x ** 2, sigma_y ** 2]) @ rot.T
    yy, xx = np.ogrid[-(shape[0] - 1) / 2.0: shape[0] / 2.0,
                      -(shape[1] - 1) / 2.0: shape[1] / 2.0]
    rho2 = cov[0, 1] * cov[1, 0] / (cov[0, 0] * cov[1, 1])
    quad = (xx ** 2 / cov[0, 0] + yy ** 2 / cov[1, 1]
            - 2.0 * cov[1, 0] * xx * yy / (cov[0, 0] * cov[1, 1]))
    g = np.exp(-0.5 / (1.0 - rho2) * quad)
    return g / g.sum()


def dog_kernel(center_sigma, angle_deg, shape) -> np.ndarray:
    """Isotropic center minus 2:1-elongated surround; sums to ~0 exactly."""
    center = gaussian_kernel(center_sigma, center_sigma, angle_deg, shape)
    surround = gaussian_kernel(SURROUND_SIGMA_RATIO * center_sigma,
                               center_sigma, angle_deg, shape)
    return center - surround


def _border_is_constant(arr) -> bool:
    border = np.concatenate([arr[0], arr[-1], arr[:, 0], arr[:, -1]])
    return bool((border == border[0]).all())


class OdogModel:
    """Precomputed filter bank over a fixed analysis canvas."""

    def __init__(self, canvas=DEFAULT_CANVAS, spatial_scales=None,
                 orientations=None, pixels_per_degree=DEFAULT_PIXELS_PER_DEGREE,
                 weights_slope=DEFAULT_WEIGHTS_SLOPE, *, _spectra=None):
        self.canvas = tuple(int(c) for c in canvas)
        self.spatial_scales = np.array(
            ROBINSON_SCALES if spatial_scales is None else spatial_scales,
            dtype=np.float64)
        self.orientations = np.array(
            DEFAULT_ORIENTATIONS if orientations is None else orientations,
            dtype=np.float64)
        self.pixels_per_degree = float(pixels_per_degree)
        self.weights_slope = float(weights_slope)
        self.scale_weights = (1.0 / self.spatial_scales) ** self.weights_slope
        if _spectra is not None:
            self.spectra = _spectra
        else:
            sigmas_px = (self.spatial_scales * CENTER_SIGMA_FACTOR
                         * self.pixels_per_degree)
            spectra = np.empty((len(self.orientations), self.canvas[0],
                                self.canvas[1] // 2 + 1), dtype=np.complex128)
            for i, angle in enumerate(self.orientations):
                combined = np.zeros(self.canvas)
                for w, sigma in zip(self.scale_weights, sigmas_px):
                    combined += w * dog_kernel(sigma, angle, self.canvas)
                spectra[i] = np.fft.rfft2(combined)
            self.spectra = spectra

    # -- geometry helpers ---------------------------------------------------

    def _pad_offsets(self, shape):
        if shape == self.canvas:
            return (0, 0), (0, 0)
        if shape[0] > self.canvas[0] or shape[1] > self.canvas[1]:
            raise ValueError(f"input {shape} exceeds the {self.canvas} canvas")
        # the +-0.1 nudge splits odd padding as (k, k+1)
        before = [int(round((self.canvas[i] - shape[i] - 0.1) / 2.0))
                  for i in (0, 1)]
        after = [self.canvas[i] - shape[i] - before[i] for i in (0, 1)]
        return tuple(before), tuple(after)

    def _pad(self, image):
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 2:
            raise ValueError(f"expected a 2D luminance image, got {image.shape}")
        before, after = self._pad_offsets(image.shape)
        if before == (0, 0) and after == (0, 0):
            return image, before, "none"
        mode = "border" if _border_is_constant(image) else "mean"
        val = image[0, 0] if mode == "border" else image.mean()
        padded = np.pad(image, (tuple(zip(before, after))), constant_values=val)
        return padded, before, mode

    # -- forward ------------------------------------------------------------

    def filter_responses(self, image) -> np.ndarray:
        """Pre-normalization responses, one per orientation, input-sized.

        This stage is linear in the input up to the constant pad offset
        (exactly linear for images whose padding value is 0).
        """
        image = np.asarray(image, dtype=np.float64)
        h, w = image.shape
        padded, before, _ = self._pad(image)
        spec = np.fft.rfft2(padded)
        conv = np.fft.irfft2(self.spectra * spec[None], s=self.canvas)
        conv = np.fft.fftshift(conv, axes=(1, 2))
        return conv[:, before[0]:before[0] + h, before[1]:before[1] + w]

    def normalize_and_sum(self, responses):
        """RMS-normalize each orientation and sum. Returns (map, weights)."""
        rms = np.sqrt(np.mean(responses ** 2, axis=(1, 2)))
        with np.errstate(divide="ignore"):
            weights = np.where(rms > 0, 1.0 / np.maximum(rms, 1e-300), np.inf)
        weights[weights > NORMALIZATION_GUARD] = 0.0
        return np.tensordot(weights, responses, (0, 0)), weights

    def evaluate(self, image) -> np.ndarray:
        return self.normalize_and_sum(self.filter_responses(image))[0]

    # -- backward -----------------------------------------------------------

    def evaluate_for_grad(self, image):
        """Forward pass that keeps what the backward pass needs."""
        image = np.asarray(image, dtype=np.float64)
        padded, before, pad_mode = self._pad(image)
        spec = np.fft.rfft2(padded)
        conv = np.fft.irfft2(self.spectra * spec[None], s=self.canvas)
        conv = np.fft.fftshift(conv, axes=(1, 2))
        h, w = image.shape
        responses = conv[:, before[0]:before[0] + h, before[1]:before[1] + w]
        result, weights = self.normalize_and_sum(responses)
        cache = (responses, weights, before, pad_mode, image.shape)
        return result, cache

    def backward(self, grad_result, cache):
        """Gradient of a scalar loss wrt the input image.

        The padding value's dependence on the input (mean or border pixel)
        is differentiated along whichever branch the forward pass took.
        """
        responses, weights, before, pad_mode, shape = cache
        h, w = shape
        n = h * w
        # d(sum_o w_o R_o)/dR_o with w_o = 1/rms(R_o):
        #   g/rms - R_o * mean(g*R_o) / rms^3, and 0 for guarded orientations
        grad_resp = np.empty_like(responses)
        for o in range(len(weights)):
            if weights[o] == 0.0:
                grad_resp[o] = 0.0
                continue
            inner = np.mean(grad_result * responses[o])
            grad_resp[o] = (grad_result * weights[o]
                            - responses[o] * inner * weights[o] ** 3)
        # crop adjoint: place into the canvas, then undo the fftshift
        full = np.zeros((len(weights),) + self.canvas)
        full[:, before[0]:before[0] + h, before[1]:before[1] + w] = grad_resp
        full = np.fft.ifftshift(full, axes=(1, 2))
        spec = np.fft.rfft2(full)
        grad_padded = np.fft.irfft2(
            (np.conj(self.spectra) * spec).sum(axis=0), s=self.canvas)
        grad_image = grad_padded[before[0]:before[0] + h,
                                 before[1]:before[1] + w].copy()
        pad_total = grad_padded.sum() - grad_image.sum()
        if pad_mode == "mean":
            grad_image += pad_total / n
        elif pad_mode == "border":
            grad_image[0, 0] += pad_total
        return grad_image

    # -- persistence --------------------------------------------------------

    def key(self) -> dict:
        return {"canvas": list(self.canvas),
                "spatial_scales": self.spatial_scales.tolist(),
                "orientations": self.orientations.tolist(),
                "pixels_per_degree": self.pixels_per_degree,
                "weights_slope": self.weights_slope}

    def save(self, path):
        np.savez(path, spectra=self.spectra,
                 canvas=np.array(self.canvas),
                 spatial_scales=self.spatial_scales,
                 orientations=self.orientations,
                 pixels_per_degree=np.array(self.pixels_per_degree),
                 weights_slope=np.array(self.weights_slope))

    @classmethod
    def load(cls, path) -> "OdogModel":
        with np.load(path) as d:
            return cls(canvas=tuple(d["canvas"]),
                       spatial_scales=d["spatial_scales"],
                       orientations=d["orientations"],
                       pixels_per_degree=float(d["pixels_per_degree"]),
                       weights_slope=float(d["weights_slope"]),
                       _spectra=d["spectra"])


_default_model: OdogModel | None = None


def default_model() -> OdogModel:
    """Shared default-parameter instance, built once per process.

    Set PHANTASMAGORIA_ODOG_CACHE to a directory to persist the filter bank
    across processes; the cache round-trips bit-exactly.
    """
    global _default_model
    if _default_model is None:
        cache_dir = os.environ.get("PHANTASMAGORIA_ODOG_CACHE")
        cache_path = None
        if cache_dir:
            os.makedirs(cache_dir, exist_ok=True)
            cache_path = os.path.join(cache_dir, "odog_bank_default.npz")
            if os.path.exists(cache_path):
                _default_model = OdogModel.load(cache_path)
                return _default_model
        _default_model = OdogModel()
        if cache_path:
            _default_model.save(cache_path)
    return _default_model
