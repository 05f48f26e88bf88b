"""Target construction, compositing onto inducer backgrounds, canonical
reference stimuli, and resolution changes between the generator (32x32) and
the task-solver resolution (128x128).

Geometry defaults at 128x128: square targets 28x28 centered at row 64,
columns 34 and 94; rings outer diameter 28, inner 14; bars 12 wide by 80
tall; gratings 28x28 at 0.25 cycles/pixel. Column centers satisfy
left + right == width so the two bounding boxes mirror about the vertical
midline.

The central scoring area of a target is the centered box covering
CENTRAL_FRACTION of each linear extent (rounded down to even), intersected
with the target's coverage mask. The restoration task solver has a +-4 px
receptive field and its strongest induced response sits one pixel inside
the target border, so the default fraction keeps a single-pixel margin on
a 28 px square (central box 26x26). Wider margins were measured to cut the
attainable lightness quantifier by more than an order of magnitude.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

VTS_SIZE = 128
GENERATOR_SIZE = 32
TARGET_ROW = 64
LEFT_COL = 34
RIGHT_COL = 94

DEFAULT_TARGET_SIZE = 28
RING_INNER_RATIO = 0.5     # inner diameter 14 for the default 28
BAR_THICKNESS_RATIO = 0.15  # 12 wide for the default 80 tall
DEFAULT_GRATING_FREQUENCY = 0.25

CENTRAL_FRACTION = 0.93

SHAPES = ("square", "ring", "bar", "grating")


def validate_image(image) -> np.ndarray:
    """Check the (h, w, c) intensity-array contract and return the array."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected (h, w, 1|3) image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"image values outside [0,1]: "
                         f"min={arr.min():.4g} max={arr.max():.4g}")
    return arr


@dataclass(frozen=True)
class TargetSpec:
    """Description of the two identical targets pasted onto an inducer."""

    shape: str = "square"
    size: int = DEFAULT_TARGET_SIZE
    value: float | tuple[float, float, float] = 0.5
    orientation: float = 0.0          # gratings only, degrees
    frequency: float = DEFAULT_GRATING_FREQUENCY  # gratings only, cycles/pixel
    contrast: float = 0.0             # gratings only, Michelson

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown target shape {self.shape!r}, "
                             f"expected one of {SHAPES}")
        if self.size < 2:
            raise ValueError("target size must be at least 2 pixels")
        vals = self.value_array()
        if vals.min() < 0.0 or vals.max() > 1.0:
            raise ValueError("target value must lie in [0,1]")
        if self.shape == "grating":
            hi = vals.max() * (1.0 + self.contrast)
            if self.contrast < 0.0 or hi > 1.0 + 1e-12:
                raise ValueError(
                    f"grating excursion value*(1+contrast)={hi:.4g} leaves [0,1]")

    def value_array(self) -> np.ndarray:
        v = np.atleast_1d(np.asarray(self.value, dtype=np.float64))
        if v.shape not in ((1,), (3,)):
            raise ValueError("value must be a scalar or a 3-channel tuple")
        return v

    @property
    def channels(self) -> int:
        return self.value_array().shape[0]


def _box_dims(spec: TargetSpec) -> tuple[int, int]:
    """Bounding box (height, width) of the target patch."""
    if spec.shape == "bar":
        thickness = max(1, round(spec.size * BAR_THICKNESS_RATIO))
        return spec.size, thickness
    return spec.size, spec.size


def make_target(spec: TargetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Build one target patch.

    Returns (patch, mask): patch is (h, w, c) and mask a boolean (h, w)
    coverage map. Pixels outside the mask are zero and are never pasted.
    """
    h, w = _box_dims(spec)
    vals = spec.value_array()
    c = vals.shape[0]

    if spec.shape in ("square", "bar"):
        mask = np.ones((h, w), dtype=bool)
        patch = np.broadcast_to(vals, (h, w, c)).copy()
    elif spec.shape == "ring":
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        rr = np.hypot(yy - cy, xx - cx)
        outer = spec.size / 2.0
        inner = outer * RING_INNER_RATIO
        mask = (rr <= outer) & (rr >= inner)
        patch = np.where(mask[:, :, None], vals, 0.0)
    else:  # grating
        yy, xx = np.mgrid[0:h, 0:w]
        theta = np.deg2rad(spec.orientation)
        phase = 2.0 * np.pi * spec.frequency * (xx * np.cos(theta)
                                                + yy * np.sin(theta))
        # cosine phase: integer sampling at orientation 0/90 with frequency
        # 0.25 hits the exact extrema value*(1 +- contrast)
        wave = 1.0 + spec.contrast * np.cos(phase)
        mask = np.ones((h, w), dtype=bool)
        patch = vals[None, None, :] * wave[:, :, None]

    patch = np.clip(patch, 0.0, 1.0)
    if not mask.any():
        raise ValueError("target mask is empty")
    return patch.astype(np.float64), mask


@dataclass
class Stimulus:
    """A composited stimulus plus the masks the quantifiers score."""

    image: np.ndarray
    left_mask: np.ndarray
    right_mask: np.ndarray
    central_left: np.ndarray
    central_right: np.ndarray
    spec: TargetSpec | None = None
    meta: dict = field(default_factory=dict)


def _central_box_mask(mask: np.ndarray, top: int, left: int, h: int, w: int,
                      fraction: float) -> np.ndarray:
    """Centered even-sized sub-box of the bounding box, cut to the mask."""
    ch = max(2, int(h * fraction) // 2 * 2)
    cw = max(2, int(w * fraction) // 2 * 2)
    r0 = top + (h - ch) // 2
    c0 = left + (w - cw) // 2
    central = np.zeros_like(mask)
    central[r0:r0 + ch, c0:c0 + cw] = True
    return central & mask


def composite(inducer, spec: TargetSpec, left_pos=(TARGET_ROW, LEFT_COL),
              right_pos=(TARGET_ROW, RIGHT_COL), *,
              central_fraction: float | None = None) -> Stimulus:
    """Paste two identical targets onto an inducer, mirror-placed.

    Positions are (row, col) centers; the boxes must fit inside the image,
    not overlap, and mirror about the vertical midline. Target pixels
    overwrite inducer pixels exactly.
    """
    inducer = validate_image(inducer)
    ih, iw, ic = inducer.shape
    patch, mask = make_target(spec)
    ph, pw = mask.shape
    if spec.channels == 1 and ic == 3:
        patch = np.broadcast_to(patch, (ph, pw, 3))
    elif spec.channels == 3 and ic == 1:
        raise ValueError("cannot paste a color target onto a grayscale inducer")

    fraction = CENTRAL_FRACTION if central_fraction is None else central_fraction
    boxes = []
    for (row, col) in (left_pos, right_pos):
        top, left = row - ph // 2, col - pw // 2
        if top < 0 or left < 0 or top + ph > ih or left + pw > iw:
            raise ValueError(f"target box at ({row},{col}) exceeds the "
                             f"{ih}x{iw} image")
        boxes.append((top, left))
    (lt, ll), (rt, rl) = boxes
    if lt != rt:
        raise ValueError("target positions must share a row")
    if ll + (rl + pw) != iw:
        raise ValueError("target positions must mirror about the vertical "
                         f"midline: left start {ll} + right end {rl + pw} != {iw}")
    if rl < ll + pw:
        raise ValueError("target boxes overlap")

    image = inducer.astype(np.float64).copy()
    full_masks, central_masks = [], []
    for top, left in boxes:
        view = image[top:top + ph, left:left + pw]
        view[mask] = patch[mask]
        m = np.zeros((ih, iw), dtype=bool)
        m[top:top + ph, left:left + pw] = mask
        full_masks.append(m)
        central_masks.append(_central_box_mask(m, top, left, ph, pw, fraction))

    return Stimulus(image=image, left_mask=full_masks[0],
                    right_mask=full_masks[1], central_left=central_masks[0],
                    central_right=central_masks[1], spec=spec,
                    meta={"left_pos": tuple(left_pos),
                          "right_pos": tuple(right_pos),
                          "central_fraction": fraction})


def stimulus_from_image(image, spec: TargetSpec,
                        left_pos=(TARGET_ROW, LEFT_COL),
                        right_pos=(TARGET_ROW, RIGHT_COL), *,
                        central_fraction: float | None = None) -> Stimulus:
    """Rebuild a Stimulus around an already-composed image.

    For re-scoring saved PNGs: the pixels are taken exactly as given
    (including any 8-bit quantization), while the masks are recomputed
    from the target geometry — the geometry is deterministic, so this is
    the same bookkeeping compositing would have produced.
    """
    image = validate_image(image).astype(np.float64)
    ih, iw, _ = image.shape
    _, mask = make_target(spec)
    ph, pw = mask.shape
    fraction = CENTRAL_FRACTION if central_fraction is None else central_fraction
    full_masks, central_masks = [], []
    for (row, col) in (left_pos, right_pos):
        top, left = row - ph // 2, col - pw // 2
        if top < 0 or left < 0 or top + ph > ih or left + pw > iw:
            raise ValueError(f"target box at ({row},{col}) exceeds the "
                             f"{ih}x{iw} image")
        m = np.zeros((ih, iw), dtype=bool)
        m[top:top + ph, left:left + pw] = mask
        full_masks.append(m)
        central_masks.append(_central_box_mask(m, top, left, ph, pw, fraction))
    return Stimulus(image=image, left_mask=full_masks[0],
                    right_mask=full_masks[1], central_left=central_masks[0],
                    central_right=central_masks[1], spec=spec,
                    meta={"left_pos": tuple(left_pos),
                          "right_pos": tuple(right_pos),
                          "central_fraction": fraction})


def canonical_contrast_stimulus(gray: float = 0.5, *, size: int = VTS_SIZE,
                                target_size: int = DEFAULT_TARGET_SIZE) -> Stimulus:
    """The reference brightness-contrast display: white left half, black
    right half, identical gray squares centered in each half."""
    if not 0.0 < gray < 1.0:
        raise ValueError("gray must lie strictly inside (0, 1)")
    inducer = np.zeros((size, size, 1), dtype=np.float64)
    inducer[:, :size // 2] = 1.0
    spec = TargetSpec(shape="square", size=target_size, value=gray)
    row = size // 2
    left_col = size * LEFT_COL // VTS_SIZE
    return composite(inducer, spec, (row, left_col), (row, size - left_col))


def upscale_nearest(image, factor: int) -> np.ndarray:
    """Replicate each pixel into a factor x factor block."""
    if not float(factor).is_integer() or factor < 1:
        raise ValueError(f"upscale factor must be a positive integer, got {factor}")
    factor = int(factor)
    arr = validate_image(image)
    return np.repeat(np.repeat(arr, factor, axis=0), factor, axis=1)


def mirror_horizontal(image) -> np.ndarray:
    """Flip left-right; used to balance target sides across trials."""
    return np.asarray(image)[:, ::-1]


# ---------------------------------------------------------------------------
# 8-bit PNG persistence (round(v*255)); masks as 1-bit PNG
# ---------------------------------------------------------------------------

def _to_pil(image) -> Image.Image:
    arr = validate_image(image)
    q = np.round(arr * 255.0).astype(np.uint8)
    if q.shape[2] == 1:
        return Image.fromarray(q[:, :, 0], mode="L")
    return Image.fromarray(q, mode="RGB")


def save_image_png(path, image):
    _to_pil(image).save(path, format="PNG")


def encode_image_png(image) -> bytes:
    """PNG bytes for an image, identical to what save_image_png writes."""
    buf = io.BytesIO()
    _to_pil(image).save(buf, format="PNG")
    return buf.getvalue()


def load_image_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def save_mask_png(path, mask):
    mask = np.asarray(mask, dtype=bool)
    Image.fromarray(mask).convert("1").save(path, format="PNG")


def load_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("1"), dtype=bool)
