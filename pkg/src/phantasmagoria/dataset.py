"""Image corpora for background-discriminator training.

A store enumerates decodable images from a directory (PNG/JPEG), or from
the standard binary batch format natural 32x32 corpora ship in (records of
one label byte plus 3072 planar RGB bytes). Batches are random 32x32 crops:
textures are cropped rather than resized to preserve their frequency
content, natural 32x32 images pass through whole.

Sampling is reproducible: the store owns a seeded generator, and parallel
consumers can pass their own streams.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

CROP_SIZE = 32
MIN_SIDE = 32

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

SOURCES = ("textures", "natural")


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Collapse an (h, w, 3) image to (h, w, 1) with video-luma weights."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (h, w, 3), got {arr.shape}")
    return arr @ LUMA_WEIGHTS[:, None]


@dataclass
class ImageStore:
    source: str
    channels: int
    rng_seed: int
    images: list[np.ndarray] = field(default_factory=list)
    rejected: int = 0
    rng: np.random.Generator = None

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(self.rng_seed)

    def __len__(self):
        return len(self.images)


def _decode_file(path) -> np.ndarray | None:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            return np.asarray(im, dtype=np.float64) / 255.0
    except Exception:
        return None


def _read_binary_batches(path) -> list[np.ndarray]:
    """Records of 1 label byte + 32*32*3 planar RGB bytes."""
    record = 1 + 3 * 32 * 32
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % record:
        raise ValueError(f"{path} is not a stack of {record}-byte records")
    recs = raw.reshape(-1, record)[:, 1:]
    planes = recs.reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return [img.astype(np.float64) / 255.0 for img in planes]


def load_store(path, source="textures", channels=1, seed=0) -> ImageStore:
    """Enumerate usable images under a directory (or a single binary batch
    file). Images under 32px on a side are rejected with a warning."""
    if source not in SOURCES:
        raise ValueError(f"unknown source {source!r}, expected one of {SOURCES}")
    if channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")

    entries = []
    if os.path.isfile(path) and path.endswith(".bin"):
        entries = [("bin", path)]
    elif os.path.isdir(path):
        for name in sorted(os.listdir(path)):
            full = os.path.join(path, name)
            if name.endswith(".bin"):
                entries.append(("bin", full))
            elif name.lower().endswith((".png", ".jpg", ".jpeg")):
                entries.append(("img", full))
    else:
        raise ValueError(f"no such corpus path: {path}")
    if not entries:
        raise ValueError(f"no images found under {path}")

    images, rejected, undecodable = [], 0, 0
    for kind, full in entries:
        if kind == "bin":
            images.extend(_read_binary_batches(full))
            continue
        arr = _decode_file(full)
        if arr is None:
            undecodable += 1
            continue
        if arr.shape[0] < MIN_SIDE or arr.shape[1] < MIN_SIDE:
            rejected += 1
            continue
        images.append(arr)
    if undecodable > len(entries) / 2:
        raise ValueError(f"most files under {path} failed to decode "
                         f"({undecodable}/{len(entries)})")
    if rejected:
        warnings.warn(f"rejected {rejected} images shorter than {MIN_SIDE}px")
    if not images:
        raise ValueError(f"no usable images under {path}")

    if channels == 1:
        images = [to_grayscale(img) for img in images]
    return ImageStore(source=source, channels=channels, rng_seed=seed,
                      images=images, rejected=rejected)


def store_from_images(images, source="textures", channels=1, seed=0):
    """Wrap an (n, h, w, 3) array (or list of hxwx3 images) as an ImageStore,
    applying the same channel policy as load_store."""
    if channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")
    images = [np.asarray(img, dtype=np.float64) for img in images]
    if not images:
        raise ValueError("no images supplied")
    for img in images:
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError("each image must be h x w x 3 in [0,1]")
        if img.shape[0] < MIN_SIDE or img.shape[1] < MIN_SIDE:
            raise ValueError(f"images must be at least {MIN_SIDE}px on a side")
    if channels == 1:
        images = [to_grayscale(img) for img in images]
    return ImageStore(source=source, channels=channels, rng_seed=seed,
                      images=images)


def sample_batch(store: ImageStore, n, rng=None) -> np.ndarray:
    """n random crops, shape (n, 32, 32, channels), values in [0,1]."""
    if not store.images:
        raise ValueError("empty store")
    rng = rng or store.rng
    out = np.empty((n, CROP_SIZE, CROP_SIZE, store.channels))
    for k in range(n):
        img = store.images[rng.integers(len(store.images))]
        y = rng.integers(img.shape[0] - CROP_SIZE + 1)
        x = rng.integers(img.shape[1] - CROP_SIZE + 1)
        out[k] = img[y:y + CROP_SIZE, x:x + CROP_SIZE]
    return out


# ---------------------------------------------------------------------------
# procedural corpus for demos and tests
# ---------------------------------------------------------------------------

def synthesize_natural_corpus(n=120, size=64, seed=0) -> np.ndarray:
    """Procedural stand-in scenes: flat regions with hard edges (rectangles,
    checkers, stripes, corner gradients), (n, size, size, 3) in [0,1].

    Edge-rich content matters when this corpus trains the restoration task
    solver: a restorer fitted to soft textures learns weak sharpening and
    its induced target response shrinks by about half.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    out = np.empty((n, size, size, 3))
    for k in range(n):
        kind = rng.integers(4)
        if kind == 0:
            img = np.full((size, size), rng.random())
            for _ in range(rng.integers(4, 12)):
                y0, x0 = rng.integers(0, size - 8, size=2)
                h, w = rng.integers(6, size // 2, size=2)
                img[y0:y0 + h, x0:x0 + w] = rng.random()
        elif kind == 1:
            p = int(rng.integers(3, 12))
            img = (((yy // p) + (xx // p)) % 2).astype(np.float64)
            img = img * rng.uniform(0.5, 1.0) + rng.uniform(0.0, 0.3)
        elif kind == 2:
            p = int(rng.integers(3, 14))
            img = ((xx // p) % 2).astype(np.float64) * rng.uniform(0.6, 1.0)
        else:
            img = (xx + yy) / (2.0 * (size - 1)) * rng.uniform(0.5, 1.0)
            img[size // 3: 2 * size // 3, size // 3: 2 * size // 3] = rng.random()
        tint = rng.uniform(0.7, 1.0, size=3)
        out[k] = np.clip(img, 0.0, 1.0)[:, :, None] * tint
    return np.clip(out, 0.0, 1.0)


def synthesize_texture_corpus(n=200, size=64, seed=0) -> np.ndarray:
    """Procedural stand-in textures: oriented sinusoid gratings mixed with
    band-limited noise blobs, (n, size, size, 3) in [0,1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.empty((n, size, size, 3))
    for k in range(n):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.04, 0.35)
        phase = rng.uniform(0, 2 * np.pi)
        grating = 0.5 + 0.5 * np.sin(
            2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        blob = rng.normal(size=(size, size))
        sigma = rng.uniform(1.0, 6.0)
        blob = ndimage.gaussian_filter(blob, sigma, mode="wrap")
        blob = (blob - blob.min()) / max(np.ptp(blob), 1e-12)
        mix = rng.uniform(0.2, 0.8)
        base = mix * grating + (1 - mix) * blob
        tint = rng.uniform(0.6, 1.0, size=3)
        out[k] = base[:, :, None] * tint
    return np.clip(out, 0.0, 1.0)
