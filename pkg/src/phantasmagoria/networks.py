"""The three parametric networks: candidate generator, background
discriminator, and the small restoration network used as a visual task
solver.

Layer layout (defaults reproduce the reference architectures exactly):

* generator: z(100) -> fc1(2048) -> ReLU -> fc2(16384) -> ReLU
  -> reshape 8x8x256 -> 2x nearest upsample -> conv 5x5/128 -> ReLU
  -> 2x nearest upsample -> conv 5x5/C_out -> sigmoid -> 32x32xC_out
* discriminator: 32x32xC_in -> conv 5x5/128 -> LReLU(0.2) -> maxpool2
  -> conv 3x3/256 -> LReLU -> maxpool2 -> conv 3x3/512 -> LReLU -> maxpool2
  -> flatten(8192) -> fc(1024) -> LReLU -> fc(1) -> sigmoid
* restorer: 128x128x3 -> conv 5x5/8 -> sigmoid -> conv 5x5/3 -> sigmoid

Parameter counts for the default single-channel instances are structural
invariants: 34,600,193 (generator), 9,869,313 (discriminator), 1,211
(restorer).

Forward passes optionally record a tape; the matching ``*_backward`` walks
it and returns a gradient for every parameter (same keys and shapes) plus
the gradient with respect to the network input. ``finite_difference_check``
verifies any such gradient map against central differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import ops

CHECKPOINT_FORMAT = "phantasmagoria-ckpt-v1"

GENERATOR_PARAM_COUNT_GRAY = 34_600_193
DISCRIMINATOR_PARAM_COUNT_GRAY = 9_869_313
RESTORENET_PARAM_COUNT = 1_211

INIT_STD = 0.02


@dataclass
class NetParams:
    """Named parameter tensors for one network role plus its geometry."""

    role: str
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def copy(self):
        return NetParams(self.role, {k: v.copy() for k, v in self.tensors.items()},
                         dict(self.meta))

    def astype(self, dtype):
        return NetParams(self.role, {k: v.astype(dtype) for k, v in self.tensors.items()},
                         dict(self.meta))


def parameter_count(params: NetParams) -> int:
    return sum(t.size for t in params.tensors.values())


def _gauss(rng, shape, dtype):
    return (rng.standard_normal(shape) * INIT_STD).astype(dtype)


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------

def init_generator(out_channels=1, *, latent_dim=100, fc1_units=2048,
                   base_shape=(8, 8, 256), conv1_channels=128,
                   rng=None, dtype=np.float32) -> NetParams:
    if out_channels not in (1, 3):
        raise ValueError("out_channels must be 1 or 3")
    rng = rng or np.random.default_rng(0)
    bh, bw, bc = base_shape
    fc2_units = bh * bw * bc
    z = np.zeros
    tensors = {
        "fc1.w": _gauss(rng, (latent_dim, fc1_units), dtype),
        "fc1.b": z(fc1_units, dtype=dtype),
        "fc2.w": _gauss(rng, (fc1_units, fc2_units), dtype),
        "fc2.b": z(fc2_units, dtype=dtype),
        "conv1.w": _gauss(rng, (5, 5, bc, conv1_channels), dtype),
        "conv1.b": z(conv1_channels, dtype=dtype),
        "conv2.w": _gauss(rng, (5, 5, conv1_channels, out_channels), dtype),
        "conv2.b": z(out_channels, dtype=dtype),
    }
    meta = {"latent_dim": latent_dim, "base_shape": list(base_shape),
            "out_channels": out_channels, "pretrained": False}
    return NetParams("generator", tensors, meta)


def init_discriminator(in_channels=1, *, input_size=32,
                       conv_channels=(128, 256, 512), fc1_units=1024,
                       rng=None, dtype=np.float32) -> NetParams:
    if in_channels not in (1, 3):
        raise ValueError("in_channels must be 1 or 3")
    if input_size % 8:
        raise ValueError("input_size must be divisible by 8 (three 2x2 pools)")
    rng = rng or np.random.default_rng(0)
    c1, c2, c3 = conv_channels
    flat = (input_size // 8) ** 2 * c3
    z = np.zeros
    tensors = {
        "conv1.w": _gauss(rng, (5, 5, in_channels, c1), dtype),
        "conv1.b": z(c1, dtype=dtype),
        "conv2.w": _gauss(rng, (3, 3, c1, c2), dtype),
        "conv2.b": z(c2, dtype=dtype),
        "conv3.w": _gauss(rng, (3, 3, c2, c3), dtype),
        "conv3.b": z(c3, dtype=dtype),
        "fc1.w": _gauss(rng, (flat, fc1_units), dtype),
        "fc1.b": z(fc1_units, dtype=dtype),
        "fc2.w": _gauss(rng, (fc1_units, 1), dtype),
        "fc2.b": z(1, dtype=dtype),
    }
    meta = {"in_channels": in_channels, "input_size": input_size,
            "flat_features": flat, "pretrained": False}
    return NetParams("discriminator", tensors, meta)


def init_restorenet(*, hidden_channels=8, rng=None, dtype=np.float32) -> NetParams:
    rng = rng or np.random.default_rng(0)
    z = np.zeros
    tensors = {
        "conv1.w": _gauss(rng, (5, 5, 3, hidden_channels), dtype),
        "conv1.b": z(hidden_channels, dtype=dtype),
        "conv2.w": _gauss(rng, (5, 5, hidden_channels, 3), dtype),
        "conv2.b": z(3, dtype=dtype),
    }
    return NetParams("restorer", tensors, {"pretrained": False})


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

def generator_forward(params: NetParams, z, tape=None):
    """Map latent vectors (n, latent_dim) to images (n, 32, 32, C) in (0, 1)."""
    t = params.tensors
    latent_dim = t["fc1.w"].shape[0]
    z = np.asarray(z)
    if z.ndim != 2 or z.shape[1] != latent_dim:
        raise ValueError(f"latent batch must be (n, {latent_dim}), got {z.shape}")
    rec = tape.append if tape is not None else (lambda c: None)

    h, c = ops.dense_forward(z, t["fc1.w"], t["fc1.b"]); rec(("fc1", c))
    h, c = ops.relu_forward(h); rec(("relu1", c))
    h, c = ops.dense_forward(h, t["fc2.w"], t["fc2.b"]); rec(("fc2", c))
    h, c = ops.relu_forward(h); rec(("relu2", c))
    bh, bw, bc = params.meta.get("base_shape", (8, 8, 256))
    h = h.reshape(z.shape[0], bh, bw, bc)
    h, c = ops.upsample_forward(h, 2); rec(("up1", c))
    h, c = ops.conv2d_forward(h, t["conv1.w"], t["conv1.b"]); rec(("conv1", c))
    h, c = ops.relu_forward(h); rec(("relu3", c))
    h, c = ops.upsample_forward(h, 2); rec(("up2", c))
    h, c = ops.conv2d_forward(h, t["conv2.w"], t["conv2.b"]); rec(("conv2", c))
    out, c = ops.sigmoid_forward(h); rec(("sig", c))
    return out


def generator_backward(tape, grad_out):
    """Return (param gradients, gradient wrt z) for a taped forward pass."""
    grads = {}
    g = grad_out
    for name, cache in reversed(tape):
        if name == "sig":
            g = ops.sigmoid_backward(g, cache)
        elif name == "conv2":
            g, grads["conv2.w"], grads["conv2.b"] = ops.conv2d_backward(g, cache)
        elif name == "up2":
            g = ops.upsample_backward(g, cache)
        elif name == "relu3":
            g = ops.relu_backward(g, cache)
        elif name == "conv1":
            g, grads["conv1.w"], grads["conv1.b"] = ops.conv2d_backward(g, cache)
        elif name == "up1":
            g = ops.upsample_backward(g, cache)
            g = g.reshape(g.shape[0], -1)
        elif name == "relu2":
            g = ops.relu_backward(g, cache)
        elif name == "fc2":
            g, grads["fc2.w"], grads["fc2.b"] = ops.dense_backward(g, cache)
        elif name == "relu1":
            g = ops.relu_backward(g, cache)
        elif name == "fc1":
            g, grads["fc1.w"], grads["fc1.b"] = ops.dense_backward(g, cache)
    return grads, g


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------

def discriminator_forward(params: NetParams, batch, tape=None):
    """Map an image batch (n, s, s, C) to probabilities (n,) in (0, 1)."""
    t = params.tensors
    size = params.meta.get("input_size", 32)
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[1] != size or batch.shape[2] != size:
        raise ValueError(f"expected (n, {size}, {size}, C) batch, got {batch.shape}")
    if batch.shape[3] != t["conv1.w"].shape[2]:
        raise ValueError(f"expected {t['conv1.w'].shape[2]} channel(s), got {batch.shape[3]}")
    rec = tape.append if tape is not None else (lambda c: None)

    h = batch
    for i in (1, 2, 3):
        h, c = ops.conv2d_forward(h, t[f"conv{i}.w"], t[f"conv{i}.b"]); rec((f"conv{i}", c))
        h, c = ops.leaky_relu_forward(h); rec((f"lrelu{i}", c))
        h, c = ops.maxpool2_forward(h); rec((f"pool{i}", c))
    h = h.reshape(h.shape[0], -1)
    h, c = ops.dense_forward(h, t["fc1.w"], t["fc1.b"]); rec(("fc1", c))
    h, c = ops.leaky_relu_forward(h); rec(("lrelu4", c))
    h, c = ops.dense_forward(h, t["fc2.w"], t["fc2.b"]); rec(("fc2", c))
    p, c = ops.sigmoid_forward(h); rec(("sig", c))
    return p[:, 0]


def discriminator_backward(tape, grad_probs):
    """Return (param gradients, gradient wrt input batch)."""
    grads = {}
    g = np.asarray(grad_probs)[:, None]
    pool_shape = None
    for name, cache in reversed(tape):
        if name == "sig":
            g = ops.sigmoid_backward(g, cache)
        elif name.startswith("fc"):
            g, grads[f"{name}.w"], grads[f"{name}.b"] = ops.dense_backward(g, cache)
        elif name.startswith("lrelu"):
            g = ops.leaky_relu_backward(g, cache)
        elif name.startswith("pool"):
            if g.ndim == 2:  # re-entering conv stack after flatten
                idx, x_shape = cache
                g = g.reshape(idx.shape[:1] + (x_shape[1] // 2, x_shape[2] // 2, x_shape[3]))
            g = ops.maxpool2_backward(g, cache)
        elif name.startswith("conv"):
            g, grads[f"{name}.w"], grads[f"{name}.b"] = ops.conv2d_backward(g, cache)
    return grads, g


# ---------------------------------------------------------------------------
# restoration network
# ---------------------------------------------------------------------------

def restorenet_apply(params: NetParams, batch, tape=None):
    """Run the restorer on any (n, h, w, 3) batch (it is fully convolutional)."""
    t = params.tensors
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[3] != 3:
        raise ValueError(f"expected (n, h, w, 3) batch, got {batch.shape}")
    rec = tape.append if tape is not None else (lambda c: None)
    h, c = ops.conv2d_forward(batch, t["conv1.w"], t["conv1.b"]); rec(("conv1", c))
    h, c = ops.sigmoid_forward(h); rec(("sig1", c))
    h, c = ops.conv2d_forward(h, t["conv2.w"], t["conv2.b"]); rec(("conv2", c))
    out, c = ops.sigmoid_forward(h); rec(("sig2", c))
    return out


def restorenet_forward(params: NetParams, image, tape=None):
    """Run the restorer on one 128x128x3 image (the contract shape)."""
    image = np.asarray(image)
    if image.shape != (128, 128, 3):
        raise ValueError(f"expected a 128x128x3 image, got {image.shape}")
    return restorenet_apply(params, image[None])[0]


def restorenet_backward(tape, grad_out):
    grads = {}
    g = grad_out
    for name, cache in reversed(tape):
        if name.startswith("sig"):
            g = ops.sigmoid_backward(g, cache)
        else:
            g, grads[f"{name}.w"], grads[f"{name}.b"] = ops.conv2d_backward(g, cache)
    return grads, g


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: NetParams):
    """Persist parameters keyed by layer name with shape metadata."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "role": params.role,
        "meta": params.meta,
        "shapes": {k: list(v.shape) for k, v in params.tensors.items()},
    }
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **params.tensors)


def load_checkpoint(path) -> NetParams:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a {CHECKPOINT_FORMAT} checkpoint: {path}")
        tensors = {k: data[k] for k in data.files if k != "__meta__"}
    for k, shape in meta["shapes"].items():
        if list(tensors[k].shape) != shape:
            raise ValueError(f"checkpoint tensor {k} has shape {tensors[k].shape}, "
                             f"metadata says {shape}")
    return NetParams(meta["role"], tensors, meta["meta"])


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def finite_difference_check(loss_fn, params: NetParams, grads, *, n_probes=20,
                            step=1e-3, rng=None):
    """Compare analytic gradients against central finite differences.

    loss_fn(params) must be a deterministic scalar. Probes n_probes random
    parameter entries and returns the per-probe relative errors
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    rng = rng or np.random.default_rng(0)
    names = sorted(params.tensors)
    errors = []
    for _ in range(n_probes):
        name = names[rng.integers(len(names))]
        t = params.tensors[name]
        idx = tuple(rng.integers(s) for s in t.shape)
        orig = t[idx]
        t[idx] = orig + step
        up = loss_fn(params)
        t[idx] = orig - step
        down = loss_fn(params)
        t[idx] = orig
        numeric = (up - down) / (2 * step)
        analytic = grads[name][idx]
        errors.append(abs(analytic - numeric) /
                      max(abs(analytic), abs(numeric), 1e-8))
    return np.array(errors)
