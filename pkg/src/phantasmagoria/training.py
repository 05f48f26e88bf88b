"""Training orchestration: adversarial pretraining of the candidate
generator against the background discriminator, fine-tuning with the
two-term generator loss, collapse diagnostics, and candidate selection.

The fine-tune loss per batch is

    alpha * mean((tau - pq)_+ ^ 2) + beta * mean((bd_prob - 1) ^ 2)

where pq overshoot past tau is not penalized. Both terms are normalized by
their value on the first fine-tune batch so alpha and beta express relative
emphasis (defaults 1/1). The illusion discriminator (VTS + quantifier) is
never updated here.

Desk-scale note: with beta = 0 the background discriminator cannot
influence the generator, so its updates are skipped to save time; its
probabilities are still logged.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import illusion, networks, odog, ops, stimulus
from .dataset import ImageStore, sample_batch
from .illusion import PqConfig
from .networks import NetParams
from .stimulus import Stimulus, TargetSpec

PROB_EPS = 1e-7
COLLAPSE_THRESHOLD = 0.02  # about two 8-bit gray levels of spread


@dataclass
class TrainingConfig:
    alpha: float = 1.0
    beta: float = 1.0
    batch_size: int = 32
    max_epochs: int = 100
    lr_generator: float = 2e-4
    lr_discriminator: float = 2e-4
    tau: float = 0.15
    pretrain_epochs: int = 20
    seed: int = 0
    stop_window: int = 10
    stop_tolerance: float = 0.01
    max_iterations: int | None = None   # desk-scale cap overriding max_epochs
    record_every: int = 25              # candidate logging interval
    allow_unpretrained: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.alpha == 0 and self.beta == 0:
            raise ValueError("alpha and beta cannot both be zero")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (diversity "
                             "needs pairs)")


@dataclass
class CandidateRecord:
    iteration: int
    inducer: np.ndarray            # generator output, 32x32
    stimulus: Stimulus             # composited 128x128 stimulus
    pq_value: float
    bd_prob: float
    diversity_at_iteration: float

    def __post_init__(self):
        if not (np.isfinite(self.pq_value) and np.isfinite(self.bd_prob)):
            raise ValueError("candidate scalars must be finite")
        if not 0.0 < self.bd_prob < 1.0:
            raise ValueError("bd_prob must lie strictly inside (0,1)")


# ---------------------------------------------------------------------------
# config file round trip (flat key = value lines)
# ---------------------------------------------------------------------------

def write_config_file(path, config: TrainingConfig):
    with open(path, "w") as fh:
        for key, value in sorted(vars(config).items()):
            fh.write(f"{key} = {value}\n")


def read_config_overrides(path) -> dict:
    """Parse a config file into {field: value} without applying defaults,
    so callers can layer it between preset defaults and CLI flags."""
    fields = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in TrainingConfig.__dataclass_fields__:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            fields[key] = _parse_value(raw)
    return fields


def parse_config_file(path) -> TrainingConfig:
    return TrainingConfig(**read_config_overrides(path))


def _parse_value(raw: str):
    if raw == "None":
        return None
    if raw in ("True", "False"):
        return raw == "True"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


# ---------------------------------------------------------------------------
# losses and diagnostics
# ---------------------------------------------------------------------------

def bce_loss_and_grad(probs, labels):
    """Binary cross-entropy over probabilities, with d(loss)/d(probs)."""
    p = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(labels, dtype=p.dtype)
    loss = float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))
    grad = (p - y) / (p * (1.0 - p)) / p.size
    return loss, grad


def generator_loss(pq, bd_probs, config: TrainingConfig) -> float:
    """alpha * (tau - pq)_+^2 + beta * mean((bd_probs - 1)^2).

    pq may be one scalar or a batch of per-image values (averaged). PQ
    values above tau are clamped: overshoot is not penalized.
    """
    pq = np.atleast_1d(np.asarray(pq, dtype=np.float64))
    probs = np.atleast_1d(np.asarray(bd_probs, dtype=np.float64))
    if not (np.all(np.isfinite(pq)) and np.all(np.isfinite(probs))):
        raise FloatingPointError("non-finite generator loss inputs")
    shortfall = np.clip(config.tau - pq, 0.0, None)
    return float(config.alpha * np.mean(shortfall ** 2)
                 + config.beta * np.mean((probs - 1.0) ** 2))


def batch_diversity(batch) -> float:
    """Mean pairwise root-mean-square difference across a batch."""
    arr = np.asarray(batch, dtype=np.float64)
    n = arr.shape[0]
    if n < 2:
        raise ValueError("diversity needs at least two images")
    flat = arr.reshape(n, -1)
    total = 0.0
    for i in range(n - 1):
        diff = flat[i + 1:] - flat[i]
        total += np.sqrt(np.mean(diff ** 2, axis=1)).sum()
    return total / (n * (n - 1) / 2)


def _iterations_per_epoch(store: ImageStore, batch_size: int) -> int:
    return max(1, math.ceil(len(store) / batch_size))


def _check_channels(gen: NetParams, disc: NetParams, store: ImageStore):
    g = gen.meta.get("out_channels")
    d = disc.meta.get("in_channels")
    if g != store.channels or d != store.channels:
        raise ValueError(f"channel mismatch: generator {g}, discriminator "
                         f"{d}, store {store.channels}")


# ---------------------------------------------------------------------------
# adversarial pretraining
# ---------------------------------------------------------------------------

def pretrain_gan(gen: NetParams, disc: NetParams, store: ImageStore,
                 config: TrainingConfig, log: list | None = None):
    """Alternating updates: discriminator on binary cross-entropy over
    real-vs-generated labels, generator on mean squared error pushing
    disc(generated) toward the real label 1."""
    _check_channels(gen, disc, store)
    rng = np.random.default_rng(config.seed)
    opt_g = ops.Adam(lr=config.lr_generator)
    opt_d = ops.Adam(lr=config.lr_discriminator)
    latent = gen.meta["latent_dim"]
    dtype = next(iter(gen.tensors.values())).dtype

    iters = _iterations_per_epoch(store, config.batch_size)
    total = config.pretrain_epochs * iters
    if config.max_iterations is not None:
        total = min(total, config.max_iterations)
    for it in range(total):
        real = sample_batch(store, config.batch_size, rng).astype(dtype)
        z = rng.standard_normal((config.batch_size, latent)).astype(dtype)
        fake = networks.generator_forward(gen, z)

        # discriminator step on the joined batch
        tape_d = []
        both = np.concatenate([real, fake])
        labels = np.concatenate([np.ones(len(real)), np.zeros(len(fake))])
        probs = networks.discriminator_forward(disc, both, tape_d)
        d_loss, dgrad = bce_loss_and_grad(probs, labels)
        if not np.isfinite(d_loss):
            raise FloatingPointError(f"discriminator loss diverged at "
                                     f"iteration {it}: {d_loss}")
        d_grads, _ = networks.discriminator_backward(tape_d, dgrad)
        opt_d.step(disc.tensors, d_grads)

        # generator step: mse(disc(fake), 1)
        tape_g = []
        fake = networks.generator_forward(gen, z, tape_g)
        tape_df = []
        pf = networks.discriminator_forward(disc, fake, tape_df)
        g_loss = float(np.mean((pf - 1.0) ** 2))
        if not np.isfinite(g_loss):
            raise FloatingPointError(f"generator loss diverged at "
                                     f"iteration {it}: {g_loss}")
        _, grad_fake = networks.discriminator_backward(
            tape_df, (2.0 * (pf - 1.0) / pf.size).astype(dtype))
        g_grads, _ = networks.generator_backward(tape_g, grad_fake.astype(dtype))
        opt_g.step(gen.tensors, g_grads)

        if log is not None:
            real_acc = float((probs[:len(real)] > 0.5).mean())
            log.append({"iteration": it, "d_loss": d_loss, "g_loss": g_loss,
                        "d_real_acc": real_acc,
                        "diversity": batch_diversity(fake)})
    if total > 0:
        gen.meta["pretrained"] = True
        disc.meta["pretrained"] = True
    return gen, disc


# ---------------------------------------------------------------------------
# fine-tuning against the illusion discriminator
# ---------------------------------------------------------------------------

def _vts_batch_with_grad(vts, images, stimuli, pq_config, restorer, odog_model):
    """Score a batch of composited stimuli; returns (pq array, closure that
    maps per-image dL/dpq to dL/d(stimulus image) batch)."""
    n = len(stimuli)
    if vts == "restorenet":
        responses, cache = illusion.restore_batch_for_grad(restorer, images)
        pqs = np.array([illusion.perceptual_quantifier(responses[i],
                                                       stimuli[i], pq_config)
                        for i in range(n)])
        pq_grads = [illusion.pq_gradient(responses[i], stimuli[i], pq_config)
                    for i in range(n)]

        def backward(dl_dpq):
            gresp = np.stack([dl_dpq[i] * pq_grads[i] for i in range(n)])
            return illusion.restore_batch_backward(cache, gresp)
        return pqs, backward

    if vts == "odog":
        model = odog_model or odog.default_model()
        results, caches, pq_grads = [], [], []
        for i in range(n):
            res, c = model.evaluate_for_grad(images[i, :, :, 0])
            results.append(res)
            caches.append(c)
        pqs = np.array([illusion.perceptual_quantifier(
            results[i][:, :, None], stimuli[i], pq_config) for i in range(n)])
        pq_grads = [illusion.pq_gradient(results[i][:, :, None], stimuli[i],
                                         pq_config) for i in range(n)]

        def backward(dl_dpq):
            out = np.empty_like(images)
            for i in range(n):
                g = model.backward(dl_dpq[i] * pq_grads[i][:, :, 0], caches[i])
                out[i] = g[:, :, None]
            return out
        return pqs, backward

    if vts == "identity":
        pqs = np.array([illusion.perceptual_quantifier(images[i], stimuli[i],
                                                       pq_config)
                        for i in range(n)])
        pq_grads = [illusion.pq_gradient(images[i], stimuli[i], pq_config)
                    for i in range(n)]

        def backward(dl_dpq):
            return np.stack([dl_dpq[i] * pq_grads[i] for i in range(n)])
        return pqs, backward

    raise ValueError(f"unknown visual task solver {vts!r}")


def finetune(gen: NetParams, disc: NetParams, vts: str, pq_config: PqConfig,
             target_spec: TargetSpec, store: ImageStore,
             config: TrainingConfig, *, restorer: NetParams | None = None,
             odog_model=None, log: list | None = None):
    """Fine-tune the generator on the combined ID + BD loss.

    Returns (generator params, list of CandidateRecord). Per-iteration
    scalars are appended to `log` when a list is passed. Requires
    pretrained generator parameters unless config.allow_unpretrained
    acknowledges the collapse risk of skipping that stage.
    """
    if not gen.meta.get("pretrained") and not config.allow_unpretrained:
        raise ValueError("generator is not pretrained; fine-tuning from "
                         "scratch risks mode collapse (set allow_unpretrained "
                         "to proceed anyway)")
    if vts == "restorenet" and restorer is None:
        raise ValueError("restorenet task solver needs restorer parameters")
    _check_channels(gen, disc, store)
    if target_spec.channels not in (1, gen.meta["out_channels"]):
        raise ValueError("target channel count does not match the generator")

    rng = np.random.default_rng(config.seed)
    opt_g = ops.Adam(lr=config.lr_generator)
    opt_d = ops.Adam(lr=config.lr_discriminator)
    latent = gen.meta["latent_dim"]
    dtype = next(iter(gen.tensors.values())).dtype
    vts_fingerprint = None
    if restorer is not None:
        vts_fingerprint = {k: v.copy() for k, v in restorer.tensors.items()}

    iters_per_epoch = _iterations_per_epoch(store, config.batch_size)
    total = config.max_epochs * iters_per_epoch
    if config.max_iterations is not None:
        total = min(total, config.max_iterations)

    records: list[CandidateRecord] = []
    id_scale = bd_scale = 1.0
    epoch_losses: list[float] = []
    current_epoch: list[float] = []

    for it in range(total):
        z = rng.standard_normal((config.batch_size, latent)).astype(dtype)
        tape_g = []
        fake = networks.generator_forward(gen, z, tape_g)
        fake64 = fake.astype(np.float64)

        up, up_cache = ops.upsample_forward(fake64, 4)
        stimuli = [stimulus.composite(up[i], target_spec)
                   for i in range(len(up))]
        images = np.stack([s.image for s in stimuli])
        pqs, vts_backward = _vts_batch_with_grad(
            vts, images, stimuli, pq_config, restorer, odog_model)

        tape_df = []
        probs = networks.discriminator_forward(disc, fake, tape_df)

        if not (np.all(np.isfinite(pqs)) and np.all(np.isfinite(probs))):
            raise FloatingPointError(f"non-finite scores at iteration {it}")

        shortfall = np.clip(config.tau - pqs, 0.0, None)
        id_term = float(np.mean(shortfall ** 2))
        bd_term = float(np.mean((probs - 1.0) ** 2))
        if it == 0:
            # normalize both terms to 1 at the start so alpha/beta express
            # relative emphasis; degenerate-zero terms keep scale 1
            id_scale = 1.0 / id_term if id_term > 0 else 1.0
            bd_scale = 1.0 / bd_term if bd_term > 0 else 1.0
        alpha_eff = config.alpha * id_scale
        beta_eff = config.beta * bd_scale
        loss = alpha_eff * id_term + beta_eff * bd_term

        # ID branch: dL/dpq_i = -2 alpha_eff (tau - pq_i)_+ / n
        n = len(pqs)
        dl_dpq = -2.0 * alpha_eff * shortfall / n
        grad_images = vts_backward(dl_dpq)
        for i, s in enumerate(stimuli):
            grad_images[i][s.left_mask | s.right_mask] = 0.0
        grad_fake = ops.upsample_backward(grad_images, up_cache)

        # BD branch: dL/dprobs = 2 beta_eff (probs - 1) / n
        if config.beta > 0:
            _, grad_fake_bd = networks.discriminator_backward(
                tape_df, (2.0 * beta_eff * (probs - 1.0) / n).astype(dtype))
            grad_fake = grad_fake + grad_fake_bd

        g_grads, _ = networks.generator_backward(tape_g,
                                                 grad_fake.astype(dtype))
        opt_g.step(gen.tensors, g_grads)

        # keep the discriminator adapting to the drifting generator
        if config.beta > 0:
            real = sample_batch(store, config.batch_size, rng).astype(dtype)
            tape_d = []
            both = np.concatenate([real, fake])
            labels = np.concatenate([np.ones(len(real)), np.zeros(len(fake))])
            d_probs = networks.discriminator_forward(disc, both, tape_d)
            d_loss, dgrad = bce_loss_and_grad(d_probs, labels)
            d_grads, _ = networks.discriminator_backward(tape_d, dgrad)
            opt_d.step(disc.tensors, d_grads)

        diversity = float(batch_diversity(fake))
        if log is not None:
            log.append({"iteration": it, "loss": loss, "id_term": id_term,
                        "bd_term": bd_term, "pq_mean": float(pqs.mean()),
                        "pq_median": float(np.median(pqs)),
                        "bd_prob_mean": float(probs.mean()),
                        "diversity": diversity})

        if it % config.record_every == 0:
            clipped = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
            for i in range(len(pqs)):
                records.append(CandidateRecord(
                    iteration=it, inducer=fake64[i].copy(),
                    stimulus=stimuli[i], pq_value=float(pqs[i]),
                    bd_prob=float(clipped[i]),
                    diversity_at_iteration=diversity))

        current_epoch.append(loss)
        if len(current_epoch) == iters_per_epoch:
            epoch_losses.append(float(np.mean(current_epoch)))
            current_epoch = []
            w = config.stop_window
            if len(epoch_losses) >= 2 * w:
                recent = float(np.mean(epoch_losses[-w:]))
                previous = float(np.mean(epoch_losses[-2 * w:-w]))
                if previous != 0 and abs(recent - previous) / abs(previous) \
                        < config.stop_tolerance:
                    break

    if vts_fingerprint is not None:
        for k, v in vts_fingerprint.items():
            if not np.array_equal(v, restorer.tensors[k]):
                raise AssertionError("illusion discriminator parameters "
                                     "changed during fine-tuning")
    return gen, records


# ---------------------------------------------------------------------------
# candidate selection and export
# ---------------------------------------------------------------------------

def save_records(path, records, pq_config: PqConfig):
    """Persist fine-tuning candidate records to one compressed npz.

    Only the generated inducers and per-record scalars are stored; the
    composed stimulus is rebuilt on load by the same deterministic
    compositing path, so the round trip is bit-exact without storing the
    redundant 128x128 images.  All records must share one target spec.
    The quantifier configuration the pq values were computed under rides
    along so later export steps cannot mislabel the sign convention.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to save")
    specs = {r.stimulus.spec for r in records}
    if len(specs) != 1:
        raise ValueError("records mix different target specs")
    spec = records[0].stimulus.spec
    value = spec.value if np.isscalar(spec.value) else list(spec.value)
    meta = {
        "format": "phantasmagoria-records-v1",
        "count": len(records),
        "target_spec": {
            "shape": spec.shape, "size": spec.size, "value": value,
            "orientation": spec.orientation, "frequency": spec.frequency,
            "contrast": spec.contrast,
        },
        "pq": {
            "kind": pq_config.kind, "sign": pq_config.sign,
            "channel_weights": list(pq_config.channel_weights),
        },
    }
    np.savez_compressed(
        path,
        __meta__=np.frombuffer(json.dumps(meta).encode("utf-8"),
                               dtype=np.uint8),
        inducers=np.stack([r.inducer for r in records]),
        iterations=np.array([r.iteration for r in records], dtype=np.int64),
        pq_values=np.array([r.pq_value for r in records]),
        bd_probs=np.array([r.bd_prob for r in records]),
        diversities=np.array([r.diversity_at_iteration for r in records]),
    )


def load_records(path):
    """Rebuild candidate records saved by :func:`save_records`.

    Returns (records, pq_config)."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta.get("format") != "phantasmagoria-records-v1":
            raise ValueError(f"{path}: not a candidate records file")
        pq_config = PqConfig(
            kind=meta["pq"]["kind"], sign=meta["pq"]["sign"],
            channel_weights=tuple(meta["pq"]["channel_weights"]))
        spec_kw = dict(meta["target_spec"])
        if isinstance(spec_kw["value"], list):
            spec_kw["value"] = tuple(spec_kw["value"])
        spec = stimulus.TargetSpec(**spec_kw)
        inducers = data["inducers"]
        records = []
        for i in range(meta["count"]):
            inducer = inducers[i]
            factor = stimulus.VTS_SIZE // inducer.shape[0]
            composed = stimulus.composite(
                stimulus.upscale_nearest(inducer, factor), spec)
            records.append(CandidateRecord(
                iteration=int(data["iterations"][i]),
                inducer=inducer,
                stimulus=composed,
                pq_value=float(data["pq_values"][i]),
                bd_prob=float(data["bd_probs"][i]),
                diversity_at_iteration=float(data["diversities"][i]),
            ))
    return records, pq_config


def select_candidates(records, k, pq_threshold, seed=0):
    """Uniform sample without replacement of qualifying records, stratified
    so no single iteration dominates."""
    qualifying = [r for r in records if r.pq_value >= pq_threshold]
    if len(qualifying) < k:
        raise ValueError(f"only {len(qualifying)} records have pq >= "
                         f"{pq_threshold}, need {k}")
    iterations = sorted({r.iteration for r in qualifying})
    cap = math.ceil(k / len(iterations)) + 1
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(qualifying))
    chosen, per_iter = [], {}
    for idx in order:
        rec = qualifying[idx]
        if per_iter.get(rec.iteration, 0) >= cap:
            continue
        chosen.append(rec)
        per_iter[rec.iteration] = per_iter.get(rec.iteration, 0) + 1
        if len(chosen) == k:
            return chosen
    raise ValueError(f"stratification cap {cap} per iteration cannot fill "
                     f"{k} candidates from {len(iterations)} iterations")


def export_candidates(selection, out_dir, pq_config: PqConfig, seed=0):
    """Write stimulus PNGs plus a deterministic JSON manifest.

    The manifest records pq_value, sign, iteration, seed and the PNG's
    sha256; no timestamps, so identical runs export identical bytes.
    """
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, rec in enumerate(sorted(selection, key=lambda r: (r.iteration,
                                                             r.pq_value))):
        name = f"candidate_{rec.iteration:05d}_{i:03d}.png"
        path = os.path.join(out_dir, name)
        stimulus.save_image_png(path, rec.stimulus.image)
        with open(path, "rb") as fh:
            digest = hashlib.sha256(fh.read()).hexdigest()
        entries.append({"filename": name, "pq_value": rec.pq_value,
                        "sign": pq_config.sign, "iteration": rec.iteration,
                        "seed": seed, "sha256": digest})
    manifest = {"count": len(entries), "pq_kind": pq_config.kind,
                "candidates": entries}
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path
