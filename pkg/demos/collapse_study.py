"""Reproduce mode collapse on purpose.

Skip the adversarial warm-up, zero out the background-discriminator term,
and crank the learning rate: the generator discovers that one single output
satisfies the illusion objective and abandons everything else. Batch
diversity (mean pairwise L2 between samples in a batch) documents the
collapse — it falls below 10% of its starting level within a handful of
iterations and keeps sinking.

Full-width networks; takes a minute or two on one CPU.
"""
import os

import numpy as np

from phantasmagoria import dataset, illusion, networks, stimulus, training
from phantasmagoria.illusion import PqConfig
from phantasmagoria.stimulus import TargetSpec

ITERS = 40

out = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(out, exist_ok=True)

rng = np.random.default_rng(23)
gen = networks.init_generator(1, rng=rng, dtype=np.float64)
disc = networks.init_discriminator(1, rng=rng, dtype=np.float64)

store = dataset.store_from_images(
    dataset.synthesize_texture_corpus(n=200, size=64, seed=5),
    source="textures", channels=1, seed=5)
restorer = illusion.train_vts_restoration(
    dataset.synthesize_natural_corpus(n=60, size=64, seed=7),
    epochs=40, rng=np.random.default_rng(5))

config = training.TrainingConfig(
    alpha=1.0, beta=0.0, batch_size=8, lr_generator=3e-3, tau=0.15,
    seed=23, max_iterations=ITERS, max_epochs=10_000, record_every=10,
    allow_unpretrained=True, stop_window=10**9)

log = []
_, records = training.finetune(
    gen, disc, "restorenet", PqConfig("lightness", "right_minus_left"),
    TargetSpec(shape="square", size=28, value=0.5), store, config,
    restorer=restorer, log=log)

d0 = log[0]["diversity"]
print(f"{'iter':>4}  {'diversity':>10}  {'of start':>8}  {'median PQ':>9}")
for r in log:
    if r["iteration"] % 5 == 0 or r["iteration"] == ITERS - 1:
        print(f"{r['iteration']:>4}  {r['diversity']:>10.5f}  "
              f"{r['diversity'] / d0:>7.1%}  {r['pq_median']:>+9.4f}")

below = next(r["iteration"] for r in log if r["diversity"] < 0.1 * d0)
print(f"\ndiversity fell below 10% of its start at iteration {below}")

# the collapsed mode, next to what the last recorded batch looked like
last = [rec for rec in records if rec.iteration == records[-1].iteration]
strip = np.concatenate([rec.inducer[:, :, 0] for rec in last[:6]], axis=1)
stimulus.save_image_png(os.path.join(out, "collapsed_batch.png"),
                        strip[:, :, None])
print("wrote", os.path.join(out, "collapsed_batch.png"),
      "- six 'different' samples from the final recorded batch")
