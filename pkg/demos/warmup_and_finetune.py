"""End-to-end candidate generation, sized to finish over a coffee.

Pipeline: adversarial warm-up on procedural textures, then fine-tuning
against the restoration solver so the generator's inducers start pushing the
identical targets apart perceptually. Narrow network widths keep this to a
couple of minutes; the full-width run is what the command line does.
"""
import os

import numpy as np

from phantasmagoria import dataset, illusion, networks, stimulus, training
from phantasmagoria.illusion import PqConfig
from phantasmagoria.stimulus import TargetSpec

out = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(out, exist_ok=True)
rng_init = np.random.default_rng(0)

# narrow variants of the real geometry (same layers, fewer channels)
gen = networks.init_generator(1, latent_dim=32, fc1_units=256,
                              base_shape=(8, 8, 48), conv1_channels=24,
                              rng=rng_init)
disc = networks.init_discriminator(1, conv_channels=(24, 48, 96),
                                   fc1_units=128, rng=rng_init)
print(f"generator {networks.parameter_count(gen):,} params, "
      f"discriminator {networks.parameter_count(disc):,} params")

store = dataset.store_from_images(
    dataset.synthesize_texture_corpus(n=96, size=64, seed=11),
    source="textures", channels=1, seed=0)

config = training.TrainingConfig(batch_size=8, pretrain_epochs=6,
                                 max_iterations=60, seed=3)
log = []
training.pretrain_gan(gen, disc, store, config, log)
print(f"warm-up: {len(log)} iterations, "
      f"d_loss {log[0]['d_loss']:.3f} -> {log[-1]['d_loss']:.3f}, "
      f"diversity {log[0]['diversity']:.4f} -> {log[-1]['diversity']:.4f}")

restorer = illusion.train_vts_restoration(
    dataset.synthesize_natural_corpus(n=60, size=64, seed=7),
    epochs=40, rng=np.random.default_rng(5))
print("restoration solver ready")

spec = TargetSpec(shape="square", size=28, value=0.5)
pq_config = PqConfig("lightness", "right_minus_left")
ft_config = training.TrainingConfig(alpha=1.0, beta=0.1, lr_generator=2e-4,
                                    tau=0.15, batch_size=8, record_every=10,
                                    max_iterations=80, seed=9)
ft_log = []
_, records = training.finetune(gen, disc, "restorenet", pq_config, spec,
                               store, ft_config, restorer=restorer,
                               log=ft_log)
meds = [r["pq_median"] for r in ft_log]
print(f"fine-tune: median PQ {np.median(meds[:8]):+.4f} (start) -> "
      f"{np.median(meds[-8:]):+.4f} (end), {len(records)} records")

# export whatever cleared a low bar; narrow nets won't hit the full-scale
# numbers, the point is the plumbing
threshold = float(np.quantile([r.pq_value for r in records], 0.75))
selection = training.select_candidates(records, 8, threshold, seed=1)
export_dir = os.path.join(out, "mini_candidates")
training.export_candidates(selection, export_dir, pq_config)
print(f"exported {len(selection)} candidates with PQ >= {threshold:+.4f} "
      f"to {export_dir}")

# stitch a contact sheet
sheet = []
for rec in sorted(selection, key=lambda r: -r.pq_value):
    sheet.append(rec.stimulus.image[:, :, 0])
row = np.concatenate(sheet, axis=1)
stimulus.save_image_png(os.path.join(out, "candidate_sheet.png"),
                        row[:, :, None])
print("wrote", os.path.join(out, "candidate_sheet.png"))
