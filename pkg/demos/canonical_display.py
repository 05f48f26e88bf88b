"""The classic two-field lightness display, scored by the brightness model.

Left half white, right half black, one identical gray square on each side.
Human observers see the square on the dark side as lighter; the oriented-DoG
brightness model reproduces that: its response under the right target sits
above the response under the left one, so PQ(right - left) comes out
positive even though the pixels are equal.
"""
import os

import numpy as np

from phantasmagoria import illusion, odog, stimulus
from phantasmagoria.illusion import PqConfig

out_dir = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(out_dir, exist_ok=True)

stim = stimulus.canonical_contrast_stimulus(0.5)
stimulus.save_image_png(os.path.join(out_dir, "canonical.png"), stim.image)
print("wrote", os.path.join(out_dir, "canonical.png"))

model = odog.default_model()
response = illusion.vts_odog(stim.image, model)

pq = illusion.perceptual_quantifier(response, stim,
                                    PqConfig("lightness", "right_minus_left"))
print(f"PQ(right - left) = {pq:+.4f}")
print("physical target values are identical:",
      float(stim.image[stim.left_mask].mean()),
      "==", float(stim.image[stim.right_mask].mean()))

# the identity solver scores the raw pixels and must see no difference
flat = illusion.score_stimulus(stim, PqConfig("lightness", "right_minus_left"),
                               vts="identity")
print(f"identity solver PQ = {flat:+.4f}  (no illusion in the pixels)")

# dump the model response as an image for eyeballing; normalize to [0,1]
r = response[:, :, 0]
r = (r - r.min()) / (r.max() - r.min())
stimulus.save_image_png(os.path.join(out_dir, "canonical_response.png"),
                        r[:, :, None])
print("wrote", os.path.join(out_dir, "canonical_response.png"))

# how the sign moves with the target gray
for gray in (0.25, 0.5, 0.75):
    s = stimulus.canonical_contrast_stimulus(gray)
    v = illusion.score_stimulus(s, PqConfig("lightness", "right_minus_left"),
                                vts="odog", model=model)
    print(f"  gray={gray:.2f}  PQ = {v:+.4f}")
