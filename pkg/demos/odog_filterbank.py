"""Poke at the oriented-DoG filter bank: 6 orientations x 7 scales.

Every kernel integrates to ~zero (a difference of two unit-mass Gaussians),
the per-scale weights follow a shallow power law over spatial frequency, and
the orientation-wise RMS normalization is what makes the model's output
comparable across very different inputs.
"""
import os

import numpy as np

from phantasmagoria import odog, stimulus


def norm01(k):
    return (k - k.min()) / (k.max() - k.min())


def main():
    out_dir = os.path.join(os.path.dirname(__file__), "out")
    os.makedirs(out_dir, exist_ok=True)

    # small canvas is enough to look at kernels
    model = odog.OdogModel(canvas=(128, 128), pixels_per_degree=32.0 / 3.0)
    print(f"{len(model.orientations)} orientations x "
          f"{len(model.spatial_scales)} scales "
          f"= {len(model.orientations) * len(model.spatial_scales)} filters")
    print("orientations (deg):", [float(a) for a in model.orientations])
    print("scale weights:",
          np.array2string(model.scale_weights, precision=3))

    sigmas_px = (model.spatial_scales * odog.CENTER_SIGMA_FACTOR
                 * model.pixels_per_degree)

    # kernels integrate to zero: center and surround masses cancel
    sums = []
    for angle in model.orientations:
        for sigma in sigmas_px:
            k = odog.dog_kernel(sigma, angle, (128, 128))
            sums.append(abs(k.sum()))
    print(f"max |kernel sum| over the bank: {max(sums):.2e}")

    # montage: rows = orientations, cols = scales, each tile 64x64 center crop
    tiles = []
    for angle in model.orientations:
        row = []
        for sigma in sigmas_px:
            k = odog.dog_kernel(sigma, angle, (128, 128))
            row.append(norm01(k[32:96, 32:96]))
        tiles.append(np.concatenate(row, axis=1))
    montage = np.concatenate(tiles, axis=0)
    path = os.path.join(out_dir, "filterbank.png")
    stimulus.save_image_png(path, montage[:, :, None])
    print("wrote", path)

    # the normalization in action: a grating at one orientation excites the
    # matching channel, and RMS normalization rebalances the pooled output
    yy, xx = np.mgrid[0:128, 0:128]
    grating = 0.5 + 0.5 * np.sin(2 * np.pi * xx / 16.0)
    resp = model.evaluate(grating)
    print(f"grating response range: [{resp.min():+.3f}, {resp.max():+.3f}]")
    stimulus.save_image_png(os.path.join(out_dir, "grating_response.png"),
                            norm01(resp)[:, :, None])
    print("wrote", os.path.join(out_dir, "grating_response.png"))


if __name__ == "__main__":
    main()
