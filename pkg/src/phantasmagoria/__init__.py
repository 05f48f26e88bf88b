"""Adversarial synthesis of lightness, color and contrast illusions.

A candidate generator is pretrained as a GAN against a background
discriminator, then fine-tuned against a frozen illusion discriminator (a
visual task solver plus a perceptual quantifier). Survivors are graded by
strength, exported, and validated in a forced-choice observer experiment.
"""

__version__ = "0.1.0"
