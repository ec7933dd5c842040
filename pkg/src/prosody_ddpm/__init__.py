"""Per-token prosody prediction with a conditional diffusion model.

The package trains a denoising diffusion model that maps token-level
conditioning to 3-dimensional prosody sequences (pitch, energy,
log-duration), alongside a deterministic MSE baseline, and measures how
well each predictor's output distribution matches the ground truth.
"""

__version__ = "0.1.0"
