"""voxdiff: text-to-shape synthesis over voxelized signed distance fields.

A two-stage pipeline: a patch-wise Gaussian autoencoder compresses truncated
SDF grids into a latent voxel grid, and a conditional diffusion model with a
nested ("inner network in outer U-Net") denoiser generates latents from text.
"""

__version__ = "0.1.0"
