"""One-shot video tuning of a toy text-to-image diffusion model.

Subpackages: ``tensor`` (fp64 reverse-mode autodiff), ``attention``,
``diffusion``, ``unet``, ``tuner``, ``sampler`` and ``harness`` (synthetic
data, metrics, pretraining, export, benchmarks).
"""

__version__ = "0.1.0"
