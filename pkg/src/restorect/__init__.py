"""restorect: desk-scale toolkit for rectified-flow feature distillation.

Subpackages by capability:

- ndtensor: float64 arrays, deterministic Philox RNG, reduction statistics,
  pixel rearrangement, Gaussian Frechet distance, binary tensor dumps
- autodiff: reverse-mode differentiation with a closed op set and a
  finite-difference verification harness
- hvi_color: polarized hue/chroma/intensity transform and color loss
- aniso_diffusion: learnable edge-aware diffusion operator and losses
- nn_blocks: SCLN, QK-normalized attention, transformer block, decomposition
  net, perceptual/style losses, velocity predictor, checkpoints
- rectflow: flow interpolation, velocity matching, Euler sampling,
  trajectory consistency, DDIM baseline
- flexloss: cross-normalized outlier-masked feature matching loss
- distill_harness: synthetic data/teacher, two-phase training, sampler
  comparison
- checks: registered self-checks with a machine-readable report
- cli: command-line entry points
"""

from . import (  # noqa: F401
    aniso_diffusion,
    autodiff,
    checks,
    distill_harness,
    flexloss,
    hvi_color,
    ndtensor,
    nn_blocks,
    rectflow,
)

__version__ = "0.1.0"
