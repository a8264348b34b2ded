"""Progressive WGAN-GP image synthesis at desk scale.

Subpackages: ``autodiff`` (tensors, reverse-mode AD, Adam), ``nets``
(progressive generator/critic), ``objectives`` (losses), ``trainer``,
``metrics`` (SSIM, MS-SSIM, sliced Wasserstein), ``dataio`` and ``cli``.
"""

__version__ = "0.1.0"
