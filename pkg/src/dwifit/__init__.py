"""Diffusion tensor reconstruction from flexible gradient schemes.

Classical linear least squares and a dynamic-convolution network that accepts
any number (>= 6) and orientation of diffusion gradient directions, plus the
synthetic phantoms and image-quality metrics used to validate both.
"""

__version__ = "0.1.0"
