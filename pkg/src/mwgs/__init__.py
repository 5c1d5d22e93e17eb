"""Micro-macro wavelet-sampled Gaussian splatting on the CPU.

Anchored 3D Gaussians are colored by fusing a global appearance code, a
refined code sampled from a wavelet feature pyramid through narrow and broad
frustums, and a per-anchor intrinsic code, then rendered by a tile
rasterizer with hand-written reverse-mode gradients.
"""

__version__ = "0.1.0"
