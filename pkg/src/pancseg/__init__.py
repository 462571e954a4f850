"""pancseg: hierarchical coarse-to-fine superpixel segmentation for
volumetric CT-like data.

Pipeline: SLIC superpixels per axial slice -> two-level random-forest
cascade -> multi-scale (optionally TPS-deformed) patch sampling -> small
convolutional network -> dense probability map -> 3D Gaussian smoothing ->
thresholded mask, evaluated by Dice.
"""

from ._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
