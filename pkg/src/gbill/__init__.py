"""Textured 2D Gaussian splats for image fitting.

Each splat carries a small N x N color grid that is bilinearly interpolated
in the splat's own uv-plane.  The package provides a tile-based
differentiable rasterizer with a hand-derived backward pass, slow reference
oracles, Adam, an image-fitting trainer, metrics and a CLI.
"""

import numba

# skip numba's TBB probe (it warns when the installed TBB is too old)
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

from .core import (  # noqa: E402
    ColorGridConfig,
    GradientBuffer,
    ImagePlaneCamera,
    RenderOutput,
    SplatFileError,
    SplatSet,
    activate,
    load,
    parse,
    save,
    serialize,
)
from .raster import RasterConfig, bin_splats, render, render_backward, render_forward  # noqa: E402
from .train import TrainConfig, fit  # noqa: E402

__all__ = [
    "ColorGridConfig", "GradientBuffer", "ImagePlaneCamera", "RenderOutput", "SplatFileError",
    "SplatSet", "activate", "load", "parse", "save", "serialize",
    "RasterConfig", "bin_splats", "render", "render_backward", "render_forward",
    "TrainConfig", "fit",
]
