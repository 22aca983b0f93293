"""Differentiable tiled software rasterizer.

The compositing kernels come from the compiled core when it is built, and
from ``_kernels_py`` otherwise; see :mod:`.backend`.
"""

from .backend import available as available_backends
from .backend import get as get_backend
from .backend import set_num_threads
from .projection import Splats, project, project_backward, project_gaussians
from .reference import render_reference
from .render import RenderOutput, SplatGrads, bin_splats, render, render_backward

__all__ = [
    "RenderOutput", "SplatGrads", "Splats", "available_backends", "bin_splats",
    "get_backend", "project", "project_backward", "project_gaussians", "render",
    "render_backward", "render_reference", "set_num_threads",
]
