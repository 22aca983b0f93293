"""One view at one time: deform, project, composite; and the full adjoint."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .deform import DeformationDelta, OpacityMode, apply_delta, apply_delta_backward
from .gaussians import activated_view, covariance_backward, covariance_matrices
from .raster import project_backward, project_gaussians, render, render_backward


@dataclass
class FrameResult:
    out: object          # RenderOutput
    splats: object
    proj_cache: object
    view: object
    deformed: object
    delta: DeformationDelta
    field_cache: dict | None
    cam: object
    t: float
    embed_dim: int = 0
    deform_seconds: float = 0.0

    @property
    def color(self):
        return self.out.color


def render_frame(cloud, field, cam, t, opacity_mode=OpacityMode(), *, deform=True,
                 backend=None, counters=None):
    """Render ``cloud`` deformed by ``field`` to time ``t`` from ``cam``.

    With ``deform=False`` the canonical field is drawn as stored (zero delta,
    canonical opacities).
    """
    view = activated_view(cloud)
    t0 = time.perf_counter()
    if deform and field is not None:
        delta, fcache = field.forward(cloud.embeddings, t)
    else:
        delta, fcache = DeformationDelta.zeros(cloud.n, cloud.sh_degree), None
        opacity_mode = OpacityMode("bypass")
    deformed = apply_delta(view, delta, opacity_mode, counters)
    deform_seconds = time.perf_counter() - t0
    cov3d = covariance_matrices(deformed.scales, deformed.quats)
    splats, pcache = project_gaussians(deformed.positions, cov3d, deformed.opacity,
                                       deformed.sh, cloud.sh_degree, cam)
    if counters is not None and splats.n_degenerate:
        counters["degenerate_splat"] = counters.get("degenerate_splat", 0) + splats.n_degenerate
    out = render(splats, cam, backend=backend)
    return FrameResult(out=out, splats=splats, proj_cache=pcache, view=view, deformed=deformed,
                       delta=delta, field_cache=fcache, cam=cam, t=t,
                       embed_dim=cloud.embed_dim, deform_seconds=deform_seconds)


def render_frame_backward(res, d_color, field):
    """Gradients of a scalar loss w.r.t. every cloud array and field parameter.

    Returns ``(cloud_grads, field_grads)``; ``field_grads`` is empty when the
    frame was rendered without deformation.
    """
    sg = render_backward(res.out, d_color)
    d_pos, d_cov3d, d_sh = project_backward(res.splats, res.proj_cache, res.cam,
                                            sg.means2d, sg.conics, sg.colors)
    d_scales, d_quats = covariance_backward(res.deformed.scales, res.deformed.quats, d_cov3d)
    d_canon, d_delta = apply_delta_backward(res.view, res.deformed, d_pos, d_scales, d_quats,
                                            sg.opacity, d_sh)
    field_grads = {}
    d_emb = np.zeros((res.view.positions.shape[0], res.embed_dim))
    if res.field_cache is not None:
        field_grads, d_emb = field.backward(res.field_cache, d_delta)
    cloud_grads = dict(d_canon)
    cloud_grads["embeddings"] = d_emb
    return cloud_grads, field_grads
