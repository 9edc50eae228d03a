"""Fly-through synthesis from a single RGBD image.

Pipeline: procedurally generated terrain views supply RGBD training data; a
conditional denoising model learns to inpaint and refine warped frames; the
sequence generator warps each frame to the next camera pose and refines it,
conditioning the denoising steps on past and future views.
"""

from .geometry import (
    CameraPose,
    Intrinsics,
    MeshProjection,
    RgbdImage,
    discontinuity_mask,
    intrinsics_from_fov,
    project_point,
    region_fractions,
    unproject_pixel,
    warp_rgbd,
)

__version__ = "0.1.0"

__all__ = [
    "CameraPose",
    "Intrinsics",
    "MeshProjection",
    "RgbdImage",
    "discontinuity_mask",
    "intrinsics_from_fov",
    "project_point",
    "region_fractions",
    "unproject_pixel",
    "warp_rgbd",
    "__version__",
]
