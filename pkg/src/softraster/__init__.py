"""Differentiable soft rasterization of colorized triangle meshes.

The package renders meshes by turning every triangle into a smooth
per-pixel coverage probability and fusing fragments with a
depth-weighted softmax, so the resulting image is differentiable with
respect to vertex positions, vertex colors, and rigid pose.  On top of
the renderer sit analytic backward passes, image losses, and small
gradient-descent fitting loops used by the command line tools.
"""

from .mesh import (
    FaceNormals,
    Mesh,
    compute_face_normals,
    displace,
    make_ico_sphere,
    make_unit_cube,
    uniform_laplacian,
)
from .camera import (
    Camera,
    Pose,
    ScreenVertex,
    project,
    project_jacobians,
    rotation_geodesic_angle,
)
from .render import (
    FragmentBuffer,
    RenderConfig,
    RenderOutput,
    aggregate_silhouette,
    aggregate_softmax,
    clipped_barycentric,
    normalize_depth,
    probability,
    render,
    shade,
    signed_distance,
)
from .gradients import GradientSet, backward
from .oracles import hard_raster_oracle
from .losses import (
    LossWeights,
    color_l1_loss,
    laplacian_loss,
    silhouette_iou_loss,
    total_loss,
)
from .fitting import (
    FitReport,
    Schedule,
    adam_step,
    fit_energy,
    fit_nonrigid,
    fit_rigid_pose,
    render_rgba,
    run_pose_trial,
)

__all__ = [
    "Mesh",
    "FaceNormals",
    "compute_face_normals",
    "uniform_laplacian",
    "displace",
    "make_ico_sphere",
    "make_unit_cube",
    "Camera",
    "Pose",
    "ScreenVertex",
    "project",
    "project_jacobians",
    "rotation_geodesic_angle",
    "RenderConfig",
    "FragmentBuffer",
    "RenderOutput",
    "signed_distance",
    "probability",
    "clipped_barycentric",
    "shade",
    "normalize_depth",
    "aggregate_softmax",
    "aggregate_silhouette",
    "render",
    "GradientSet",
    "backward",
    "hard_raster_oracle",
    "LossWeights",
    "silhouette_iou_loss",
    "color_l1_loss",
    "laplacian_loss",
    "total_loss",
    "fit_energy",
    "render_rgba",
    "Schedule",
    "FitReport",
    "adam_step",
    "fit_rigid_pose",
    "fit_nonrigid",
    "run_pose_trial",
]

__version__ = "0.1.0"
