"""3D face construction, projection, UV unwrapping, visibility and rendering."""

from .geometry import (
    UVUnwrapConfig,
    euler_from_rotation,
    pose_rotation,
    project,
    rotate,
    rotation_matrix,
    unwrap_uv,
    vertex_normals,
    yaw_from_rotation,
)
from .model import (
    ContractError,
    FaceCoefficients,
    FacePose,
    MorphableModel,
    build_face,
    build_face_unclamped,
    symmetric_grid_triangles,
    toy_model,
)
from .raster import (
    RenderPlan,
    UVLayout,
    UVTexture,
    VisibilityMap,
    flip_uv,
    occlusion_bits,
    rasterize_points,
    render,
    sample_uv_texture,
    visibility_and_bits,
    visibility_map,
)

__all__ = [
    "ContractError", "FaceCoefficients", "FacePose", "MorphableModel", "RenderPlan",
    "UVLayout", "UVTexture", "UVUnwrapConfig", "VisibilityMap", "build_face",
    "build_face_unclamped", "euler_from_rotation", "flip_uv", "occlusion_bits",
    "pose_rotation", "project", "rasterize_points", "render", "rotate", "rotation_matrix",
    "sample_uv_texture", "symmetric_grid_triangles", "toy_model", "unwrap_uv",
    "vertex_normals", "visibility_and_bits", "visibility_map", "yaw_from_rotation",
]
