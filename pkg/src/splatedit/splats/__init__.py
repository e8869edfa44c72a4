from .model import (Camera, Gaussian, SplatScene, camera_from_lookat, logit,
                    look_at, orbit_cameras, quat_to_rotmat, sigmoid)
from .ply import PlyFormatError, PlyParseError, load_ply, save_ply
from .sh import (dc_to_rgb, eval_sh_color, eval_sh_colors, n_coeffs,
                 rgb_to_dc, sh_basis, sh_basis_grad)
from .synth import PrimitiveSpec, random_desk_scene, synth_primitive, synth_scene

__all__ = [
    "Gaussian", "SplatScene", "Camera", "quat_to_rotmat", "sigmoid", "logit",
    "look_at", "camera_from_lookat", "orbit_cameras",
    "load_ply", "save_ply", "PlyFormatError", "PlyParseError",
    "sh_basis", "sh_basis_grad", "eval_sh_color", "eval_sh_colors",
    "n_coeffs", "rgb_to_dc", "dc_to_rgb",
    "PrimitiveSpec", "synth_primitive", "synth_scene", "random_desk_scene",
]
