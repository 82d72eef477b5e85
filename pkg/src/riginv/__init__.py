"""Image-based facial rig inversion at desk scale."""
from .mesh import RigidConfig, RigidTransform, TriMesh, apply_rigid, read_obj, sample_rigid, write_obj
from .rig import (NUM_PARAMS, BlendRig, RigParams, demo_rig, load_rig, random_rig, rig_forward,
                  rig_jacobian, save_rig)

__version__ = "0.1.0"

__all__ = [
    "RigidConfig", "RigidTransform", "TriMesh", "apply_rigid", "read_obj", "sample_rigid",
    "write_obj", "NUM_PARAMS", "BlendRig", "RigParams", "demo_rig", "load_rig", "random_rig",
    "rig_forward", "rig_jacobian", "save_rig",
]
