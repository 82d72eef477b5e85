"""Triangle meshes, rigid transforms and OBJ I/O."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class TriMesh:
    positions: np.ndarray
    faces: np.ndarray
    uvs: Optional[np.ndarray] = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be Vx3, got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions contain non-finite values")
        if len(faces):
            if faces.min() < 0 or faces.max() >= len(pos):
                raise ValueError("face index out of range")
            if np.any((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2])
                      | (faces[:, 0] == faces[:, 2])):
                raise ValueError("degenerate face (repeated vertex index)")
        uvs = self.uvs
        if uvs is not None:
            uvs = np.asarray(uvs, dtype=np.float64)
            if uvs.shape != (len(pos), 2):
                raise ValueError(f"uvs must be Vx2, got {uvs.shape}")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "uvs", uvs)

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    def with_positions(self, positions) -> "TriMesh":
        return TriMesh(positions, self.faces, self.uvs)

    def bbox_diagonal(self) -> float:
        if not len(self.positions):
            return 0.0
        return float(np.linalg.norm(self.positions.max(0) - self.positions.min(0)))


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    euler_deg: Optional[tuple] = None  # (x, y, z) when produced by sample_rigid

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6, rtol=0):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)

    def to_dict(self) -> dict:
        d = {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}
        if self.euler_deg is not None:
            d["euler_deg"] = list(self.euler_deg)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        euler = d.get("euler_deg")
        return cls(np.array(d["rotation"]), np.array(d["translation"]),
                   tuple(euler) if euler is not None else None)


@dataclass(frozen=True)
class RigidConfig:
    """Bounds for rigid augmentation: degrees per Euler axis, and translation
    per axis as a fraction of the neutral bounding-box diagonal."""
    max_rotation_deg: float = 5.0
    max_translation_frac: float = 0.02

    def __post_init__(self):
        if self.max_rotation_deg < 0 or self.max_translation_frac < 0:
            raise ValueError("rigid bounds must be non-negative")


def euler_matrix(ax: float, ay: float, az: float) -> np.ndarray:
    """Rz @ Ry @ Rx for angles in radians."""
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def sample_rigid(rng: np.random.Generator, cfg: RigidConfig, diagonal: float = 1.0) -> RigidTransform:
    if diagonal < 0:
        raise ValueError("diagonal must be non-negative")
    angles = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg, size=3)
    bound = cfg.max_translation_frac * diagonal
    t = rng.uniform(-bound, bound, size=3)
    rot = euler_matrix(*np.deg2rad(angles))
    return RigidTransform(rot, t, tuple(float(a) for a in angles))


def apply_rigid(mesh: TriMesh, xf: RigidTransform) -> TriMesh:
    if np.array_equal(xf.rotation, np.eye(3)) and not np.any(xf.translation):
        return mesh
    return mesh.with_positions(mesh.positions @ xf.rotation.T + xf.translation)


def read_obj(path) -> TriMesh:
    """Read v/vt/f records. Faces must be triangles; a vertex may carry one UV only."""
    verts, texcoords, faces, face_uv = [], [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            tag = tokens[0]
            if tag == "v":
                verts.append([float(x) for x in tokens[1:4]])
            elif tag == "vt":
                texcoords.append([float(x) for x in tokens[1:3]])
            elif tag == "f":
                if len(tokens) != 4:
                    raise ValueError(f"{path}:{lineno}: only triangles are supported")
                vi, ti = [], []
                for corner in tokens[1:]:
                    parts = corner.split("/")
                    vi.append(int(parts[0]) - 1)
                    ti.append(int(parts[1]) - 1 if len(parts) > 1 and parts[1] else -1)
                faces.append(vi)
                face_uv.append(ti)
    positions = np.array(verts, dtype=np.float64).reshape(-1, 3)
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    uvs = None
    face_uv = np.array(face_uv, dtype=np.int64).reshape(-1, 3)
    if texcoords and len(faces) and np.all(face_uv >= 0):
        tc = np.array(texcoords, dtype=np.float64)
        uv_index = np.full(len(positions), -1, dtype=np.int64)
        for v, t in zip(faces.ravel(), face_uv.ravel()):
            if uv_index[v] == -1:
                uv_index[v] = t
            elif uv_index[v] != t and not np.array_equal(tc[uv_index[v]], tc[t]):
                raise ValueError(f"{path}: vertex {v + 1} has multiple UVs (seams unsupported)")
        if np.all(uv_index >= 0):
            uvs = tc[uv_index]
    return TriMesh(positions, faces, uvs)


def write_obj(mesh: TriMesh, path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.positions.tolist()]
    if mesh.uvs is not None:
        lines += [f"vt {u!r} {v!r}" for u, v in mesh.uvs.tolist()]
        lines += [f"f {a}/{a} {b}/{b} {c}/{c}" for a, b, c in (mesh.faces + 1).tolist()]
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in (mesh.faces + 1).tolist()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
