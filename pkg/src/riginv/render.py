"""Deterministic CPU rasterizer for appearance images and tangent-space normal maps.

Screen space has y pointing down. Vertex positions are snapped to a 1/256
subpixel grid so edge functions are exact in double precision, which makes
the top-left fill rule hold exactly on shared edges.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image

from .mesh import TriMesh

SUBPIXEL = 256.0
FLAT_NORMAL_RGB = (128, 128, 255)
GAMMA = 2.2


class NoTangentSpaceError(ValueError):
    pass


@dataclass(frozen=True)
class ImageRGB8:
    pixels: np.ndarray  # (H, W, 3) uint8

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise ValueError("ImageRGB8 needs an HxWx3 uint8 array")
        object.__setattr__(self, "pixels", np.ascontiguousarray(px))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def data(self) -> bytes:
        return self.pixels.tobytes()

    def save_png(self, path) -> None:
        Image.fromarray(self.pixels, mode="RGB").save(path, format="PNG")

    @classmethod
    def load_png(cls, path) -> "ImageRGB8":
        with Image.open(path) as im:
            return cls(np.asarray(im.convert("RGB")))


@dataclass(frozen=True)
class CameraConfig:
    """Orthographic camera looking down -Z.

    ``center`` and ``half_extent`` define the world-space square mapped onto
    the image; ``half_extent`` already includes the margin.
    """
    resolution: int = 512
    center: tuple = (0.0, 0.0)
    half_extent: float = 1.0
    margin: float = 0.05

    def __post_init__(self):
        if self.resolution < 16 or self.resolution % 2:
            raise ValueError("resolution must be even and at least 16")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if not self.half_extent > 0:
            raise ValueError("half_extent must be positive")

    @classmethod
    def fit(cls, mesh: TriMesh, resolution: int = 512, margin: float = 0.05) -> "CameraConfig":
        lo = mesh.positions[:, :2].min(0)
        hi = mesh.positions[:, :2].max(0)
        center = (hi + lo) / 2
        half = float(max(hi - lo)) / 2 * (1 + margin)
        return cls(resolution, (float(center[0]), float(center[1])), half or 1.0, margin)

    def project(self, positions: np.ndarray) -> np.ndarray:
        """World (x, y) to snapped screen coordinates (pixels, y down)."""
        half_res = self.resolution / 2
        sx = (positions[:, 0] - self.center[0]) / self.half_extent * half_res + half_res
        sy = half_res - (positions[:, 1] - self.center[1]) / self.half_extent * half_res
        return np.round(np.stack([sx, sy], axis=1) * SUBPIXEL) / SUBPIXEL

    def to_dict(self) -> dict:
        return {"resolution": self.resolution, "center": list(self.center),
                "half_extent": self.half_extent, "margin": self.margin}


@dataclass(frozen=True)
class Light:
    direction: tuple   # direction the light travels, world space
    intensity: float
    color: tuple = (1.0, 1.0, 1.0)


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return tuple((v / np.linalg.norm(v)).tolist())


@dataclass(frozen=True)
class LightRig:
    key: Light
    fill: Light
    rim: Light

    def __post_init__(self):
        for light in self.lights:
            if abs(np.linalg.norm(light.direction) - 1.0) > 1e-6:
                raise ValueError("light directions must be unit length")
            if light.intensity < 0:
                raise ValueError("light intensity must be non-negative")

    @property
    def lights(self):
        return (self.key, self.fill, self.rim)

    @classmethod
    def default(cls) -> "LightRig":
        return cls(Light(_unit((-0.5, -0.5, -1.0)), 1.0),
                   Light(_unit((0.7, -0.2, -1.0)), 0.4),
                   Light(_unit((0.0, 0.8, 0.5)), 0.3))

    @classmethod
    def key_only(cls, direction, intensity: float = 1.0) -> "LightRig":
        off = Light((0.0, 0.0, -1.0), 0.0)
        return cls(Light(_unit(direction), intensity), off, off)


def _normalize_rows(v: np.ndarray, fallback=(0.0, 0.0, 1.0)) -> np.ndarray:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    out = np.empty_like(v)
    ok = norm[..., 0] > 1e-300
    out[ok] = v[ok] / norm[ok]
    out[~ok] = fallback
    return out


def _face_cross(mesh: TriMesh) -> np.ndarray:
    p = mesh.positions[mesh.faces]
    return np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])


def _scatter_faces(values: np.ndarray, faces: np.ndarray, n: int) -> np.ndarray:
    acc = np.zeros((n, values.shape[1]))
    for k in range(3):
        np.add.at(acc, faces[:, k], values)
    return acc


def compute_vertex_normals(mesh: TriMesh) -> np.ndarray:
    # the unnormalized cross product is already weighted by twice the face area
    acc = _scatter_faces(_face_cross(mesh), mesh.faces, mesh.n_vertices)
    return _normalize_rows(acc)


def compute_tangent_frames(mesh: TriMesh, normals: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-vertex orthonormal frames, shape (V, 3, 3) with rows T, B, N."""
    if mesh.uvs is None:
        raise NoTangentSpaceError("mesh has no UVs; tangent space undefined")
    if normals is None:
        normals = compute_vertex_normals(mesh)
    p = mesh.positions[mesh.faces]
    uv = mesh.uvs[mesh.faces]
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    du1, dv1 = uv[:, 1, 0] - uv[:, 0, 0], uv[:, 1, 1] - uv[:, 0, 1]
    du2, dv2 = uv[:, 2, 0] - uv[:, 0, 0], uv[:, 2, 1] - uv[:, 0, 1]
    det = du1 * dv2 - du2 * dv1
    ok = np.abs(det) > 1e-12
    tangent = np.zeros_like(e1)
    tangent[ok] = (e1[ok] * dv2[ok, None] - e2[ok] * dv1[ok, None]) / det[ok, None]
    acc = _scatter_faces(tangent, mesh.faces, mesh.n_vertices)
    return _orthonormal_frames(acc, normals)


def _orthonormal_frames(tangent: np.ndarray, normal: np.ndarray) -> np.ndarray:
    n = _normalize_rows(normal)
    t = tangent - np.sum(tangent * n, axis=-1, keepdims=True) * n
    norm = np.linalg.norm(t, axis=-1)
    bad = norm < 1e-12
    if np.any(bad):
        # no usable tangent: any direction perpendicular to N
        axis = np.where(np.abs(n[bad, 0:1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
        t[bad] = axis - np.sum(axis * n[bad], axis=-1, keepdims=True) * n[bad]
    t = _normalize_rows(t)
    b = np.cross(n, t)
    return np.stack([t, b, n], axis=-2)


def _round_half_up(x: np.ndarray) -> np.ndarray:
    # rounding to 6 decimals first absorbs floating noise around exact halves
    return np.floor(np.round(x, 6) + 0.5)


def encode_normal(n) -> tuple:
    n = np.asarray(n, dtype=np.float64)
    if abs(np.linalg.norm(n) - 1.0) > 1e-3:
        raise ValueError(f"normal {n.tolist()} is not unit length")
    return tuple(int(c) for c in encode_normals(n[None])[0])


def encode_normals(n: np.ndarray) -> np.ndarray:
    """Vectorized codec: [-1, 1] -> [0, 255] per channel, round half up."""
    return np.clip(_round_half_up((n + 1.0) * 127.5), 0, 255).astype(np.uint8)


def decode_normal(c) -> np.ndarray:
    return np.asarray(c, dtype=np.float64) / 255.0 * 2.0 - 1.0


@dataclass
class _Fragments:
    pixel: np.ndarray    # flat pixel index
    face: np.ndarray
    bary: np.ndarray     # (n, 3), sums to 1


def _rasterize_fragments(mesh: TriMesh, cam: CameraConfig) -> _Fragments:
    """Visible fragments after z-buffering, one per covered pixel."""
    res = cam.resolution
    empty = _Fragments(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)))
    if not len(mesh.faces):
        return empty
    screen = cam.project(mesh.positions)
    depth = mesh.positions[:, 2]
    tri = screen[mesh.faces]                 # (F, 3, 2)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    order = np.tile([0, 1, 2], (len(tri), 1))
    order[area < 0] = [0, 2, 1]             # make every triangle positively oriented
    face_ids = np.nonzero(area != 0)[0]
    order = order[face_ids]
    verts = mesh.faces[face_ids[:, None], order]   # (F', 3) vertex ids
    tri = screen[verts]

    lo = np.clip(np.floor(tri.min(1) - 0.5).astype(np.int64), 0, res - 1)
    hi = np.clip(np.ceil(tri.max(1) - 0.5).astype(np.int64), 0, res - 1)
    off = (tri.max(1) < 0.5) | (tri.min(1) > res - 0.5)
    keep = ~(off[:, 0] | off[:, 1])
    face_ids, verts, tri, lo, hi = face_ids[keep], verts[keep], tri[keep], lo[keep], hi[keep]
    if not len(face_ids):
        return empty

    w = hi[:, 0] - lo[:, 0] + 1
    h = hi[:, 1] - lo[:, 1] + 1
    counts = w * h
    owner = np.repeat(np.arange(len(face_ids)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    px = lo[owner, 0] + local % w[owner]
    py = lo[owner, 1] + local // w[owner]
    cx, cy = px + 0.5, py + 0.5

    t = tri[owner]
    edge_w = []
    inside = np.ones(len(owner), dtype=bool)
    for i, j in ((1, 2), (2, 0), (0, 1)):
        ex = t[:, j, 0] - t[:, i, 0]
        ey = t[:, j, 1] - t[:, i, 1]
        e = ex * (cy - t[:, i, 1]) - ey * (cx - t[:, i, 0])
        top_left = (ey < 0) | ((ey == 0) & (ex > 0))
        inside &= (e > 0) | ((e == 0) & top_left)
        edge_w.append(e)
    bary = np.stack(edge_w, axis=1)[inside]
    bary = bary / bary.sum(1, keepdims=True)
    owner = owner[inside]
    pixel = py[inside] * res + px[inside]
    z = np.sum(bary * depth[verts[owner]], axis=1)

    # nearest (largest z) wins; exact ties resolved by lowest face index
    srt = np.lexsort((face_ids[owner], -z, pixel))
    pixel, owner, bary = pixel[srt], owner[srt], bary[srt]
    first = np.ones(len(pixel), dtype=bool)
    first[1:] = pixel[1:] != pixel[:-1]
    owner = owner[first]
    # barycentrics re-expressed against the original face vertex order
    vert_ids = verts[owner]
    bary_sel = bary[first]
    orig = mesh.faces[face_ids[owner]]
    reordered = np.zeros_like(bary_sel)
    for k in range(3):
        for m in range(3):
            reordered[:, k] += np.where(orig[:, k] == vert_ids[:, m], bary_sel[:, m], 0.0)
    return _Fragments(pixel[first], face_ids[owner], reordered)


def _interpolate(frag: _Fragments, mesh: TriMesh, attr: np.ndarray) -> np.ndarray:
    corners = attr[mesh.faces[frag.face]]    # (n, 3, k)
    return np.einsum("nc,nck->nk", frag.bary, corners)


def shade_lambert(normals: np.ndarray, lights: LightRig, albedo: float) -> np.ndarray:
    """Linear radiance (n, 3) from unit normals under the three lights."""
    out = np.zeros((len(normals), 3))
    for light in lights.lights:
        if light.intensity == 0:
            continue
        cos = np.clip(-(normals @ np.asarray(light.direction)), 0.0, None)
        out += (albedo * light.intensity * cos)[:, None] * np.asarray(light.color)[None]
    return out


def gamma_encode(linear: np.ndarray) -> np.ndarray:
    return _round_half_up(255.0 * np.clip(linear, 0.0, 1.0) ** (1.0 / GAMMA)).astype(np.uint8)


def rasterize(mesh: TriMesh, cam: CameraConfig, lights: LightRig, mode: str, *,
              frames: Optional[np.ndarray] = None, normal_space: str = "tangent",
              albedo: float = 0.75) -> ImageRGB8:
    """Render ``mode`` in {"appearance", "normal_map"}.

    For tangent-space normal maps the per-vertex frames default to the
    mesh's own; pass ``frames`` computed on a reference (e.g. neutral) mesh
    to bake the deformed surface against a fixed parameterization.
    """
    if mode not in ("appearance", "normal_map"):
        raise ValueError(f"invalid render mode {mode!r}")
    if normal_space not in ("tangent", "camera"):
        raise ValueError(f"invalid normal space {normal_space!r}")
    res = cam.resolution
    img = np.zeros((res * res, 3), dtype=np.uint8)
    if mode == "normal_map":
        img[:] = FLAT_NORMAL_RGB
    if not len(mesh.faces):
        return ImageRGB8(img.reshape(res, res, 3))

    frag = _rasterize_fragments(mesh, cam)
    vnormals = compute_vertex_normals(mesh)
    n = _normalize_rows(_interpolate(frag, mesh, vnormals))
    if mode == "appearance":
        img[frag.pixel] = gamma_encode(shade_lambert(n, lights, albedo))
    elif normal_space == "camera":
        img[frag.pixel] = encode_normals(n)
    else:
        if frames is None:
            frames = compute_tangent_frames(mesh, vnormals)
        t = _interpolate(frag, mesh, frames[:, 0])
        nf = _interpolate(frag, mesh, frames[:, 2])
        tbn = _orthonormal_frames(t, nf)
        local = np.einsum("nij,nj->ni", tbn, n)
        img[frag.pixel] = encode_normals(_normalize_rows(local))
    return ImageRGB8(img.reshape(res, res, 3))
