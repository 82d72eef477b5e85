"""Linear blendshape rig: decoding control vectors into meshes."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .mesh import TriMesh, read_obj, write_obj

NUM_PARAMS = 102


@dataclass(frozen=True)
class RigParams:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.shape != (NUM_PARAMS,):
            raise ValueError(f"RigParams needs exactly {NUM_PARAMS} values, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise ValueError("RigParams contains non-finite values")
        object.__setattr__(self, "values", v)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def to_json(self) -> dict:
        return {"values": self.values.tolist()}

    @classmethod
    def from_json(cls, d) -> "RigParams":
        return cls(d["values"] if isinstance(d, dict) else d)

    @classmethod
    def zeros(cls) -> "RigParams":
        return cls(np.zeros(NUM_PARAMS))


@dataclass(frozen=True)
class BlendRig:
    neutral: np.ndarray        # (V, 3)
    deltas: np.ndarray         # (K, V, 3)
    names: tuple
    faces: np.ndarray          # (F, 3)
    uvs: Optional[np.ndarray] = None

    def __post_init__(self):
        neutral = np.asarray(self.neutral, dtype=np.float64)
        deltas = np.asarray(self.deltas, dtype=np.float64)
        if deltas.ndim != 3 or deltas.shape[1:] != neutral.shape:
            raise ValueError(f"delta fields {deltas.shape} do not match neutral {neutral.shape}")
        names = tuple(self.names)
        if len(names) != len(deltas):
            raise ValueError("one name per delta field required")
        if len(set(names)) != len(names):
            raise ValueError("control names must be unique")
        # TriMesh validates faces/uvs against the neutral
        mesh = TriMesh(neutral, self.faces, self.uvs)
        object.__setattr__(self, "neutral", mesh.positions)
        object.__setattr__(self, "deltas", deltas)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "faces", mesh.faces)
        object.__setattr__(self, "uvs", mesh.uvs)
        object.__setattr__(self, "_basis", deltas.reshape(len(deltas), -1))

    @property
    def n_targets(self) -> int:
        return len(self.deltas)

    @property
    def n_vertices(self) -> int:
        return len(self.neutral)

    @property
    def basis(self) -> np.ndarray:
        """Delta fields flattened to a (K, 3V) matrix."""
        return self._basis

    def neutral_mesh(self) -> TriMesh:
        return TriMesh(self.neutral, self.faces, self.uvs)


def _check_params(rig: BlendRig, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.size != rig.n_targets:
        raise ValueError(f"parameter length {p.size} does not match rig with {rig.n_targets} targets")
    if not np.all(np.isfinite(p)):
        raise ValueError("parameters contain non-finite values")
    return p


def rig_forward(rig: BlendRig, p) -> TriMesh:
    """neutral + sum_i p[i] * deltas[i]; no clamping."""
    p = _check_params(rig, p)
    offsets = (p @ rig.basis).reshape(rig.neutral.shape)
    return TriMesh(rig.neutral + offsets, rig.faces, rig.uvs)


def rig_jacobian(rig: BlendRig) -> np.ndarray:
    """d positions / d p[i] for every control, shape (K, V, 3). Constant in p."""
    return rig.deltas.copy()


def random_rig(n_vertices: int = 200, n_targets: int = NUM_PARAMS, seed: int = 0,
               scale: float = 0.1) -> BlendRig:
    """Random rig with Gaussian deltas; full column rank almost surely when 3V >= K."""
    rng = np.random.default_rng(seed)
    neutral = rng.normal(size=(n_vertices, 3))
    deltas = scale * rng.normal(size=(n_targets, n_vertices, 3))
    faces = np.stack([np.arange(n_vertices - 2), np.arange(1, n_vertices - 1),
                      np.arange(2, n_vertices)], axis=1)
    names = [f"ctrl_{i:03d}" for i in range(n_targets)]
    return BlendRig(neutral, deltas, names, faces)


# Illustrative FACS-flavoured control names for the demo rig: 43 bilateral + 16 central.
_BILATERAL = (
    "browInnerUp browOuterUp browDown browLower eyeBlink eyeSquint eyeWide eyeLookUp "
    "eyeLookDown eyeLookIn eyeLookOut lidTighten lidRaise cheekRaise cheekSquint cheekPuff "
    "cheekSuck noseSneer nostrilDilate nostrilCompress lipCornerPull lipCornerDepress "
    "mouthSmile mouthFrown mouthDimple mouthStretch mouthPress mouthUpperUp mouthLowerDown "
    "lipStretch lipTighten lipFunnel lipPucker lipSuck upperLipRaise lowerLipDepress "
    "lipPress sharpLipPull neckTighten earUp templeFlex jawClench browKnit"
).split()
_CENTRAL = (
    "jawOpen jawForward jawLeft jawRight mouthClose mouthFunnel mouthPucker mouthLeft "
    "mouthRight mouthRollUpper mouthRollLower mouthShrugUpper mouthShrugLower tongueOut "
    "noseWrinkle chinRaise"
).split()
DEMO_NAMES = tuple(f"{b}_{s}" for b in _BILATERAL for s in "LR") + tuple(_CENTRAL)
assert len(DEMO_NAMES) == NUM_PARAMS


def demo_rig(grid: int = 32, seed: int = 0) -> BlendRig:
    """A procedural face-like height field with UVs and 102 localized delta fields.

    Bilateral controls come in mirrored L/R pairs. The basis is smooth but
    generic, so it has full column rank.
    """
    rng = np.random.default_rng(seed)
    n = grid + 1
    u, v = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n))
    x = (u - 0.5) * 2.0
    y = (v - 0.5) * 2.4
    dome = np.sqrt(np.clip(1.0 - x ** 2 / 1.1 - y ** 2 / 1.6, 0.0, None))
    nose = 0.25 * np.exp(-(x ** 2 / 0.02 + (y + 0.05) ** 2 / 0.12))
    z = 0.6 * dome + nose
    neutral = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    uvs = np.stack([u, v], axis=-1).reshape(-1, 2)

    idx = np.arange(n * n).reshape(n, n)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, 1:].ravel(), idx[1:, :-1].ravel()
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])

    def bump(cx, cy, sigma, direction):
        w = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sigma ** 2)).reshape(-1, 1)
        return w * direction

    deltas = []
    for _ in _BILATERAL:
        cx = rng.uniform(0.15, 0.8)
        cy = rng.uniform(-0.9, 0.9)
        sigma = rng.uniform(0.08, 0.18)
        direction = rng.normal(size=3) * np.array([0.06, 0.06, 0.1])
        mirrored = direction * np.array([-1.0, 1.0, 1.0])
        deltas.append(bump(-cx, cy, sigma, direction))
        deltas.append(bump(cx, cy, sigma, mirrored))
    for _ in _CENTRAL:
        cy = rng.uniform(-1.0, 0.6)
        sigma = rng.uniform(0.08, 0.18)
        direction = rng.normal(size=3) * np.array([0.06, 0.06, 0.1])
        deltas.append(bump(rng.uniform(-0.1, 0.1), cy, sigma, direction))
    return BlendRig(neutral, np.stack(deltas), DEMO_NAMES, faces, uvs)


def load_rig(manifest_path) -> BlendRig:
    """Load {neutral: path, targets: [{name, path}]}; paths relative to the manifest."""
    manifest_path = Path(manifest_path)
    spec = json.loads(manifest_path.read_text(encoding="utf-8"))
    root = manifest_path.parent
    neutral = read_obj(root / spec["neutral"])
    names, deltas = [], []
    for target in spec["targets"]:
        mesh = read_obj(root / target["path"])
        if mesh.n_vertices != neutral.n_vertices:
            raise ValueError(f"target {target['name']!r} has {mesh.n_vertices} vertices, "
                             f"neutral has {neutral.n_vertices}")
        names.append(target["name"])
        deltas.append(mesh.positions - neutral.positions)
    return BlendRig(neutral.positions, np.stack(deltas), names, neutral.faces, neutral.uvs)


def save_rig(rig: BlendRig, directory) -> Path:
    """Write neutral.obj, one OBJ per target and rig.json. Returns the manifest path."""
    directory = Path(directory)
    (directory / "targets").mkdir(parents=True, exist_ok=True)
    write_obj(rig.neutral_mesh(), directory / "neutral.obj")
    targets = []
    for i, name in enumerate(rig.names):
        rel = f"targets/{i:03d}_{name}.obj"
        write_obj(TriMesh(rig.neutral + rig.deltas[i], rig.faces, rig.uvs), directory / rel)
        targets.append({"name": name, "path": rel})
    manifest = directory / "rig.json"
    manifest.write_text(json.dumps({"neutral": "neutral.obj", "targets": targets}, indent=1),
                        encoding="utf-8")
    return manifest


def params_vector(rig_names: Sequence[str], weights) -> np.ndarray:
    """Build a dense vector from either a dense list or a {name: weight} mapping."""
    if isinstance(weights, dict):
        out = np.zeros(len(rig_names))
        index = {n: i for i, n in enumerate(rig_names)}
        for name, w in weights.items():
            if name not in index:
                raise ValueError(f"unknown control name {name!r}")
            out[index[name]] = float(w)
        return out
    out = np.asarray(weights, dtype=np.float64).reshape(-1)
    if out.size != len(rig_names):
        raise ValueError(f"expected {len(rig_names)} weights, got {out.size}")
    return out
