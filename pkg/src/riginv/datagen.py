"""Synthetic corpus generation: base parameter sets, perturbation, rendering, layout."""
from __future__ import annotations

import hashlib
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .mesh import RigidConfig, RigidTransform, apply_rigid, sample_rigid
from .render import (CameraConfig, ImageRGB8, LightRig, NoTangentSpaceError,
                     compute_tangent_frames, rasterize)
from .rig import BlendRig, params_vector, rig_forward

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])


@dataclass(frozen=True)
class PerturbConfig:
    p_drop: float = 0.2
    p_add: float = 0.1
    add_cap: int = 3
    p_replace: float = 0.1
    intensity_mean: float = 0.6
    intensity_std: float = 0.25
    intensity_clamp: tuple = (0.05, 1.0)

    def __post_init__(self):
        for name in ("p_drop", "p_add", "p_replace"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.intensity_std < 0:
            raise ValueError("intensity_std must be non-negative")
        if self.add_cap < 0:
            raise ValueError("add_cap must be non-negative")
        lo, hi = self.intensity_clamp
        if not (0.0 <= lo < hi <= 1.0):
            raise ValueError("intensity_clamp must satisfy 0 <= lo < hi <= 1")
        object.__setattr__(self, "intensity_clamp", (float(lo), float(hi)))

    @classmethod
    def disabled(cls) -> "PerturbConfig":
        return cls(p_drop=0.0, p_add=0.0, p_replace=0.0)


@dataclass(frozen=True)
class DatasetConfig:
    total_samples: int = 22575
    resolution: int = 512
    rigid: RigidConfig = field(default_factory=RigidConfig)
    seed: int = 0
    canonical_path: Optional[str] = None   # None: packaged default expressions
    output_dir: str = "data"
    normal_space: str = "tangent"
    perturb_base_pass: bool = False        # first pass over the base sets stays pristine

    def to_dict(self) -> dict:
        """Config echo for the manifest; the output location is implied and omitted."""
        d = asdict(self)
        d["rigid"] = asdict(self.rigid)
        del d["output_dir"]
        return d


@dataclass(frozen=True)
class RenderedSample:
    appearance: ImageRGB8
    normal_map: ImageRGB8
    params: np.ndarray   # ground truth; length equals the rig's control count (102)
    sample_id: str
    transform: RigidTransform

    def __post_init__(self):
        if self.appearance.pixels.shape != self.normal_map.pixels.shape:
            raise ValueError("appearance and normal map resolutions differ")
        if not np.all(np.isfinite(self.params)):
            raise ValueError("non-finite ground-truth parameters")


def load_canonical(path=None, names: Sequence[str] = ()) -> list:
    """Return [(name, vector)] from a canonical-expressions JSON file."""
    if path is None:
        text = resources.files("riginv.data").joinpath("canonical_expressions.json").read_text()
    else:
        text = Path(path).read_text(encoding="utf-8")
    spec = json.loads(text)
    return [(e["name"], params_vector(names, e["weights"])) for e in spec["expressions"]]


def base_param_sets(rig: BlendRig, canonical) -> list:
    """One-hot activation per control, then the canonical combinations."""
    k = rig.n_targets
    sets = [np.eye(k)[i] for i in range(k)]
    for item in canonical:
        vec = item[1] if isinstance(item, tuple) else item
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.size != k:
            raise ValueError(f"canonical vector has length {vec.size}, rig expects {k}")
        sets.append(vec.copy())
    return sets


def perturb_params(p, cfg: PerturbConfig, rng: np.random.Generator) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    k = p.size
    active = np.zeros(k, dtype=bool)
    active[p > 0] = True

    idx = np.flatnonzero(active)
    dropped = idx[rng.random(idx.size) < cfg.p_drop]
    active[dropped] = False

    idx = np.flatnonzero(active)
    for i in idx[rng.random(idx.size) < cfg.p_replace]:
        free = np.flatnonzero(~active)
        if free.size == 0:
            continue
        active[i] = False
        active[free[rng.integers(free.size)]] = True

    idx = np.flatnonzero(~active)
    added = idx[rng.random(idx.size) < cfg.p_add][:cfg.add_cap]
    active[added] = True

    out = np.zeros(k)
    final = np.flatnonzero(active)
    lo, hi = cfg.intensity_clamp
    out[final] = np.clip(rng.normal(cfg.intensity_mean, cfg.intensity_std, size=final.size), lo, hi)
    return out


def sample_stream(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


@dataclass(frozen=True)
class SamplePlan:
    index: int
    base_index: int
    base_name: str
    perturbed: bool


def plan_samples(n_base: int, base_names: Sequence[str], total: int,
                 perturb_base_pass: bool = False) -> list:
    if total < n_base:
        raise ValueError(f"total_samples ({total}) must cover all {n_base} base sets")
    return [SamplePlan(i, i % n_base, base_names[i % n_base],
                       perturb_base_pass or i >= n_base) for i in range(total)]


class Synthesizer:
    """Renders samples for one rig; the camera is fitted once to the neutral."""

    def __init__(self, rig: BlendRig, cfg: DatasetConfig, perturb: PerturbConfig,
                 lights: Optional[LightRig] = None):
        self.rig = rig
        self.cfg = cfg
        self.perturb = perturb
        self.lights = lights or LightRig.default()
        neutral = rig.neutral_mesh()
        self.camera = CameraConfig.fit(neutral, cfg.resolution)
        self.diagonal = neutral.bbox_diagonal()
        self.normal_space = cfg.normal_space
        self.frames = None
        if self.normal_space == "tangent":
            try:
                self.frames = compute_tangent_frames(neutral)
            except NoTangentSpaceError:
                log.warning("rig has no UVs; falling back to camera-space normal maps")
                self.normal_space = "camera"

    def render_pair(self, params, transform: Optional[RigidTransform] = None):
        mesh = rig_forward(self.rig, params)
        if transform is not None:
            mesh = apply_rigid(mesh, transform)
        appearance = rasterize(mesh, self.camera, self.lights, "appearance")
        normal = rasterize(mesh, self.camera, self.lights, "normal_map",
                           frames=self.frames, normal_space=self.normal_space)
        return appearance, normal

    def make_sample(self, plan: SamplePlan, base: np.ndarray) -> RenderedSample:
        rng = sample_stream(self.cfg.seed, plan.index)
        params = perturb_params(base, self.perturb, rng) if plan.perturbed else base.copy()
        xf = sample_rigid(rng, self.cfg.rigid, self.diagonal)
        appearance, normal = self.render_pair(params, xf)
        return RenderedSample(appearance, normal, params, f"{plan.index:06d}", xf)


def _png_bytes(img: ImageRGB8) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(img.pixels, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def synthesize_dataset(rig: BlendRig, cfg: DatasetConfig, perturb: PerturbConfig, *,
                       canonical=None, rig_path: Optional[str] = None,
                       threads: int = 1) -> dict:
    """Write the corpus under ``cfg.output_dir`` and return the manifest dict."""
    if canonical is None:
        canonical = load_canonical(cfg.canonical_path, rig.names)
    bases = base_param_sets(rig, canonical)
    base_names = list(rig.names) + [c[0] if isinstance(c, tuple) else f"canonical_{i:02d}"
                                    for i, c in enumerate(canonical)]
    plans = plan_samples(len(bases), base_names, cfg.total_samples, cfg.perturb_base_pass)
    synth = Synthesizer(rig, cfg, perturb)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tmp_manifest = out / "manifest.json.partial"

    def work(plan: SamplePlan) -> dict:
        sample = synth.make_sample(plan, bases[plan.base_index])
        d = out / sample.sample_id
        d.mkdir(exist_ok=True)
        (d / "appearance.png").write_bytes(_png_bytes(sample.appearance))
        (d / "normal.png").write_bytes(_png_bytes(sample.normal_map))
        (d / "params.json").write_text(json.dumps({"values": sample.params.tolist()}), encoding="utf-8")
        return {"id": sample.sample_id, "index": plan.index, "base_index": plan.base_index,
                "base_name": plan.base_name, "perturbed": plan.perturbed,
                "seed": [cfg.seed, plan.index], "transform": sample.transform.to_dict()}

    try:
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                records = list(pool.map(work, plans))
        else:
            records = [work(p) for p in plans]
        manifest = {
            "format_version": MANIFEST_VERSION,
            "seed": cfg.seed,
            "rig": rig_path,
            "n_targets": rig.n_targets,
            "resolution": cfg.resolution,
            "normal_space": synth.normal_space,
            "camera": synth.camera.to_dict(),
            "dataset": cfg.to_dict(),
            "perturb": asdict(perturb),
            "base_sets": [{"name": n, "values": b.tolist()} for n, b in zip(base_names, bases)],
            "samples": records,
        }
        tmp_manifest.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
        tmp_manifest.replace(out / "manifest.json")
    except BaseException:
        tmp_manifest.unlink(missing_ok=True)
        raise
    log.info("wrote %d samples to %s", len(plans), out)
    return manifest


def load_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text(encoding="utf-8"))
    manifest["_root"] = str(path.parent)
    return manifest


def sample_dir(manifest: dict, record: dict) -> Path:
    return Path(manifest["_root"]) / record["id"]


def tree_digest(directory) -> str:
    """SHA-256 over relative paths and bytes of every file under ``directory``."""
    h = hashlib.sha256()
    root = Path(directory)
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(f.relative_to(root).as_posix().encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def preprocess_image(img: ImageRGB8, target: int = 512) -> np.ndarray:
    """Resize shorter side (bilinear), center-crop, ImageNet-normalize. Returns float32 CxHxW."""
    px = img.pixels
    h, w = px.shape[:2]
    if min(h, w) != target:
        s = target / min(h, w)
        nw, nh = max(target, round(w * s)), max(target, round(h * s))
        px = np.asarray(Image.fromarray(px).resize((nw, nh), Image.BILINEAR))
        h, w = nh, nw
    top, left = (h - target) // 2, (w - target) // 2
    px = px[top:top + target, left:left + target]
    x = px.astype(np.float64) / 255.0
    x = (x - IMAGENET_MEAN) / IMAGENET_STD
    return np.ascontiguousarray(x.transpose(2, 0, 1), dtype=np.float32)
