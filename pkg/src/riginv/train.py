"""Two-term loss, AdamW, the training loop, evaluation and the direct-fit baseline."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .datagen import load_manifest, preprocess_image, sample_dir
from .mesh import TriMesh
from .nnet.autograd import Value, as_value, backward, matmul, precision
from .nnet.checkpoint import load_checkpoint, save_checkpoint
from .nnet.model import DEFAULT_FROZEN, DualBranchRegressor
from .render import CameraConfig, ImageRGB8, LightRig, rasterize
from .rig import BlendRig, rig_forward, rig_jacobian

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "epoch", "mse_term", "mesh_term", "total")


@dataclass(frozen=True)
class LossConfig:
    lambda_mesh: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.lambda_mesh) and self.lambda_mesh >= 0):
            raise ValueError("lambda_mesh must be finite and non-negative")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    checkpoint_every: int = 0          # steps; 0 = only the final checkpoint
    max_steps: Optional[int] = None    # stop early (toy runs); None = full schedule
    freeze: tuple = DEFAULT_FROZEN

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        object.__setattr__(self, "betas", tuple(self.betas))
        object.__setattr__(self, "freeze", tuple(self.freeze))


# -- loss ---------------------------------------------------------------------

def loss_terms(p_hat, p, rig: BlendRig, cfg: LossConfig = LossConfig()) -> tuple:
    """(total, mse_term, mesh_term) as Values, averaged over the batch.

    mse = mean over controls of squared error; mesh = mean over the 3V
    coordinates of |rig(p_hat) - rig(p)|, differentiated through the rig.
    """
    p_hat = as_value(p_hat)
    dtype = p_hat.data.dtype
    target = np.asarray(p, dtype=np.float64)
    if not (np.all(np.isfinite(p_hat.data)) and np.all(np.isfinite(target))):
        raise ValueError("non-finite parameters in loss")
    if p_hat.shape != target.shape or p_hat.shape[-1] != rig.n_targets:
        raise ValueError(f"shape mismatch: prediction {p_hat.shape}, target {target.shape}, "
                         f"rig controls {rig.n_targets}")
    diff = p_hat - target.astype(dtype)
    mse = (diff * diff).mean()
    d2 = diff if diff.ndim == 2 else diff.reshape(1, -1)
    # rig(p_hat) - rig(p) = (p_hat - p) @ basis, since the rig is linear
    mesh = matmul(d2, rig.basis.astype(dtype)).abs().mean()
    total = mse + mesh * cfg.lambda_mesh
    return total, mse, mesh


def loss(p_hat, p, rig: BlendRig, cfg: LossConfig = LossConfig()) -> Value:
    return loss_terms(p_hat, p, rig, cfg)[0]


# -- optimizer ----------------------------------------------------------------

def adamw_step(params: dict, grads: dict, state: dict, cfg: TrainConfig, t: int) -> None:
    """One AdamW update in place. Decoupled decay first, then the bias-corrected Adam step.

    ``params`` maps names to Values; entries with ``requires_grad`` False are skipped.
    """
    if t < 1:
        raise ValueError("step counter starts at 1")
    b1, b2 = cfg.betas
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        m, v = state.get(name) or (np.zeros_like(p.data), np.zeros_like(p.data))
        w = p.data - cfg.lr * cfg.weight_decay * p.data
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data = (w - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.data.dtype)
        state[name] = (m.astype(p.data.dtype), v.astype(p.data.dtype))


class AdamW:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.state: dict = {}
        self.step = 0

    def update(self, model: DualBranchRegressor) -> None:
        self.step += 1
        params = model.registry()
        grads = {n: p.grad for n, p in params.items() if p.requires_grad and p.grad is not None}
        adamw_step(params, grads, self.state, self.cfg, self.step)


# -- loader arithmetic --------------------------------------------------------

def iterations_per_epoch(n: int, batch: int) -> int:
    """The final partial batch is kept."""
    if n < 1:
        raise ValueError("empty dataset")
    if batch < 1:
        raise ValueError("batch size must be >= 1")
    return -(-n // batch)


def total_steps(n: int, batch: int, epochs: int) -> int:
    return epochs * iterations_per_epoch(n, batch)


def epoch_batches(n: int, batch: int, seed: int, epoch: int) -> list:
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


# -- data ---------------------------------------------------------------------

class SampleStore:
    """Preprocessed images and labels of a dataset manifest, cached on first use."""

    def __init__(self, manifest: dict, resolution: int):
        self.manifest = manifest
        self.records = manifest["samples"]
        self.resolution = resolution
        self._cache: dict = {}

    def __len__(self):
        return len(self.records)

    def get(self, i: int) -> tuple:
        if i not in self._cache:
            d = sample_dir(self.manifest, self.records[i])
            ia = ImageRGB8.load_png(d / "appearance.png")
            inn = ImageRGB8.load_png(d / "normal.png")
            if ia.width != self.resolution or ia.height != self.resolution:
                raise ValueError(f"sample {self.records[i]['id']} is {ia.width}x{ia.height}, "
                                 f"model expects {self.resolution}")
            params_file = d / "params.json"
            params = None
            if params_file.exists():
                params = np.array(json.loads(params_file.read_text())["values"])
            self._cache[i] = (preprocess_image(ia, self.resolution),
                              preprocess_image(inn, self.resolution), params)
        return self._cache[i]

    def batch(self, indices) -> tuple:
        items = [self.get(int(i)) for i in indices]
        return (np.stack([a for a, _, _ in items]), np.stack([b for _, b, _ in items]),
                np.stack([p for _, _, p in items]))


# -- training loop ------------------------------------------------------------

@dataclass
class TrainResult:
    rows: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    steps: int = 0


def train_step(model, optimizer: AdamW, ia, inn, target, rig, loss_cfg) -> tuple:
    model.zero_grad()
    with precision(model.dtype):
        total, mse, mesh = loss_terms(model(ia, inn), target, rig, loss_cfg)
        backward(total)
    optimizer.update(model)
    return float(total.data), float(mse.data), float(mesh.data)


def train_loop(manifest, model: DualBranchRegressor, train_cfg: TrainConfig, loss_cfg: LossConfig,
               rig: BlendRig, out_dir=None, *, resume=None,
               on_step: Optional[Callable] = None) -> TrainResult:
    """Seeded-shuffle epochs with ceil(N/batch) iterations; logs CSV and checkpoints."""
    if isinstance(manifest, (str, Path)):
        manifest = load_manifest(manifest)
    n = len(manifest["samples"])
    if n == 0:
        raise ValueError("empty dataset")
    if manifest.get("resolution", model.cfg.resolution) != model.cfg.resolution:
        raise ValueError(f"dataset resolution {manifest['resolution']} does not match model "
                         f"resolution {model.cfg.resolution}")
    store = SampleStore(manifest, model.cfg.resolution)
    ipe = iterations_per_epoch(n, train_cfg.batch_size)
    planned = total_steps(n, train_cfg.batch_size, train_cfg.epochs)
    if train_cfg.max_steps is not None:
        planned = min(planned, train_cfg.max_steps)

    optimizer = AdamW(train_cfg)
    if resume is not None:
        loaded, _ = load_checkpoint(resume, optimizer)
        for (name, p), (_, q) in zip(model.named_parameters(), loaded.named_parameters()):
            p.data = q.data
            p.requires_grad = q.requires_grad
        model.frozen = loaded.frozen
        log.info("resumed from %s at step %d", resume, optimizer.step)

    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "loss.csv"
        fresh = resume is None or not csv_path.exists()
        fh = open(csv_path, "w" if fresh else "a", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(LOSS_COLUMNS)

    result = TrainResult()
    step = optimizer.step
    try:
        while step < planned:
            epoch, offset = divmod(step, ipe)
            batches = epoch_batches(n, train_cfg.batch_size, train_cfg.seed, epoch)
            for idx in batches[offset:]:
                if step >= planned:
                    break
                ia, inn, target = store.batch(idx)
                total, mse, mesh = train_step(model, optimizer, ia, inn, target, rig, loss_cfg)
                step = optimizer.step
                row = (step, epoch, mse, mesh, total)
                result.rows.append(row)
                if writer is not None:
                    writer.writerow([step, epoch, repr(mse), repr(mesh), repr(total)])
                if on_step is not None:
                    on_step(row)
                if out is not None and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
                    result.checkpoints.append(_checkpoint(model, optimizer, out, step, epoch))
        if out is not None and (not result.checkpoints or result.checkpoints[-1].name != f"step_{step:06d}"):
            result.checkpoints.append(_checkpoint(model, optimizer, out, step, step // ipe))
    finally:
        if fh is not None:
            fh.close()
    result.steps = step
    return result


def _checkpoint(model, optimizer, out: Path, step: int, epoch: int) -> Path:
    return save_checkpoint(model, out / "checkpoints" / f"step_{step:06d}", optimizer=optimizer,
                           extra={"step": step, "epoch": epoch})


# -- evaluation ---------------------------------------------------------------

def vertex_errors(pred: TriMesh, truth: TriMesh) -> tuple:
    """(mean per-vertex L1 distance, mean per-vertex Euclidean distance)."""
    d = pred.positions - truth.positions
    return float(np.abs(d).sum(1).mean()), float(np.linalg.norm(d, axis=1).mean())


@dataclass
class EvalReport:
    samples: list
    param_mse: Optional[float]
    vertex_l1: Optional[float]
    vertex_l2: Optional[float]

    def to_dict(self) -> dict:
        return asdict(self)


def predict(model: DualBranchRegressor, ia: np.ndarray, inn: np.ndarray) -> np.ndarray:
    with precision(model.dtype):
        return np.asarray(model(ia, inn).data, dtype=np.float64)


def evaluate(model: Optional[DualBranchRegressor], manifest, rig: BlendRig, out_dir=None, *,
             predictions: Optional[dict] = None, batch: int = 16,
             render: bool = True) -> EvalReport:
    """Per-sample metrics and side-by-side renders (input appearance | reconstruction).

    ``predictions`` maps sample id to a parameter vector and bypasses the model.
    """
    if isinstance(manifest, (str, Path)):
        manifest = load_manifest(manifest)
    resolution = model.cfg.resolution if model is not None else manifest["resolution"]
    store = SampleStore(manifest, resolution)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "renders").mkdir(parents=True, exist_ok=True)
    cam = CameraConfig.fit(rig.neutral_mesh(), manifest.get("resolution", resolution))
    lights = LightRig.default()

    preds = {}
    ids = [r["id"] for r in manifest["samples"]]
    if predictions is not None:
        preds = {k: np.asarray(v, dtype=np.float64) for k, v in predictions.items()}
    else:
        for start in range(0, len(ids), batch):
            chunk = range(start, min(start + batch, len(ids)))
            items = [store.get(i) for i in chunk]
            p_hat = predict(model, np.stack([a for a, _, _ in items]),
                            np.stack([b for _, b, _ in items]))
            preds.update({ids[i]: p_hat[k] for k, i in enumerate(chunk)})

    rows = []
    for i, sid in enumerate(ids):
        _, _, truth = store.get(i)
        p_hat = preds[sid]
        recon = rig_forward(rig, p_hat)
        row = {"id": sid, "prediction": p_hat.tolist()}
        if truth is not None:
            l1, l2 = vertex_errors(recon, rig_forward(rig, truth))
            row.update(param_mse=float(np.mean((p_hat - truth) ** 2)), vertex_l1=l1, vertex_l2=l2)
        if out is not None and render:
            d = sample_dir(manifest, manifest["samples"][i])
            left = ImageRGB8.load_png(d / "appearance.png").pixels
            right = rasterize(recon, cam, lights, "appearance").pixels
            path = out / "renders" / f"{sid}.png"
            ImageRGB8(np.concatenate([left, right], axis=1)).save_png(path)
            row["render"] = str(path)
        rows.append(row)

    def agg(key):
        vals = [r[key] for r in rows if key in r]
        return float(np.mean(vals)) if vals else None

    report = EvalReport(rows, agg("param_mse"), agg("vertex_l1"), agg("vertex_l2"))
    if out is not None:
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1), encoding="utf-8")
    return report


# -- direct fit baseline ------------------------------------------------------

def direct_fit(rig: BlendRig, target: TriMesh, steps: int = 500, lr: float = 0.02,
               betas: tuple = (0.9, 0.999), eps: float = 1e-8) -> np.ndarray:
    """Adam from p = 0 on mean squared per-coordinate error against ``target``.

    Returns the best parameters seen (by objective), including the start point.
    """
    if target.n_vertices != rig.n_vertices:
        raise ValueError(f"target has {target.n_vertices} vertices, rig has {rig.n_vertices}")
    jac = rig_jacobian(rig).reshape(rig.n_targets, -1)
    residual0 = (rig.neutral - target.positions).ravel()
    scale = 2.0 / residual0.size
    p = np.zeros(rig.n_targets)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    best, best_obj = p.copy(), float(np.mean(residual0 ** 2))
    b1, b2 = betas
    for t in range(1, steps + 1):
        r = residual0 + p @ jac
        g = scale * (jac @ r)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        obj = float(np.mean((residual0 + p @ jac) ** 2))
        if obj < best_obj:
            best, best_obj = p.copy(), obj
    return best
