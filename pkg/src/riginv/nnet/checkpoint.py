"""Checkpoints: a JSON manifest plus one raw little-endian blob per array."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .model import DualBranchRegressor, ModelConfig

FORMAT_VERSION = 1


def _write_blob(path: Path, arr: np.ndarray) -> dict:
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    path.write_bytes(np.ascontiguousarray(le).tobytes())
    return {"shape": list(arr.shape), "dtype": le.dtype.str}


def _read_blob(path: Path, shape, dtype: str) -> np.ndarray:
    arr = np.frombuffer(path.read_bytes(), dtype=np.dtype(dtype))
    return arr.reshape(shape).astype(np.dtype(dtype).newbyteorder("="))


def save_checkpoint(model: DualBranchRegressor, directory, *, optimizer=None,
                    extra: Optional[dict] = None) -> Path:
    """``optimizer`` is an AdamW-like object exposing ``step`` and ``state`` {name: (m, v)}."""
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in model.named_parameters():
        rel = f"params/{name}.bin"
        entry = {"name": name, "file": rel, "trainable": bool(p.requires_grad)}
        entry.update(_write_blob(directory / rel, p.data))
        entries.append(entry)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "frozen": sorted(model.frozen),
        "parameters": entries,
        "extra": extra or {},
    }
    if optimizer is not None:
        (directory / "optim").mkdir(exist_ok=True)
        moments = []
        for name, (m, v) in sorted(optimizer.state.items()):
            rec = {"name": name, "m": f"optim/{name}.m.bin", "v": f"optim/{name}.v.bin"}
            meta = _write_blob(directory / rec["m"], m)
            _write_blob(directory / rec["v"], v)
            rec.update(meta)
            moments.append(rec)
        manifest["optimizer"] = {"step": optimizer.step, "moments": moments}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return directory


def read_manifest(directory) -> dict:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    return manifest


def load_checkpoint(directory, optimizer=None) -> tuple:
    """Return (model, manifest). Restores optimizer moments in place when given."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    model = DualBranchRegressor(ModelConfig.from_dict(manifest["config"]))
    registry = model.registry()
    names = {e["name"] for e in manifest["parameters"]}
    if names != set(registry):
        raise ValueError("checkpoint parameters do not match the model architecture")
    for e in manifest["parameters"]:
        p = registry[e["name"]]
        p.data = _read_blob(directory / e["file"], e["shape"], e["dtype"])
        p.requires_grad = e["trainable"]
    model.frozen = frozenset(manifest.get("frozen", ()))
    if optimizer is not None and "optimizer" in manifest:
        opt = manifest["optimizer"]
        optimizer.step = opt["step"]
        optimizer.state = {
            rec["name"]: (_read_blob(directory / rec["m"], rec["shape"], rec["dtype"]),
                          _read_blob(directory / rec["v"], rec["shape"], rec["dtype"]))
            for rec in opt["moments"]}
    return model, manifest
