"""Toy-scale hierarchical (Hiera-style) encoders and the dual-branch regressor."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Optional

import numpy as np

from .autograd import Value, concat, gelu, layer_norm, matmul, max_pool_grid, softmax

OUTPUT_DIM = 102
DEFAULT_FROZEN = ("patch_embed", "stage1", "stage2", "stage3")
BRANCHES = ("branch_a", "branch_n")


class Parameter(Value):
    __slots__ = ()

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True, name=name)


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 64
    in_chans: int = 3
    patch: int = 4
    dims: tuple = (32, 64, 128, 256)
    depths: tuple = (1, 1, 2, 1)
    heads: tuple = (1, 2, 4, 8)
    pool: int = 2
    mlp_ratio: int = 4
    head_hidden: int = 256
    out_dim: int = OUTPUT_DIM
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("dims", "depths", "heads"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not len(self.dims) == len(self.depths) == len(self.heads) == 4:
            raise ValueError("dims, depths and heads need exactly four stages")
        unit = self.patch * self.pool ** 3
        if self.resolution % unit:
            raise ValueError(f"resolution {self.resolution} not divisible by patch*pool^3 = {unit}")
        for d, h in zip(self.dims, self.heads):
            if d % h:
                raise ValueError(f"stage dim {d} not divisible by {h} heads")
        if self.out_dim != OUTPUT_DIM:
            raise ValueError(f"output dim must be {OUTPUT_DIM}")

    @property
    def grid(self) -> int:
        return self.resolution // self.patch

    @property
    def feature_dim(self) -> int:
        return self.dims[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2
    return (x * std).astype(np.float32)


class Module:
    """Parameter container; parameters are discovered by attribute walk."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, std: float = 0.02, zero: bool = False):
        w = np.zeros((d_in, d_out), np.float32) if zero else _trunc_normal(rng, (d_in, d_out), std)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, np.float32))

    def __call__(self, x: Value) -> Value:
        return matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.weight = Parameter(np.ones(dim, np.float32))
        self.bias = Parameter(np.zeros(dim, np.float32))

    def __call__(self, x: Value) -> Value:
        return layer_norm(x, self.weight, self.bias)


class Attention(Module):
    """Global multi-head self-attention over all tokens."""

    def __init__(self, rng, dim: int, heads: int, std: float):
        self.heads = heads
        self.q = Linear(rng, dim, dim, std)
        self.k = Linear(rng, dim, dim, std)
        self.v = Linear(rng, dim, dim, std)
        self.proj = Linear(rng, dim, dim, std)
        self.last_attention: Optional[np.ndarray] = None

    def _split(self, x: Value) -> Value:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Value) -> Value:
        b, n, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d // self.heads))
        attn = softmax(scores, axis=-1)
        self.last_attention = attn.data
        out = matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.proj(out)


class Block(Module):
    def __init__(self, rng, dim: int, heads: int, mlp_ratio: int, std: float):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(rng, dim, heads, std)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, dim * mlp_ratio, std)
        self.fc2 = Linear(rng, dim * mlp_ratio, dim, std)

    def __call__(self, x: Value) -> Value:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(gelu(self.fc1(self.norm2(x))))


class PatchEmbed(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.patch = cfg.patch
        self.grid = cfg.grid
        self.proj = Linear(rng, cfg.in_chans * cfg.patch ** 2, cfg.dims[0], cfg.init_std)
        self.pos = Parameter(_trunc_normal(rng, (cfg.grid * cfg.grid, cfg.dims[0]), cfg.init_std))

    def __call__(self, images) -> Value:
        x = images if isinstance(images, Value) else Value(images)
        b, c, h, w = x.shape
        p = self.patch
        if h % p or w % p:
            raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
        patches = (x.reshape(b, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
                   .reshape(b, (h // p) * (w // p), c * p * p))
        return self.proj(patches) + self.pos


class Stage(Module):
    """Optional 2x2 pooling with a dim-changing projection, then transformer blocks."""

    def __init__(self, rng, d_in: int, d_out: int, depth: int, heads: int, pool: int,
                 mlp_ratio: int, std: float):
        self.pool = pool
        self.d_in = d_in
        self.reduce = Linear(rng, d_in, d_out, std) if pool > 1 else None
        self.blocks = [Block(rng, d_out, heads, mlp_ratio, std) for _ in range(depth)]

    def __call__(self, x: Value, hw: tuple):
        h, w = hw
        if x.ndim != 3 or x.shape[1] != h * w or x.shape[2] != self.d_in:
            raise ValueError(f"stage expects (B, {h * w}, {self.d_in}) tokens, got {x.shape}")
        if self.pool > 1:
            x = max_pool_grid(self.reduce(x), h, w, self.pool)
            h, w = h // self.pool, w // self.pool
        for blk in self.blocks:
            x = blk(x)
        return x, (h, w)


class Encoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.cfg = cfg
        self.patch_embed = PatchEmbed(rng, cfg)
        d = cfg.dims
        s = cfg.init_std
        self.stage1 = Stage(rng, d[0], d[0], cfg.depths[0], cfg.heads[0], 1, cfg.mlp_ratio, s)
        self.stage2 = Stage(rng, d[0], d[1], cfg.depths[1], cfg.heads[1], cfg.pool, cfg.mlp_ratio, s)
        self.stage3 = Stage(rng, d[1], d[2], cfg.depths[2], cfg.heads[2], cfg.pool, cfg.mlp_ratio, s)
        self.stage4 = Stage(rng, d[2], d[3], cfg.depths[3], cfg.heads[3], cfg.pool, cfg.mlp_ratio, s)

    def tokens(self, images) -> tuple:
        x = self.patch_embed(images)
        hw = (self.cfg.grid, self.cfg.grid)
        for stage in (self.stage1, self.stage2, self.stage3, self.stage4):
            x, hw = stage(x, hw)
        return x, hw

    def __call__(self, images) -> Value:
        """Global average pool of the final-stage tokens: (B, feature_dim)."""
        x, _ = self.tokens(images)
        return x.mean(axis=1)


class Head(Module):
    def __init__(self, rng, d_in: int, hidden: int, d_out: int, std: float):
        self.fc1 = Linear(rng, d_in, hidden, std)
        self.fc2 = Linear(rng, hidden, d_out, zero=True)

    def __call__(self, x: Value) -> Value:
        return self.fc2(gelu(self.fc1(x)))


def _check_images(images, cfg: ModelConfig) -> np.ndarray:
    arr = images.data if isinstance(images, Value) else np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1:] != (cfg.in_chans, cfg.resolution, cfg.resolution):
        raise ValueError(f"expected images of shape (B, {cfg.in_chans}, {cfg.resolution}, "
                         f"{cfg.resolution}), got {arr.shape}")
    return arr


class DualBranchRegressor(Module):
    """f(I_a, I_n) -> 102 raw rig parameters. Argument order is appearance, then normal map."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.branch_a = Encoder(rng, cfg)
        self.branch_n = Encoder(rng, cfg)
        self.head = Head(rng, 2 * cfg.feature_dim, cfg.head_hidden, cfg.out_dim, cfg.init_std)
        self.frozen: frozenset = frozenset()

    def features(self, appearance, normal) -> Value:
        fa = self.branch_a(self._input(appearance))
        fn = self.branch_n(self._input(normal))
        return concat([fa, fn], axis=-1)

    def _input(self, images):
        arr = _check_images(images, self.cfg)
        return Value(arr.astype(self.dtype, copy=False))

    @property
    def dtype(self):
        return self.head.fc2.weight.data.dtype

    def __call__(self, appearance, normal) -> Value:
        return self.head(self.features(appearance, normal))

    # -- parameter registry --------------------------------------------------

    def registry(self) -> dict:
        return dict(self.named_parameters())

    def group_of(self, name: str) -> str:
        parts = name.split(".")
        return "head" if parts[0] == "head" else ".".join(parts[:2])

    def groups(self) -> list:
        seen = []
        for name in self.registry():
            g = self.group_of(name)
            if g not in seen:
                seen.append(g)
        return seen

    def resolve_groups(self, groups: Iterable[str]) -> set:
        """Expand short names ("stage1") to both branches; validate the rest."""
        known = set(self.groups())
        out = set()
        for g in groups:
            if g in known:
                out.add(g)
            elif all(f"{b}.{g}" in known for b in BRANCHES):
                out.update(f"{b}.{g}" for b in BRANCHES)
            else:
                raise ValueError(f"unknown parameter group {g!r}")
        return out

    def trainable(self) -> dict:
        return {n: p for n, p in self.named_parameters() if p.requires_grad}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "DualBranchRegressor":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def set_frozen(model: DualBranchRegressor, groups: Iterable[str] = DEFAULT_FROZEN) -> set:
    """Freeze exactly ``groups`` (short names apply to both branches); unfreeze the rest."""
    resolved = model.resolve_groups(groups)
    for name, p in model.named_parameters():
        p.requires_grad = model.group_of(name) not in resolved
        if not p.requires_grad:
            p.grad = None
    model.frozen = frozenset(resolved)
    return resolved
