"""Central-difference gradient checks for primitives and whole networks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Value, backward, precision, trace_pooling
from .model import DualBranchRegressor, ModelConfig, set_frozen


def relative_error(analytic, numeric, floor: float = 0.0) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    with np.errstate(invalid="ignore", divide="ignore"):
        err = np.where(denom > 0, np.abs(a - n) / denom, 0.0)
    return err


def numeric_grad(f, arr: np.ndarray, h: float = 1e-6, stencil: int = 2) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place).

    ``stencil=2`` is the classic (f(x+h) - f(x-h)) / 2h; ``stencil=4`` uses the
    fourth-order five-point formula, which tolerates a larger ``h``.
    """
    if stencil not in (2, 4):
        raise ValueError("stencil must be 2 or 4")
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)

    def at(i, x):
        flat[i] = x
        return float(f())

    for i in range(flat.size):
        old = flat[i]
        if stencil == 2:
            d = (at(i, old + h) - at(i, old - h)) / (2 * h)
        else:
            d = (8 * (at(i, old + h) - at(i, old - h))
                 - (at(i, old + 2 * h) - at(i, old - 2 * h))) / (12 * h)
        flat[i] = old
        grad.reshape(-1)[i] = d
    return grad


def check_primitive(fn, shapes, seed: int = 0, h: float = 1e-4, floor: float = 1e-8) -> float:
    """Max relative error of ``fn(*values)`` gradients, projected onto a random direction.

    Uses the five-point stencil so round-off stays well below the 1e-7 target.
    """
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        inputs = [Value(rng.normal(size=s), requires_grad=True) for s in shapes]
        out_shape = fn(*inputs).shape
        proj = rng.normal(size=out_shape)

        def scalar():
            return float(np.sum(fn(*inputs).data * proj))

        out = fn(*inputs)
        loss = (out * proj).sum()
        backward(loss)
        worst = 0.0
        for v in inputs:
            num = numeric_grad(scalar, v.data, h, stencil=4)
            worst = max(worst, float(relative_error(v.grad, num, floor).max()))
    return worst


@dataclass
class GradcheckReport:
    n_checked: int
    max_rel_error: float
    max_abs_error: float
    worst: str

    def ok(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def smooth_central_difference(f, flat: np.ndarray, idx: int, h: float,
                              max_shrink: int = 4) -> tuple:
    """Central difference of ``f()`` in ``flat[idx]`` that avoids max-pool kinks.

    If either probe changes any pooling argmax relative to the unperturbed
    point, the interval straddles a non-differentiable point; the step is
    shrunk tenfold and retried. Returns (derivative, step used).
    """
    old = flat[idx]
    with trace_pooling() as base:
        f()
    step = h * max(1.0, abs(float(old)))
    for _ in range(max_shrink + 1):
        flat[idx] = old + step
        with trace_pooling() as plus:
            fp = float(f())
        flat[idx] = old - step
        with trace_pooling() as minus:
            fm = float(f())
        flat[idx] = old
        if _same_pattern(base, plus) and _same_pattern(base, minus):
            break
        step /= 10
    return (fp - fm) / (2 * step), step


def gradcheck_model(cfg: ModelConfig = ModelConfig(), n_weights: int = 100, seed: int = 0,
                    double: bool = True, batch: int = 2, h: float = 1e-5,
                    floor: float = 1e-6) -> GradcheckReport:
    """Compare backward against central differences for sampled weights of the full model.

    The zero-initialized final head layer is replaced by small random values so
    gradients reach every group. Scalar objective: mean of all outputs. With
    ``double=False`` the analytic gradients come from a float32 tape and the
    finite differences from a float64 copy of the same weights.
    """
    rng = np.random.default_rng(seed)
    model = DualBranchRegressor(cfg, seed=seed)
    model.head.fc2.weight.data = rng.normal(0.0, 0.02, model.head.fc2.weight.shape)
    set_frozen(model, ())
    shape = (batch, cfg.in_chans, cfg.resolution, cfg.resolution)
    ia = rng.normal(size=shape)
    inn = rng.normal(size=shape)

    tape_dtype = np.float64 if double else np.float32
    model.astype(tape_dtype)
    with precision(tape_dtype):
        backward(model(ia, inn).mean())
    grads = {n: p.grad.astype(np.float64) for n, p in model.named_parameters()}
    model.astype(np.float64)

    names = list(grads)
    registry = model.registry()
    worst = (0.0, 0.0, "")
    with precision(np.float64):
        for _ in range(n_weights):
            name = names[rng.integers(len(names))]
            p = registry[name]
            idx = int(rng.integers(p.data.size))
            num, _ = smooth_central_difference(lambda: model(ia, inn).mean().data,
                                               p.data.reshape(-1), idx, h)
            ana = float(grads[name].reshape(-1)[idx])
            rel = float(relative_error(ana, num, floor))
            if rel >= worst[0]:
                worst = (rel, abs(ana - num), f"{name}[{idx}] analytic={ana:.6e} numeric={num:.6e}")
    return GradcheckReport(n_weights, worst[0], worst[1], worst[2])
