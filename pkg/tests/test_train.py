import csv
import json
import math

import numpy as np
import pytest

from riginv.datagen import load_manifest
from riginv.nnet.autograd import Value, backward, precision
from riginv.nnet.model import DualBranchRegressor, ModelConfig, set_frozen
from riginv.rig import random_rig, rig_forward
from riginv.train import (AdamW, LossConfig, TrainConfig, adamw_step, direct_fit,
                          epoch_batches, evaluate, iterations_per_epoch, loss, loss_terms,
                          total_steps, train_loop, vertex_errors)

CFG32 = ModelConfig(resolution=32)


@pytest.fixture(scope="module")
def tiny_rig():
    return random_rig(12, seed=3)


def subset(path, n):
    m = load_manifest(path)
    m["samples"] = m["samples"][:n]
    return m


# -- loss ---------------------------------------------------------------------

def test_loss_zero_at_truth(tiny_rig, rng):
    p = rng.uniform(size=102)
    with precision(np.float64):
        assert float(loss(p.copy(), p, tiny_rig).data) == 0.0


def test_loss_lambda_zero_is_mse(tiny_rig, rng):
    p_hat, p = rng.normal(size=102), rng.normal(size=102)
    with precision(np.float64):
        total = float(loss(p_hat, p, tiny_rig, LossConfig(0.0)).data)
    assert total == pytest.approx(np.mean((p_hat - p) ** 2), abs=1e-15)


def test_loss_matches_loop_oracle(tiny_rig, rng):
    p_hat, p = rng.normal(size=102), rng.uniform(size=102)
    lam = 0.7
    mse = sum((p_hat[i] - p[i]) ** 2 for i in range(102)) / 102
    a, b = rig_forward(tiny_rig, p_hat).positions, rig_forward(tiny_rig, p).positions
    v = tiny_rig.n_vertices
    l1 = sum(abs(a[i, c] - b[i, c]) for i in range(v) for c in range(3)) / (3 * v)
    with precision(np.float64):
        total, m, mesh = loss_terms(p_hat, p, tiny_rig, LossConfig(lam))
    assert float(m.data) == pytest.approx(mse, abs=1e-10)
    assert float(mesh.data) == pytest.approx(l1, abs=1e-10)
    assert float(total.data) == pytest.approx(mse + lam * l1, abs=1e-10)


def test_loss_gradient_through_rig(tiny_rig, rng):
    p = rng.uniform(size=102)
    with precision(np.float64):
        p_hat = Value(p + rng.normal(size=102) * 0.1, requires_grad=True)
        backward(loss(p_hat, p, tiny_rig))
    diff = p_hat.data - p
    # d/dp_hat of mean|diff @ B| = sign(diff @ B) @ B.T / (3V)
    mesh_grad = np.sign(diff @ tiny_rig.basis) @ tiny_rig.basis.T / tiny_rig.basis.shape[1]
    np.testing.assert_allclose(p_hat.grad, 2 * diff / 102 + mesh_grad, atol=1e-12)


def test_loss_subgradient_zero_at_truth(tiny_rig, rng):
    p = rng.uniform(size=102)
    with precision(np.float64):
        p_hat = Value(p.copy(), requires_grad=True)
        backward(loss(p_hat, p, tiny_rig))
    assert not p_hat.grad.any()


def test_loss_rejects_bad_inputs(tiny_rig):
    with pytest.raises(ValueError):
        loss(np.zeros(102), np.full(102, np.nan), tiny_rig)
    with pytest.raises(ValueError):
        loss(np.zeros(101), np.zeros(101), tiny_rig)
    with pytest.raises(ValueError):
        LossConfig(-1.0)


def test_loss_batched_is_batch_mean(tiny_rig, rng):
    ph, p = rng.normal(size=(4, 102)), rng.normal(size=(4, 102))
    with precision(np.float64):
        batched = loss_terms(ph, p, tiny_rig)
        single = [loss_terms(ph[i], p[i], tiny_rig) for i in range(4)]
    for k in range(3):
        assert float(batched[k].data) == pytest.approx(np.mean([float(s[k].data) for s in single]),
                                                       abs=1e-12)


# -- AdamW --------------------------------------------------------------------

def scalar_param(v):
    return Value(np.array([v], dtype=np.float64), requires_grad=True)


def test_adamw_single_step_oracle():
    cfg = TrainConfig()
    w = scalar_param(1.0)
    adamw_step({"w": w}, {"w": np.array([1.0])}, {}, cfg, 1)
    lr, wd, eps = 1e-4, 0.01, 1e-8
    expected = 1.0 - lr * wd * 1.0 - lr * 1.0 / (1.0 + eps)
    assert abs(w.data[0] - expected) <= 1e-9


def test_adamw_reference_several_steps(rng):
    cfg = TrainConfig(lr=1e-2, weight_decay=0.1)
    w = scalar_param(0.5)
    state = {}
    ref_w, m, v = 0.5, 0.0, 0.0
    for t in range(1, 6):
        g = float(rng.normal())
        adamw_step({"w": w}, {"w": np.array([g])}, state, cfg, t)
        ref_w -= cfg.lr * cfg.weight_decay * ref_w
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref_w -= cfg.lr * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + cfg.eps)
        assert w.data[0] == pytest.approx(ref_w, abs=1e-15)


def test_adamw_zero_grad_no_decay_unchanged():
    w = Value(np.array([0.3, -2.0]), requires_grad=True)
    adamw_step({"w": w}, {"w": np.zeros(2)}, {}, TrainConfig(weight_decay=0.0), 1)
    assert w.data.tolist() == [0.3, -2.0]


def test_adamw_frozen_untouched_and_checks():
    w = Value(np.array([1.0]), requires_grad=False)
    adamw_step({"w": w}, {"w": np.array([5.0])}, {}, TrainConfig(), 1)
    assert w.data[0] == 1.0
    u = scalar_param(1.0)
    with pytest.raises(ValueError):
        adamw_step({"u": u}, {"u": np.ones(2)}, {}, TrainConfig(), 1)
    with pytest.raises(ValueError):
        adamw_step({"u": u}, {"u": np.ones(1)}, {}, TrainConfig(), 0)


def test_adamw_deterministic(rng):
    grads = rng.normal(size=(4, 3))
    out = []
    for _ in range(2):
        w = Value(np.ones(3), requires_grad=True)
        state = {}
        for t, g in enumerate(grads, 1):
            adamw_step({"w": w}, {"w": g}, state, TrainConfig(), t)
        out.append(w.data.tobytes())
    assert out[0] == out[1]


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)


# -- loader arithmetic --------------------------------------------------------

def test_full_scale_schedule():
    assert iterations_per_epoch(22575, 32) == 706
    assert total_steps(22575, 32, 200) == 141_200
    assert iterations_per_epoch(64, 32) == 2


def test_iterations_exhaustive():
    for n in range(1, 101):
        for b in range(1, 9):
            assert iterations_per_epoch(n, b) == math.ceil(n / b)
            batches = epoch_batches(n, b, seed=0, epoch=n % 3)
            assert len(batches) == math.ceil(n / b)
            assert sorted(np.concatenate(batches).tolist()) == list(range(n))


def test_epoch_shuffle_seeded():
    a = epoch_batches(50, 8, seed=1, epoch=0)
    b = epoch_batches(50, 8, seed=1, epoch=0)
    c = epoch_batches(50, 8, seed=1, epoch=1)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))
    assert len(a[-1]) == 2   # final partial batch kept


# -- training loop --------------------------------------------------------------

def test_train_loop_log_and_freeze(tmp_path, dataset32, small_rig):
    model = DualBranchRegressor(CFG32, seed=0)
    set_frozen(model)
    frozen_before = {n: p.data.copy() for n, p in model.named_parameters()
                     if not p.requires_grad}
    cfg = TrainConfig(batch_size=8, epochs=2, lr=1e-3)
    result = train_loop(subset(dataset32, 20), model, cfg, LossConfig(), small_rig, tmp_path)
    assert result.steps == 6    # 2 epochs x ceil(20 / 8)
    rows = list(csv.reader(open(tmp_path / "loss.csv")))
    assert rows[0] == ["step", "epoch", "mse_term", "mesh_term", "total"]
    assert [r[1] for r in rows[1:]] == ["0"] * 3 + ["1"] * 3
    for r in rows[1:]:
        assert float(r[4]) == pytest.approx(float(r[2]) + float(r[3]), rel=1e-6)
    for n, p in model.named_parameters():
        if n in frozen_before:
            assert p.data.tobytes() == frozen_before[n].tobytes()
    assert (tmp_path / "checkpoints" / "step_000006" / "manifest.json").exists()


def test_freeze_everything_constant_loss(dataset32, small_rig):
    model = DualBranchRegressor(CFG32, seed=0)
    set_frozen(model, ["patch_embed", "stage1", "stage2", "stage3", "stage4", "head"])
    m = subset(dataset32, 8)
    result = train_loop(m, model, TrainConfig(batch_size=8, epochs=3), LossConfig(), small_rig)
    totals = [r[4] for r in result.rows]
    assert len(set(totals)) == 1


def test_resume_matches_uninterrupted(tmp_path, dataset32, small_rig):
    m = subset(dataset32, 24)
    cfg = TrainConfig(batch_size=8, epochs=2, lr=1e-3, checkpoint_every=4)
    full = DualBranchRegressor(CFG32, seed=0)
    set_frozen(full)
    ref = train_loop(m, full, cfg, LossConfig(), small_rig, tmp_path / "a")
    again = DualBranchRegressor(CFG32, seed=0)
    resumed = train_loop(m, again, cfg, LossConfig(), small_rig, tmp_path / "b",
                         resume=tmp_path / "a" / "checkpoints" / "step_000004")
    assert [r[0] for r in resumed.rows] == [5, 6]
    for a, b in zip(ref.rows[4:], resumed.rows):
        assert abs(a[4] - b[4]) <= 1e-6
    for (_, p), (_, q) in zip(full.named_parameters(), again.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes()


def test_train_loop_rejections(dataset32, small_rig):
    model = DualBranchRegressor(CFG32, seed=0)
    with pytest.raises(ValueError):
        train_loop(subset(dataset32, 0), model, TrainConfig(), LossConfig(), small_rig)
    wrong = DualBranchRegressor(ModelConfig(resolution=64), seed=0)
    with pytest.raises(ValueError):
        train_loop(subset(dataset32, 4), wrong, TrainConfig(), LossConfig(), small_rig)


# -- evaluation -----------------------------------------------------------------

def test_vertex_errors_loop_oracle(tiny_rig, rng):
    a = rig_forward(tiny_rig, rng.normal(size=102))
    b = rig_forward(tiny_rig, rng.normal(size=102))
    v = tiny_rig.n_vertices
    l1 = sum(sum(abs(a.positions[i, c] - b.positions[i, c]) for c in range(3))
             for i in range(v)) / v
    l2 = sum(math.dist(a.positions[i], b.positions[i]) for i in range(v)) / v
    got = vertex_errors(a, b)
    assert got[0] == pytest.approx(l1, abs=1e-10) and got[1] == pytest.approx(l2, abs=1e-10)


def test_evaluate_with_truth_is_zero(tmp_path, dataset32, small_rig):
    m = subset(dataset32, 5)
    truth = {r["id"]: json.loads((dataset32 / r["id"] / "params.json").read_text())["values"]
             for r in m["samples"]}
    report = evaluate(None, m, small_rig, tmp_path, predictions=truth)
    assert len(report.samples) == 5
    assert report.param_mse == 0 and report.vertex_l1 == 0 and report.vertex_l2 == 0
    assert (tmp_path / "report.json").exists()
    side = tmp_path / "renders" / f"{m['samples'][0]['id']}.png"
    from riginv.render import ImageRGB8
    assert ImageRGB8.load_png(side).width == 64


def test_evaluate_aggregates_are_means(dataset32, small_rig):
    m = subset(dataset32, 6)
    model = DualBranchRegressor(CFG32, seed=0)
    report = evaluate(model, m, small_rig, render=False)
    for key in ("param_mse", "vertex_l1", "vertex_l2"):
        assert getattr(report, key) == pytest.approx(np.mean([s[key] for s in report.samples]),
                                                     abs=1e-9)


def test_evaluate_without_truth(tmp_path, dataset32, small_rig):
    import shutil
    root = tmp_path / "copy"
    shutil.copytree(dataset32, root)
    for f in root.glob("*/params.json"):
        f.unlink()
    m = subset(root, 3)
    report = evaluate(DualBranchRegressor(CFG32, seed=0), m, small_rig, tmp_path / "out")
    assert report.param_mse is None
    assert len(list((tmp_path / "out" / "renders").glob("*.png"))) == 3


# -- direct fit -----------------------------------------------------------------

def test_direct_fit_neutral_and_zero_steps(rand_rig):
    p = direct_fit(rand_rig, rand_rig.neutral_mesh())
    assert np.abs(p).max() <= 1e-3
    target = rig_forward(rand_rig, np.full(102, 0.5))
    assert not direct_fit(rand_rig, target, steps=0).any()


def test_direct_fit_vertex_mismatch(rand_rig, tiny_rig):
    with pytest.raises(ValueError):
        direct_fit(rand_rig, tiny_rig.neutral_mesh())


def test_direct_fit_demo_rig():
    from riginv.rig import demo_rig
    rig = demo_rig()
    p = np.random.default_rng(0).uniform(size=102)
    got = direct_fit(rig, rig_forward(rig, p), steps=500, lr=0.05)
    assert np.abs(got - p).max() <= 1e-3


def test_optimizer_class_step_counter(dataset32, small_rig):
    model = DualBranchRegressor(CFG32, seed=0)
    set_frozen(model)
    opt = AdamW(TrainConfig())
    opt.update(model)
    assert opt.step == 1
