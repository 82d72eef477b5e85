import numpy as np
import pytest

from riginv.nnet.autograd import Value, backward, precision
from riginv.nnet.checkpoint import load_checkpoint, read_manifest, save_checkpoint
from riginv.nnet.gradcheck import gradcheck_model
from riginv.nnet.model import (DEFAULT_FROZEN, DualBranchRegressor, ModelConfig, Stage,
                               set_frozen)

CFG32 = ModelConfig(resolution=32)


@pytest.fixture(scope="module")
def model():
    return DualBranchRegressor(ModelConfig(), seed=0)


def images(rng, b=2, res=64):
    return rng.normal(size=(b, 3, res, res)).astype(np.float32)


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(resolution=48)          # not divisible by 4 * 2**3
    with pytest.raises(ValueError):
        ModelConfig(dims=(32, 64, 128, 250))
    with pytest.raises(ValueError):
        ModelConfig(out_dim=100)
    with pytest.raises(ValueError):
        ModelConfig(depths=(1, 1, 1))
    big = ModelConfig(resolution=512)       # full-size geometry stays expressible
    assert big.grid == 128


def test_patch_embed_grid(model, rng):
    tokens = model.branch_a.patch_embed(images(rng, 1))
    assert tokens.shape == (1, 16 * 16, 32)


def test_patch_embed_zero_image_gives_pos(model):
    tokens = model.branch_a.patch_embed(np.zeros((1, 3, 64, 64), np.float32))
    np.testing.assert_array_equal(tokens.data[0], model.branch_a.patch_embed.pos.data)


def test_patch_embed_matches_patch_loop(model, rng):
    x = images(rng, 1)
    pe = model.branch_a.patch_embed
    tokens = pe(x).data[0]
    w, b = pe.proj.weight.data, pe.proj.bias.data
    for r in (0, 5, 15):
        for c in (0, 7, 15):
            patch = x[0, :, 4 * r:4 * r + 4, 4 * c:4 * c + 4].reshape(-1)
            ref = patch @ w + b + pe.pos.data[r * 16 + c]
            np.testing.assert_allclose(tokens[r * 16 + c], ref, atol=1e-6)


def test_patch_embed_divisibility(model):
    with pytest.raises(ValueError):
        model.branch_a.patch_embed(np.zeros((1, 3, 30, 30), np.float32))


def test_stage_identity_and_shapes(rng):
    gen = np.random.default_rng(0)
    x = Value(rng.normal(size=(2, 256, 32)).astype(np.float32))
    ident = Stage(gen, 32, 32, depth=0, heads=1, pool=1, mlp_ratio=4, std=0.02)
    out, hw = ident(x, (16, 16))
    assert out is x and hw == (16, 16)
    pooled = Stage(gen, 32, 64, depth=1, heads=2, pool=2, mlp_ratio=4, std=0.02)
    out, hw = pooled(x, (16, 16))
    assert out.shape == (2, 64, 64) and hw == (8, 8)
    attn = pooled.blocks[0].attn.last_attention
    np.testing.assert_allclose(attn.sum(-1), 1.0, atol=1e-6)


def test_stage_shape_mismatch(rng):
    stage = Stage(np.random.default_rng(0), 32, 64, 1, 2, 2, 4, 0.02)
    with pytest.raises(ValueError):
        stage(Value(rng.normal(size=(1, 60, 32)).astype(np.float32)), (5, 12))
    with pytest.raises(ValueError):
        stage(Value(rng.normal(size=(1, 64, 32)).astype(np.float32)), (6, 10))
    with pytest.raises(ValueError):
        stage(Value(rng.normal(size=(1, 64, 16)).astype(np.float32)), (8, 8))


def test_branch_feature_and_explicit_pool(model, rng):
    x = images(rng)
    feat = model.branch_a(x).data
    assert feat.shape == (2, 256)
    tokens, hw = model.branch_a.tokens(x)
    assert hw == (2, 2)
    t = tokens.data.astype(np.float64)
    explicit = np.array([[sum(t[b, i, d] for i in range(4)) / 4 for d in range(256)]
                         for b in range(2)])
    np.testing.assert_allclose(feat, explicit, atol=1e-6)
    # scaling one token's value moves the mean by exactly its share
    t2 = t.copy()
    t2[:, 1] *= 2
    np.testing.assert_allclose(t2.mean(1) - t.mean(1), t[:, 1] / 4, atol=1e-12)


def test_batch_independence(model, rng):
    a, n = images(rng, 3), images(rng, 3)
    out = model(a, n).data
    perm = [2, 0, 1]
    feat = model.features(a, n).data
    np.testing.assert_allclose(model.features(a[perm], n[perm]).data, feat[perm], atol=1e-6)
    np.testing.assert_allclose(model(a[perm], n[perm]).data, out[perm], atol=1e-6)


def test_output_is_head_bias_at_init(rng):
    m = DualBranchRegressor(CFG32, seed=1)
    m.head.fc2.bias.data = rng.normal(size=102).astype(np.float32)
    out = m(images(rng, 3, 32), images(rng, 3, 32)).data
    assert out.shape == (3, 102)
    np.testing.assert_array_equal(out, np.broadcast_to(m.head.fc2.bias.data, (3, 102)))


def test_single_image_and_resolution_checks(rng):
    m = DualBranchRegressor(CFG32, seed=1)
    x = rng.normal(size=(3, 32, 32)).astype(np.float32)
    assert m(x, x).shape == (1, 102)
    with pytest.raises(ValueError):
        m(images(rng, 1, 64), images(rng, 1, 64))


def test_branches_are_independent(rng):
    m = DualBranchRegressor(CFG32, seed=2)
    a, n = images(rng, 2, 32), images(rng, 2, 32)
    assert not np.array_equal(m.branch_a.patch_embed.proj.weight.data,
                              m.branch_n.patch_embed.proj.weight.data)
    before = m.branch_n(n).data.copy()
    for p in m.branch_a.parameters():
        p.data = p.data + 0.1
    assert np.array_equal(m.branch_n(n).data, before)
    f = m.features(a, n)
    assert f.shape == (2, 512)


def test_seeded_init_deterministic():
    a, b = DualBranchRegressor(CFG32, seed=9), DualBranchRegressor(CFG32, seed=9)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()


def test_default_freeze_groups_and_counts():
    m = DualBranchRegressor(CFG32, seed=0)
    frozen = set_frozen(m)
    assert frozen == {f"{b}.{g}" for b in ("branch_a", "branch_n") for g in DEFAULT_FROZEN}
    explicit = 0
    for name, p in m.named_parameters():
        top = name.split(".")
        if top[0] == "head" or top[1] == "stage4":
            explicit += p.data.size
    assert sum(p.data.size for p in m.trainable().values()) == explicit


def test_unknown_group_rejected():
    m = DualBranchRegressor(CFG32, seed=0)
    with pytest.raises(ValueError):
        set_frozen(m, ["stage9"])


def test_frozen_params_get_no_grad(rng):
    m = DualBranchRegressor(CFG32, seed=0)
    set_frozen(m)
    m.head.fc2.weight.data = rng.normal(0, 0.02, m.head.fc2.weight.shape).astype(np.float32)
    backward(m(images(rng, 2, 32), images(rng, 2, 32)).mean())
    for name, p in m.named_parameters():
        assert (p.grad is None) == (m.group_of(name) in m.frozen), name


def test_model_gradcheck_single_precision():
    report = gradcheck_model(CFG32, n_weights=30, seed=1, double=False)
    assert report.ok(1e-3), report.worst


def test_model_gradcheck_double_small():
    report = gradcheck_model(CFG32, n_weights=30, seed=2, double=True)
    assert report.ok(1e-5), report.worst


def test_double_precision_tape():
    m = DualBranchRegressor(CFG32, seed=0).astype(np.float64)
    rng = np.random.default_rng(0)
    with precision(np.float64):
        out = m(rng.normal(size=(1, 3, 32, 32)), rng.normal(size=(1, 3, 32, 32)))
    assert out.data.dtype == np.float64


def test_checkpoint_byte_roundtrip(tmp_path, rng):
    m = DualBranchRegressor(CFG32, seed=4)
    set_frozen(m, ["stage1"])
    for p in m.parameters():
        p.data = p.data + rng.normal(size=p.shape).astype(np.float32)
    save_checkpoint(m, tmp_path / "a", extra={"note": 1})
    back, manifest = load_checkpoint(tmp_path / "a")
    assert manifest["extra"] == {"note": 1}
    assert back.frozen == m.frozen and back.cfg == m.cfg
    for (n1, p1), (n2, p2) in zip(m.named_parameters(), back.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
        assert p1.requires_grad == p2.requires_grad
    save_checkpoint(back, tmp_path / "b", extra={"note": 1})
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
    entry = read_manifest(tmp_path / "a")["parameters"][0]
    raw = (tmp_path / "a" / entry["file"]).read_bytes()
    first = m.registry()[entry["name"]].data
    assert raw == first.astype("<f4").tobytes()
