import numpy as np
import pytest

from sesa import tensor as T
from sesa.backbone import make_schedule, training_loss
from sesa.control import (
    ConditionEncoder, ConditionImage, ControlledDenoiser, ControlNet, encode_condition, freeze_backbone, inject,
)
from sesa.errors import LevelMismatch, ShapeMismatch
from sesa.fusion import FusionConfig
from sesa.harness.optim import AdamW
from sesa.nn import Conv2d, ModuleList
from sesa.tensor import Tensor

from oracles import central_difference, rel_err


@pytest.fixture(scope="module")
def cd():
    return ControlledDenoiser(seed=7)


def silhouette(seed, extent=64):
    r = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:extent, 0:extent]
    cx, cy, rad = r.uniform(20, 44), r.uniform(20, 44), r.uniform(6, 12)
    return (((xx - cx) ** 2 + (yy - cy) ** 2) < rad ** 2).astype(float)[None]


# ---------------------------------------------------------------- condition image

def test_condition_image_clamps_and_roundtrips(tmp_path):
    c = ConditionImage(np.array([[-0.5, 0.25], [1.0, 3.0]]))
    assert c.pixels.shape == (1, 2, 2)
    assert c.pixels.min() == 0.0 and c.pixels.max() == 1.0
    c.save(tmp_path / "c.pgm")
    back = ConditionImage.load(tmp_path / "c.pgm")
    assert np.abs(back.pixels - c.pixels).max() <= 0.5 / 255
    with pytest.raises(ValueError):
        ConditionImage(np.zeros((2, 2)), kind="depth")


def test_fresh_condition_encoder_outputs_zero(cd):
    for seed in range(3):
        c_f = encode_condition(cd.control.cond, silhouette(seed))
        assert c_f.shape == cd.config.latent_shape
        assert not c_f.data.any()


def test_condition_encoder_shape_errors(cd):
    with pytest.raises(ShapeMismatch):
        cd.control.cond(np.zeros((1, 32, 32)))
    rgb = np.repeat(silhouette(0), 3, axis=0)
    assert cd.control.cond(rgb).shape == (3, 16, 16)


def test_condition_encoder_non_degenerate_after_training_steps():
    model = ControlledDenoiser(seed=2)
    sched = make_schedule(1000)
    c_t = model.backbone.embed("a hand holding a cup")
    z0 = Tensor(np.random.default_rng(0).uniform(-1, 1, (3, 16, 16)))
    params = model.trainable_parameters()
    opt = AdamW(params, lr=1e-3)
    batch = [(z0, c_t, silhouette(0)), (z0, c_t, silhouette(1))]
    # step 1 can only move the output zero convs: everything upstream of
    # them, the condition encoder included, sees an exactly zero gradient
    for step in range(2):
        opt.zero_grad()
        T.backward(training_loss(batch, sched, model, np.random.default_rng(step)), params)
        if step == 0:
            assert not model.control.cond.zero.w.grad.any()
        opt.step()
    a = encode_condition(model.control.cond, silhouette(2)).data
    b = encode_condition(model.control.cond, silhouette(3)).data
    assert a.any() and not np.array_equal(a, b)


# ---------------------------------------------------------------- control forward

def test_control_records_row_stochastic_maps(cd):
    rng = np.random.default_rng(0)
    c_t = cd.backbone.embed("a person holding a cup with one hand")
    out = cd.control(Tensor(rng.standard_normal((3, 16, 16))), 100, c_t, Tensor(rng.standard_normal((3, 16, 16))))
    assert sorted(out.self_maps) == sorted(cd.config.resolutions)
    for r, m in out.self_maps.items():
        assert m.shape == (r * r, r * r)
        assert np.abs(m.data.sum(axis=1) - 1).max() < 1e-6
    assert len(out.cross_maps) == cd.config.levels
    assert [f.shape[1] for f in out.features] == list(cd.config.resolutions)


def test_control_with_zero_condition_equals_latent_alone(cd):
    rng = np.random.default_rng(1)
    z = Tensor(rng.standard_normal((3, 16, 16)))
    c_t = cd.backbone.embed("a hand")
    a = cd.control(z, 50, c_t, Tensor(np.zeros((3, 16, 16))))
    # the encoder copy run directly on z_t
    feats, _ = cd.control.encoder(z, 50, c_t.embeddings)
    for x, y in zip(a.features, feats):
        assert np.array_equal(x.data, y.data)


def test_control_shape_checks(cd):
    c_t = cd.backbone.embed("a hand")
    with pytest.raises(ShapeMismatch):
        cd.control(Tensor(np.zeros((3, 16, 16))), 5, c_t, Tensor(np.zeros((3, 8, 8))))


# ---------------------------------------------------------------- inject

def test_inject_zero_identity_and_identity_kernel():
    rng = np.random.default_rng(2)
    f_c = [Tensor(rng.standard_normal((4, 2, 2))), Tensor(rng.standard_normal((6, 1, 1)))]
    f = [Tensor(rng.standard_normal((4, 2, 2))), Tensor(rng.standard_normal((6, 1, 1)))]
    zeros = ModuleList(Conv2d(c, c, 1, rng, zero=True) for c in (4, 6))
    assert all(np.array_equal(a.data, b.data) for a, b in zip(inject(f_c, f, zeros), f))
    ident = ModuleList(Conv2d(c, c, 1, rng, zero=True) for c in (4, 6))
    for conv, c in zip(ident, (4, 6)):
        conv.w.data = np.eye(c)[:, :, None, None]
    for out, a, b in zip(inject(f_c, f, ident), f_c, f):
        assert np.allclose(out.data, a.data + b.data, atol=1e-15)


def test_inject_level_errors():
    rng = np.random.default_rng(3)
    z = ModuleList([Conv2d(2, 2, 1, rng, zero=True)])
    with pytest.raises(LevelMismatch):
        inject([Tensor(np.zeros((2, 2, 2)))] * 2, [Tensor(np.zeros((2, 2, 2)))], z)
    with pytest.raises(LevelMismatch):
        inject([Tensor(np.zeros((2, 2, 2)))], [Tensor(np.zeros((2, 4, 4)))], z)


def test_zero_conv_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    conv = Conv2d(3, 3, 1, rng, zero=True)
    conv.w.data = rng.uniform(-1, 1, conv.w.shape)
    f_c, f = rng.uniform(-1, 1, (3, 2, 2)), rng.uniform(-1, 1, (3, 2, 2))
    weights = rng.uniform(-1, 1, (3, 2, 2))

    def loss():
        out = inject([Tensor(f_c)], [Tensor(f)], ModuleList([conv]))[0]
        return T.sum(T.mul(T.square(out), Tensor(weights)))

    conv.zero_grad()
    T.backward(loss())
    for p in (conv.w, conv.b):
        numeric = central_difference(lambda: loss().item(), p.data)
        assert rel_err(p.grad, numeric) < 1e-6


# ---------------------------------------------------------------- freezing

def test_copy_initialization_and_freezing():
    model = ControlledDenoiser(seed=5)
    enc_b = dict(model.backbone.encoder.named_parameters())
    enc_c = dict(model.control.encoder.named_parameters())
    assert enc_b.keys() == enc_c.keys()
    for k in enc_b:
        assert np.array_equal(enc_b[k].data, enc_c[k].data)
        assert enc_b[k] is not enc_c[k]
        assert not enc_b[k].requires_grad and enc_c[k].requires_grad

    before = {k: v.copy() for k, v in model.backbone.state_dict().items()}
    ctrl_before = {k: v.copy() for k, v in model.control.state_dict().items()}
    params = model.trainable_parameters()
    opt = AdamW(params, lr=1e-3)
    c_t = model.backbone.embed("a hand holding a cup")
    batch = [(Tensor(np.random.default_rng(0).uniform(-1, 1, (3, 16, 16))), c_t, silhouette(0))]
    loss = training_loss(batch, make_schedule(1000), model, np.random.default_rng(1))
    assert loss.item() > 0
    T.backward(loss, params)
    opt.step()
    for k, v in model.backbone.state_dict().items():
        assert np.array_equal(v, before[k]), k
    assert all(p.grad is None for p in model.backbone.parameters())
    changed = [k for k, v in model.control.state_dict().items() if not np.array_equal(v, ctrl_before[k])]
    assert {"control.zero.0.w", "control.zero.1.w", "control.zero.2.w"} <= set(changed)
    assert "control.cond.zero.w" not in changed


def test_freeze_backbone_on_plain_denoiser():
    from sesa.backbone import Denoiser

    d = Denoiser(seed=1)
    freeze_backbone(d)
    assert not any(p.requires_grad for p in d.parameters())


def test_controlled_denoiser_identity_at_init(cd):
    rng = np.random.default_rng(8)
    c_t = cd.backbone.embed("a woman holding a phone with her hand")
    for fusion in (FusionConfig(), FusionConfig(enabled=False)):
        cd.fusion = fusion
        for _ in range(3):
            z = Tensor(rng.standard_normal((3, 16, 16)))
            t = int(rng.integers(1, 1001))
            assert np.array_equal(cd(z, t, c_t, silhouette(int(t))).data, cd.backbone.denoise(z, t, c_t).data)
    cd.fusion = FusionConfig()


def test_controlnet_parameter_prefix(cd):
    names = [n for n, _ in cd.control.named_parameters()]
    assert all(n.startswith("control.") for n in names)
    assert isinstance(cd.control, ControlNet)
    assert isinstance(cd.control.cond, ConditionEncoder)
