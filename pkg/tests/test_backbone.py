import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sesa import tensor as T
from sesa.backbone import (
    Denoiser, DenoiserConfig, NoiseSchedule, TextEncoder, decode_latent, encode_image, make_schedule,
    q_sample, sample, training_loss,
)
from sesa.errors import ConfigMismatch, InvalidRange, ShapeMismatch, StepOutOfRange
from sesa.tensor import Tensor

from oracles import alpha_bar_running_product


@pytest.fixture(scope="module")
def model():
    return Denoiser(seed=3)


# ---------------------------------------------------------------- schedule

def test_single_step_schedule():
    s = make_schedule(1, 0.5, 0.5)
    assert s.T == 1 and list(s.alpha_bars) == [0.5]


@given(st.integers(1, 50), st.floats(1e-5, 0.1), st.floats(0.0, 0.5))
def test_schedule_invariants(T_, b0, extra):
    b1 = min(b0 + extra, 0.99)
    s = make_schedule(T_, b0, b1)
    assert s.alpha_bar(1) == 1 - s.betas[0]
    assert np.all((s.betas > 0) & (s.betas < 1))
    if T_ > 1 and b0 < 1:
        assert np.all(np.diff(s.alpha_bars) < 0)
    assert np.abs(np.cumprod(1 - s.betas) - s.alpha_bars).max() < 1e-12


def test_default_schedule_final_alpha_bar():
    s = make_schedule(1000, 1e-4, 0.02)
    oracle = alpha_bar_running_product(1000, 1e-4, 0.02)
    assert abs(s.alpha_bar(1000) - oracle[-1]) < 1e-15
    assert s.alpha_bar(1000) == pytest.approx(4.04e-5, rel=5e-3)
    assert np.abs(s.alpha_bars - np.array(oracle)).max() < 1e-12


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_ranges(args):
    with pytest.raises(InvalidRange):
        make_schedule(*args)


# ---------------------------------------------------------------- q_sample

def test_q_sample_zero_noise_and_scalar_case():
    s = make_schedule(1000)
    z0 = Tensor(np.full((2, 3), 1.5))
    got = q_sample(z0, 10, Tensor(np.zeros((2, 3))), s)
    assert np.array_equal(got.data, np.full((2, 3), 1.5 * math.sqrt(s.alpha_bar(10))))
    quarter = NoiseSchedule(np.array([0.75]), np.array([0.25]))
    got = q_sample(Tensor(np.ones((2, 2))), 1, Tensor(np.ones((2, 2))), quarter)
    assert np.allclose(got.data, 0.5 + math.sqrt(0.75), atol=1e-15)


def test_q_sample_limit_of_tiny_beta_is_identity():
    s = make_schedule(5, 1e-12, 1e-12)
    z0 = Tensor(np.arange(4.0))
    got = q_sample(z0, 1, Tensor(np.ones(4)), s)
    assert np.abs(got.data - z0.data).max() < 1e-5


def test_q_sample_errors():
    s = make_schedule(10)
    with pytest.raises(ShapeMismatch):
        q_sample(Tensor(np.zeros(3)), 1, Tensor(np.zeros(4)), s)
    for t in (0, 11):
        with pytest.raises(StepOutOfRange):
            q_sample(Tensor(np.zeros(3)), t, Tensor(np.zeros(3)), s)


def test_q_sample_variance_contract():
    s = make_schedule(1000)
    rng = np.random.default_rng(0)
    for t in (1, 250, 900):
        z0 = Tensor(rng.standard_normal(10_000))
        z = q_sample(z0, t, Tensor(rng.standard_normal(10_000)), s).data
        expected = s.alpha_bar(t) * 1.0 + (1 - s.alpha_bar(t))
        assert abs(z.var() - expected) / expected < 0.1


# ---------------------------------------------------------------- config, text, latents

def test_config_requires_halving_chain():
    with pytest.raises(InvalidRange):
        DenoiserConfig(resolutions=(16, 4))
    with pytest.raises(InvalidRange):
        DenoiserConfig(latent_extent=8)
    with pytest.raises(InvalidRange):
        DenoiserConfig(channels=(16, 24))
    cfg = DenoiserConfig()
    assert cfg.latent_shape == (3, 16, 16) and cfg.image_extent == 64 and cfg.levels == 3


def test_text_encoder_contract(caplog):
    enc = TextEncoder(8, np.random.default_rng(0), max_tokens=4)
    e = enc("A hand holding zzyzx")
    assert e.token_strings == ["A", "hand", "holding", "zzyzx"]
    assert e.tokens[-1] == 0 and e.tokens[1] == enc.vocab["hand"]
    assert e.embeddings.shape == (4, 8)
    long = enc("one two three four five six")
    assert long.embeddings.shape[0] == 4
    assert "truncated" in caplog.text


def test_latent_roundtrip_on_blocky_images():
    rng = np.random.default_rng(1)
    blocks = rng.random((3, 16, 16))
    img = np.repeat(np.repeat(blocks, 4, axis=1), 4, axis=2)
    z = encode_image(img)
    assert z.shape == (3, 16, 16)
    assert np.allclose(z, 2 * blocks - 1)
    assert np.allclose(decode_latent(z), img)


# ---------------------------------------------------------------- denoiser

def test_denoise_output_shape(model):
    rng = np.random.default_rng(0)
    c_t = model.embed("a person holding a cup")
    out = model.denoise(Tensor(rng.standard_normal((3, 16, 16))), 10, c_t)
    assert out.shape == (3, 16, 16)
    with pytest.raises(ShapeMismatch):
        model.denoise(Tensor(np.zeros((3, 8, 8))), 10, c_t)


def test_parameter_names_are_stable(model):
    names = [n for n, _ in model.named_parameters()]
    assert names[0].startswith("backbone.")
    assert "backbone.encoder.conv_in.w" in names
    assert "backbone.decoder.conv_out.b" in names
    assert len(names) == len(set(names))


def test_batching_matches_single_sample_runs(model):
    rng = np.random.default_rng(5)
    z = rng.standard_normal((2, 3, 16, 16))
    prompts = [model.embed("a hand waving"), model.embed("a man holding a ball")]
    batched = model.denoise(Tensor(z), [7, 300], prompts)
    assert batched.shape == (2, 3, 16, 16)
    for i in range(2):
        single = model.denoise(Tensor(z[i]), [7, 300][i], prompts[i])
        assert np.array_equal(batched.data[i], single.data)


def test_control_for_other_config_rejected(model):
    from sesa.control import ControlNet

    other = Denoiser(DenoiserConfig(channels=(8, 8, 8)), seed=0)
    ctrl = ControlNet(other)
    c_t = other.embed("a hand")
    out = ctrl(Tensor(np.zeros((3, 16, 16))), 5, c_t, Tensor(np.zeros((3, 16, 16))))
    with pytest.raises(ConfigMismatch):
        model.denoise(Tensor(np.zeros((3, 16, 16))), 5, model.embed("a hand"), out)


# ---------------------------------------------------------------- loss and sampler

def test_oracle_predictor_has_zero_loss(model):
    sched = make_schedule(1000)
    rng = np.random.default_rng(0)
    batch = [(Tensor(rng.standard_normal((3, 16, 16))), None, None) for _ in range(3)]

    def oracle(z_t, t, c_t, c_f):
        # recover eps exactly from the z0 the batch was built with
        z0 = next(z for z, _, _ in batch if z is oracle.current)
        return T.scale(T.sub(z_t, T.scale(z0, math.sqrt(sched.alpha_bar(t)))), 1 / math.sqrt(1 - sched.alpha_bar(t)))

    losses = []
    for item in batch:
        oracle.current = item[0]
        losses.append(training_loss([item], sched, oracle, np.random.default_rng(1)).item())
    assert max(losses) < 1e-20


def test_loss_matches_straight_line_reimplementation(model):
    sched = make_schedule(1000)
    rng = np.random.default_rng(2)
    zs = [rng.standard_normal((3, 16, 16)) for _ in range(2)]
    c_t = model.embed("a person holding a cup with one hand")
    batch = [(Tensor(z), c_t, None) for z in zs]
    got = training_loss(batch, sched, model, np.random.default_rng(9)).item()

    draw = np.random.default_rng(9)
    total = 0.0
    for z0 in zs:
        t = int(draw.integers(1, 1001))
        eps = draw.standard_normal(z0.shape)
        ab = np.prod(1 - np.linspace(1e-4, 0.02, 1000)[:t])
        z_t = math.sqrt(ab) * z0 + math.sqrt(1 - ab) * eps
        pred = model(Tensor(z_t), t, c_t).data
        total += float(((eps - pred) ** 2).sum())
    assert got == pytest.approx(total / 2, rel=1e-10)
    assert training_loss(batch, sched, model, np.random.default_rng(9)).item() == got


def test_sample_shape_determinism_and_steps(model):
    sched = make_schedule(1000)
    c_t = model.embed("a hand")
    a = sample(sched, model, c_t, (3, 16, 16), 4, T.make_rng(11))
    b = sample(sched, model, c_t, (3, 16, 16), 4, T.make_rng(11))
    assert a.shape == (3, 16, 16)
    assert np.array_equal(a.data, b.data)
    with pytest.raises(StepOutOfRange):
        sample(sched, model, c_t, (3, 16, 16), 1001, T.make_rng(0))


@pytest.mark.parametrize("steps", [1000, 50])
def test_sampler_converges_with_closed_form_denoiser(steps):
    sched = make_schedule(1000)
    target = np.random.default_rng(4).uniform(-1, 1, (3, 4, 4))

    def oracle(z_t, t, c_t, c_f):
        ab = sched.alpha_bar(t)
        return Tensor((z_t.data - math.sqrt(ab) * target) / math.sqrt(1 - ab))

    rng = T.make_rng(0)
    start = np.random.default_rng(0).standard_normal(target.shape)  # same first draw as the chain
    out = sample(sched, oracle, None, target.shape, steps, rng).data
    assert np.mean((out - target) ** 2) < 1e-3 * np.mean((start - target) ** 2)
