import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sesa import tensor as T
from sesa.backbone import sample
from sesa.errors import ConfigError, ConfigMismatch, Corrupt, EmptyMask, NanLoss
from sesa.harness.checkpoint import MODEL_FILE, build_model, load_checkpoint, model_state, save_checkpoint
from sesa.harness.cli import main
from sesa.harness.config import DEFAULTS, RunConfig, toy_config
from sesa.harness.data import crop_box, load_dataset, preprocess_crop
from sesa.harness.optim import AdamW
from sesa.harness.synthetic import (
    FOREGROUND_BOUNDS, gen_synthetic, load_manifest, make_sample, render_silhouette, sample_params, skin_mask,
)
from sesa.harness.train import schedule_for, train
from sesa.harness.workflows import alignment_error, sample_image
from sesa.metrics import PixelStatsEmbedder, image_features
from sesa.pnm import read_pnm, write_pnm
from sesa.tensor import Tensor

from oracles import ScalarAdamW, mmd2_unbiased_loops


def small_cfg(**kw):
    return toy_config(**{"train__epochs": 1, "train__eval_samples": 4, **kw})


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    gen_synthetic(6, 11, d)
    return d


# ---------------------------------------------------------------- config

def test_config_defaults_and_grammar(tmp_path):
    cfg = RunConfig()
    assert cfg["enhance.alpha"] == 2.0 and cfg["train.lr"] == 1e-5 and cfg["train.batch"] == 2
    text = "# toy run\nseed = 7\n\nfusion.enabled = off  # trailing comment\nmodel.resolutions = 16, 8, 4\ntrain.lr=0.001\n"
    got = RunConfig.from_text(text)
    assert got["seed"] == 7 and got["fusion.enabled"] is False
    assert got["model.resolutions"] == (16, 8, 4) and got["train.lr"] == 1e-3
    got.save(tmp_path / "c.cfg")
    assert RunConfig.load(tmp_path / "c.cfg") == got
    assert set(got.values) == set(DEFAULTS)


@pytest.mark.parametrize("text", [
    "bogus.key = 1", "seed", "seed = x", "fusion.enabled = maybe", "train.lr = 0",
    "enhance.index_rule = any", "model.channels = 16,24", "enhance.alpha = -1",
])
def test_config_rejections(text):
    with pytest.raises(ConfigError):
        RunConfig.from_text(text)


def test_config_replace_and_alpha():
    cfg = RunConfig().replace(enhance__enabled=False, seed=3)
    assert cfg.alpha is None and cfg["seed"] == 3
    assert RunConfig().alpha == 2.0
    with pytest.raises(ConfigError):
        RunConfig().replace(nope=1)


# ---------------------------------------------------------------- optimizer

def test_adamw_matches_scalar_reference():
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal(3)
    p = Tensor(x0.copy(), requires_grad=True)
    opt = AdamW([p], lr=0.05, weight_decay=0.1)
    ref = ScalarAdamW(x0, lr=0.05, wd=0.1)
    for _ in range(25):
        opt.zero_grad()
        T.backward(T.sum(T.mul(T.square(p), Tensor(np.array([1.0, 2.0, 3.0])))))
        got = p.data.copy()
        opt.step()
        expected = ref.step(list(2 * got * np.array([1.0, 2.0, 3.0])))
        assert np.abs(p.data - np.array(expected)).max() < 1e-12


def test_adamw_state_round_trip():
    p = Tensor(np.ones(4), requires_grad=True)
    opt = AdamW([p], lr=0.1)
    p.grad = np.arange(4.0)
    opt.step()
    other = AdamW([Tensor(np.ones(4), requires_grad=True)], lr=0.1)
    other.load_state(opt.state())
    assert other.t == 1 and np.array_equal(other.m[0], opt.m[0]) and np.array_equal(other.v[0], opt.v[0])


# ---------------------------------------------------------------- synthetic data

def test_gen_synthetic_empty_and_deterministic(tmp_path):
    assert gen_synthetic(0, 1, tmp_path / "none") == []
    assert (tmp_path / "none" / "manifest.jsonl").read_text() == ""
    gen_synthetic(3, 5, tmp_path / "a")
    gen_synthetic(3, 5, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    recs = load_manifest(tmp_path / "a")
    assert [r["index"] for r in recs] == [0, 1, 2]
    assert all("hand" in r["prompt"] for r in recs)


@settings(max_examples=25)
@given(st.integers(0, 2**31), st.integers(0, 500))
def test_foreground_count_within_declared_bounds(seed, index):
    s = make_sample(seed, index)
    # regenerate from the recorded parameters and count pixels independently
    count = int(render_silhouette(s.params).sum())
    assert count == int(s.condition.sum())
    assert FOREGROUND_BOUNDS[0] <= count <= FOREGROUND_BOUNDS[1]
    assert 3 <= s.params.fingers <= 5


@settings(max_examples=25)
@given(st.integers(0, 2**31))
def test_skin_mask_recovers_silhouette(seed):
    s = make_sample(seed, 0)
    assert np.array_equal(skin_mask(s.target), s.mask)
    assert alignment_error(s.target, s.condition) == 0.0


def test_sample_params_keep_hand_inside():
    rng = np.random.default_rng(0)
    for _ in range(50):
        m = render_silhouette(sample_params(rng))
        assert not (m[0].any() or m[-1].any() or m[:, 0].any() or m[:, -1].any())


# ---------------------------------------------------------------- cropping

def test_full_mask_crop_is_a_resize():
    rng = np.random.default_rng(1)
    img = rng.random((3, 32, 32))
    out, _, box = preprocess_crop(img, np.ones((32, 32), bool), extent=16, margin=0.1)
    assert (box.y0, box.x0, box.size) == (0, 0, 32)
    from sesa.metrics import resize_bilinear
    assert np.array_equal(out, resize_bilinear(img, 16, 16))


def test_crop_centred_on_square_mask():
    mask = np.zeros((64, 64), bool)
    mask[20:30, 30:40] = True
    box = crop_box(mask, margin=0.5)
    assert box.size == 20
    # centroid of the mask inside the window sits at the window centre
    win = mask[box.y0:box.y0 + box.size, box.x0:box.x0 + box.size]
    ys, xs = np.nonzero(win)
    assert ys.mean() + 0.5 == box.size / 2 and xs.mean() + 0.5 == box.size / 2
    edge = np.zeros((64, 64), bool)
    edge[0:4, 60:64] = True
    b = crop_box(edge, margin=1.0)
    assert b.y0 == 0 and b.x0 + b.size == 64
    with pytest.raises(EmptyMask):
        crop_box(np.zeros((8, 8)))


def test_image_and_condition_share_the_transform():
    ys, xs = np.mgrid[0:48, 0:48]
    code = (ys * 48 + xs).astype(float)
    mask = np.zeros((48, 48), bool)
    mask[10:20, 12:30] = True
    img_out, cond_out, box = preprocess_crop(code[None], mask, condition=code[None] * 2, extent=box_extent(mask))
    assert np.array_equal(cond_out, 2 * img_out)
    # at native size each output pixel is exactly one source pixel
    idx = img_out[0].astype(int).ravel()
    assert len(set(idx)) == idx.size
    assert set(idx) == {y * 48 + x for y in range(box.y0, box.y0 + box.size) for x in range(box.x0, box.x0 + box.size)}


def box_extent(mask):
    return crop_box(mask).size


def test_load_dataset_crops_large_images(tmp_path):
    s = make_sample(0, 0, extent=64)
    big = np.zeros((3, 96, 96))
    big[:, 16:80, 16:80] = s.target
    mask = np.zeros((96, 96))
    mask[16:80, 16:80] = s.mask
    write_pnm(tmp_path / "t.ppm", big)
    write_pnm(tmp_path / "c.pgm", mask[None])
    write_pnm(tmp_path / "m.pgm", mask[None])
    (tmp_path / "manifest.jsonl").write_text(json.dumps(
        {"image": "t.ppm", "condition": "c.pgm", "mask": "m.pgm", "prompt": "a hand"}) + "\n")
    (ex,) = load_dataset(tmp_path, 64)
    assert ex.target.shape == (3, 64, 64) and ex.condition.shape == (1, 64, 64)
    assert ex.z0.shape == (3, 16, 16)


# ---------------------------------------------------------------- checkpoints and training

def test_checkpoint_round_trip_and_errors(tmp_path):
    cfg = RunConfig({"seed": 3})
    model = build_model(cfg)
    save_checkpoint(tmp_path / "ck", model, cfg)
    back, cfg2, _ = load_checkpoint(tmp_path / "ck")
    assert cfg2 == cfg
    a, b = model_state(model), model_state(back)
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)

    raw = (tmp_path / "ck" / MODEL_FILE).read_bytes()
    (tmp_path / "ck" / MODEL_FILE).write_bytes(raw[:len(raw) // 2])
    with pytest.raises(Corrupt) as err:
        load_checkpoint(tmp_path / "ck")
    assert err.value.offset > 0

    save_checkpoint(tmp_path / "ck", model, cfg)
    other = RunConfig({"model.channels": (8, 8, 8)})
    other.save(tmp_path / "ck" / "config.cfg")
    with pytest.raises(ConfigMismatch, match="backbone"):
        load_checkpoint(tmp_path / "ck")


def test_zero_epochs_equals_initialization(tmp_path, dataset):
    cfg = small_cfg(train__epochs=0)
    train(cfg, dataset, tmp_path / "ck")
    model, _, state = load_checkpoint(tmp_path / "ck")
    init = model_state(build_model(cfg))
    assert all(np.array_equal(init[k], state[k]) for k in init)
    assert (tmp_path / "ck" / "train_log.jsonl").read_text() == ""


def test_training_is_deterministic_and_resumable(tmp_path, dataset):
    cfg = small_cfg(train__epochs=2, train__limit=4)
    full = train(cfg, dataset, tmp_path / "full")
    again = train(cfg, dataset, tmp_path / "again")
    assert (tmp_path / "full" / MODEL_FILE).read_bytes() == (tmp_path / "again" / MODEL_FILE).read_bytes()
    assert full.final_loss == again.final_loss

    train(cfg.replace(train__epochs=1), dataset, tmp_path / "half")
    resumed = train(cfg, dataset, tmp_path / "resumed", resume=tmp_path / "half")
    assert resumed.history == full.history
    assert (tmp_path / "resumed" / MODEL_FILE).read_bytes() == (tmp_path / "full" / MODEL_FILE).read_bytes()


def test_nan_loss_aborts(tmp_path, dataset, monkeypatch):
    import sesa.harness.train as tr

    monkeypatch.setattr(tr, "training_loss", lambda *a, **k: Tensor(np.array(np.nan)))
    with pytest.raises(NanLoss) as err:
        train(small_cfg(train__eval_samples=0, train__limit=2), dataset)
    assert (err.value.epoch, err.value.step) == (0, 0)


# ---------------------------------------------------------------- cli

def run(argv, capsys=None):
    code = main([str(a) for a in argv])
    return code


def test_cli_exit_codes(tmp_path, capsys):
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 2
    (tmp_path / "bad.cfg").write_text("nope = 1\n")
    assert run(["--config", tmp_path / "bad.cfg", "gen-data", "--out", tmp_path / "d"]) == 2
    assert run(["eval", "--generated", tmp_path / "missing", "--reference", tmp_path / "missing"]) == 3
    (tmp_path / "f.json").write_text("{}")
    (tmp_path / "img.ppm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    assert run(["gen-data", "--out", tmp_path / "d", "--count", "1"]) == 0
    assert run(["extract-semantics", tmp_path / "img.ppm", "--out", tmp_path / "m.jsonl",
                "--fixtures", tmp_path / "f.json"]) == 0
    assert json.loads((tmp_path / "m.jsonl").read_text())["status"] == "error"


def test_cli_network_exit_code(tmp_path):
    (tmp_path / "cfg").write_text("semantics.extractor_url = http://127.0.0.1:9\nsemantics.retries = 0\n"
                                 "semantics.timeout = 0.5\nsemantics.backoff = 0\n")
    RunConfig({"seed": 0}).save(tmp_path / "ck.cfg")
    save_checkpoint(tmp_path / "ck", build_model(RunConfig()), RunConfig())
    write_pnm(tmp_path / "c.pgm", make_sample(0, 0).condition)
    code = run(["--config", tmp_path / "cfg", "sample", "--checkpoint", tmp_path / "ck", "--condition",
                tmp_path / "c.pgm", "--prompt", "a person holding a cup", "--extract-semantics",
                "--out", tmp_path / "o.ppm", "--steps", "2"])
    assert code == 5


def test_cli_eval_on_identical_dirs(tmp_path, dataset, capsys):
    assert run(["eval", "--generated", dataset, "--reference", dataset, "--out", tmp_path / "r.json",
                "--metrics", "fid,kid,fid_h,kid_h,align"]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert set(rep["metrics"]) == {"fid", "kid", "fid_h", "kid_h", "align"}
    assert rep["metrics"]["fid"] <= 1e-6 and rep["metrics"]["fid_h"] <= 1e-6
    # on identical sets the unbiased estimator is left with only its finite-sample term
    feats = image_features([read_pnm(p) for p in sorted(dataset.glob("*.ppm"))], PixelStatsEmbedder()).vectors
    assert abs(rep["metrics"]["kid"] - mmd2_unbiased_loops(feats, feats)) < 1e-9
    assert rep["metrics"]["align"] == 0.0
    assert set(rep["counts"]) == set(rep["metrics"])


def test_cli_sample_init_identity(tmp_path, dataset):
    cfg = RunConfig({"seed": 4})
    save_checkpoint(tmp_path / "ck", build_model(cfg), cfg)
    cond = dataset / "cond_00000.pgm"
    args = ["--seed", 9, "sample", "--checkpoint", tmp_path / "ck", "--condition", cond,
            "--prompt", "a hand holding a cup", "--steps", 3, "--fusion", "off", "--hand-bias-alpha", 0]
    assert run(args + ["--out", tmp_path / "a.ppm"]) == 0
    assert run(args + ["--out", tmp_path / "b.ppm"]) == 0
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()
    side = json.loads((tmp_path / "a.json").read_text())
    assert side["seed"] == 9 and side["alpha"] == 0.0 and side["fusion"]["enabled"] is False

    backbone = build_model(cfg).backbone
    c_t = backbone.embed("a hand holding a cup")
    z = sample(schedule_for(cfg), backbone, c_t, backbone.config.latent_shape, 3, T.make_rng(9))
    from sesa.backbone import decode_latent
    expected = read_pnm(_written(decode_latent(z.data), tmp_path / "ref.ppm"))
    assert np.array_equal(read_pnm(tmp_path / "a.ppm"), expected)


def _written(img, path):
    write_pnm(path, img)
    return path


def test_cli_dump_attn_and_bench(tmp_path, dataset, capsys):
    cfg = RunConfig()
    save_checkpoint(tmp_path / "ck", build_model(cfg), cfg)
    code = run(["dump-attn", "--checkpoint", tmp_path / "ck", "--condition", dataset / "cond_00001.pgm",
                "--prompt", "a hand holding a cup", "--out", tmp_path / "attn", "--dump-cross-attn", tmp_path / "x"])
    assert code == 0
    index = json.loads((tmp_path / "attn" / "index.json").read_text())
    assert index["maps"] and (tmp_path / "attn" / "fused.pgm").exists()
    cross = json.loads((tmp_path / "x" / "index.json").read_text())
    assert cross["hand_mass"] and cross["hand_tokens"] == [1, 2]
    assert run(["bench", "--repeats", 1]) == 0
    out = capsys.readouterr().out
    assert "forward" in out
