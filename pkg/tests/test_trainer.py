import json
import math

import numpy as np
import pytest

from aclip.attnmask import CropRect
from aclip.trainer import (AdamState, ColorPolicy, ConfigError, TrainConfig, Trainer, adamw_update, color_augment,
                           decays, init_params, load_model, lr_schedule, random_resized_crop)
from aclip.ndgrad import Tensor

torch = pytest.importorskip("torch")
from torch_clip import PlainClip  # noqa: E402

FROZEN = {"visual.patch_embed.weight", "visual.patch_embed.bias"}


def small(**kw):
    base = dict(batch_size=8, total_steps=20, warmup_steps=2, layers=1, text_layers=1, width=32, text_width=32,
                embed_dim=16, views=1, dtype="float64")
    base.update(kw)
    return TrainConfig(**base)


def params_equal(a, b):
    return a.keys() == b.keys() and all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)


# -- configuration --

@pytest.mark.parametrize("bad", [dict(batch_size=0), dict(strategy="medium"), dict(ssl="moco"),
                                 dict(ssl="simclr", views=1), dict(keep_ratio=0.0), dict(keep_ratio=1.5),
                                 dict(granularity=12), dict(dtype="float16"), dict(tau_init=2.0),
                                 dict(ema_momentum=1.5), dict(ema_resolution="quarter"), dict(lr=0.0)])
def test_invalid_configs_raise(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_config_round_trip_and_unknown_keys(tmp_path):
    cfg = TrainConfig(strategy="high", seed=4, keep_ratio=0.3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"views": 3, "lr": 1e-3}))
    assert TrainConfig.from_file(path).views == 3
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"view": 3})
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        TrainConfig.from_file(path)


def test_batch_size_one_warns(caplog):
    TrainConfig(batch_size=1)
    assert "constant" in caplog.text


def test_default_keep_ratio_splits_budget():
    assert TrainConfig(views=2).view_keep_ratio == 0.5
    assert TrainConfig(views=4).view_keep_ratio == 0.25
    assert TrainConfig(views=2, keep_ratio=0.3).view_keep_ratio == 0.3


def test_trainer_rejects_small_corpus(tiny_corpus):
    with pytest.raises(ConfigError):
        Trainer(TrainConfig(batch_size=64), tiny_corpus)
    with pytest.raises(ConfigError):
        Trainer(TrainConfig(batch_size=8, image_size=16, granularity=8), tiny_corpus)


# -- augmentation --

def test_crop_scale_one_is_full_image(rng):
    for _ in range(20):
        assert random_resized_crop(rng, 1.0, 1.0) == CropRect.full()


def test_crop_area_and_aspect_distribution(rng):
    rects = [random_resized_crop(rng, 0.5, 1.0) for _ in range(10_000)]
    areas = np.array([r.area for r in rects])
    aspect = np.array([r.width / r.height for r in rects])
    assert abs(areas.mean() - 0.75) < 0.02
    assert areas.min() >= 0.5 - 1e-12 and areas.max() <= 1.0 + 1e-12
    assert aspect.min() >= 3 / 4 - 1e-9 and aspect.max() <= 4 / 3 + 1e-9
    assert all(0 <= r.x0 < r.x1 <= 1 and 0 <= r.y0 < r.y1 <= 1 for r in rects)


def test_color_augment_examples(rng):
    img = rng.uniform(size=(3, 8, 8))
    np.testing.assert_array_equal(color_augment(img, rng, ColorPolicy.off()), img)
    solar = ColorPolicy(0.0, 0.4, 0.0, 1.0, 0.5, 0.0)
    np.testing.assert_allclose(color_augment(np.full((3, 2, 2), 0.8), rng, solar), 0.2, atol=1e-15)
    np.testing.assert_allclose(color_augment(np.full((3, 2, 2), 0.3), rng, solar), 0.3, atol=1e-15)
    gray = ColorPolicy(0.0, 0.4, 1.0, 0.0, 0.5, 0.0)
    red = np.zeros((3, 2, 2))
    red[0] = 1.0
    np.testing.assert_allclose(color_augment(red, rng, gray), 0.299, atol=1e-15)


def test_color_augment_stays_in_unit_range(rng):
    for _ in range(50):
        out = color_augment(rng.uniform(size=(3, 8, 8)), rng)
        assert out.min() >= 0.0 and out.max() <= 1.0


# -- schedule and optimizer --

def test_lr_schedule_examples():
    cfg = TrainConfig(lr=1.0, warmup_steps=10, total_steps=110)
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(5, cfg) == 0.5
    assert lr_schedule(10, cfg) == 1.0
    assert math.isclose(lr_schedule(60, cfg), 0.5, abs_tol=1e-15)
    assert lr_schedule(110, cfg) == 0.0
    assert lr_schedule(0, TrainConfig(lr=2.0, warmup_steps=0)) == 2.0


def test_adamw_first_step_scalar_example():
    p = {"w": Tensor(np.full((1, 1), 1.0)), "b": Tensor(np.array([1.0]))}
    state = AdamState()
    adamw_update(p, {"w": np.array([[0.5]]), "b": np.array([0.5])}, state, lr=0.1, weight_decay=0.5)
    # first bias-corrected step moves by lr * g / (|g| + eps)
    step = 0.1 * 0.5 / (0.5 + 1e-8)
    assert math.isclose(p["w"].data[0, 0], 1.0 * (1 - 0.1 * 0.5) - step, rel_tol=1e-14)
    assert math.isclose(p["b"].data[0], 1.0 - step, rel_tol=1e-14)
    assert state.t == 1


def test_decay_applies_to_matrices_only():
    assert decays("visual.proj", np.zeros((3, 3)))
    assert not decays("visual.ln1.gain", np.zeros(3))
    assert not decays("log_tau", np.array(0.0))


def test_matches_torch_plain_clip(tiny_corpus):
    cfg = small(total_steps=6, warmup_steps=2)
    tr = Trainer(cfg, tiny_corpus)
    ref = PlainClip({k: v.data for k, v in tr.params.items()}, cfg, tr.vocab.eos_id, FROZEN)
    for step in range(4):
        batch = tr.prepare_batch(step)
        ref_loss = ref.step(batch.pixels[:, 0], batch.token_ids)
        rep = tr.train_step(batch)
        assert abs(float(rep.objective.data) - ref_loss) < 1e-10
        want = ref.numpy()
        for k, v in want.items():
            np.testing.assert_allclose(tr.params[k].data, v, rtol=0, atol=1e-10, err_msg=k)


# -- training behaviour --

def test_init_params_dtype_and_frozen_patch_embed():
    cfg = small()
    p = init_params(cfg, 30, 2)
    assert all(t.data.dtype == np.float64 for t in p.values())
    assert p["log_tau"].data.shape == () and math.isclose(float(p["log_tau"].data), math.log(0.07))
    assert not p["visual.patch_embed.weight"].requires_grad
    assert p["visual.proj"].requires_grad
    assert init_params(small(frozen_patch_embed=False), 30, 2)["visual.patch_embed.weight"].requires_grad


def test_loss_decreases_on_repeated_batch(tiny_corpus):
    cfg = small(total_steps=50, warmup_steps=0, lr=3e-3)
    tr = Trainer(cfg, tiny_corpus)
    batch = tr.prepare_batch(0)
    first = float(tr.train_step(batch).objective.data)
    for _ in range(48):
        tr.train_step(batch)
    last = float(tr.train_step(batch).objective.data)
    assert last <= 0.7 * first


def test_frozen_patch_embed_and_ema_with_unit_momentum(tiny_corpus):
    cfg = small(views=2, keep_ratio=0.5, ema_momentum=1.0)
    tr = Trainer(cfg, tiny_corpus)
    w0 = tr.params["visual.patch_embed.weight"].data.copy()
    shadow0 = {k: v.copy() for k, v in tr.ema.shadow.items()}
    blk0 = tr.params["visual.blocks.0.attn.q.weight"].data.copy()
    for _ in range(3):
        tr.train_step()
    assert tr.params["visual.patch_embed.weight"].data.tobytes() == w0.tobytes()
    assert all(tr.ema.shadow[k].tobytes() == v.tobytes() for k, v in shadow0.items())
    assert not np.array_equal(tr.params["visual.blocks.0.attn.q.weight"].data, blk0)


def test_temperature_is_clamped(tiny_corpus):
    cfg = small(tau_init=0.02, tau_min=0.02, lr=0.5, warmup_steps=0)
    tr = Trainer(cfg, tiny_corpus)
    for _ in range(3):
        tr.train_step()
        assert math.log(0.02) - 1e-15 <= float(tr.params["log_tau"].data) <= 0.0


def test_training_is_deterministic(tiny_corpus):
    cfg = small(views=2, keep_ratio=0.5)
    a, b = Trainer(cfg, tiny_corpus), Trainer(cfg, tiny_corpus)
    for _ in range(3):
        a.train_step()
        b.train_step()
    assert params_equal(a.params, b.params)
    other = Trainer(small(views=2, keep_ratio=0.5, seed=1), tiny_corpus)
    other.train_step()
    assert not params_equal(a.params, other.params)


def test_adding_a_view_keeps_earlier_view_randomness(tiny_corpus):
    two = Trainer(small(views=2), tiny_corpus).prepare_batch(3)
    three = Trainer(small(views=3), tiny_corpus).prepare_batch(3)
    np.testing.assert_array_equal(two.indices, three.indices)
    np.testing.assert_array_equal(two.token_ids, three.token_ids)
    np.testing.assert_array_equal(two.rects, three.rects[:, :2])
    np.testing.assert_array_equal(two.seeds, three.seeds[:, :2])


def test_checkpoint_resume_is_bit_exact(tiny_corpus, tmp_path):
    cfg = small(views=2, keep_ratio=0.5, ssl="simclr", byol=True)
    straight = Trainer(cfg, tiny_corpus)
    for _ in range(3):
        straight.train_step()
    first = Trainer(cfg, tiny_corpus)
    first.train_step()
    first.train_step()
    first.save(tmp_path / "mid.ckpt")
    resumed = Trainer.load(tmp_path / "mid.ckpt", tiny_corpus)
    assert resumed.step == 2 and resumed.adam.t == 2
    resumed.train_step()
    assert params_equal(straight.params, resumed.params)
    assert all(straight.ema.shadow[k].tobytes() == resumed.ema.shadow[k].tobytes() for k in straight.ema.shadow)
    params, ema, cfg2, vocab = load_model(tmp_path / "mid.ckpt")
    assert cfg2 == cfg and vocab.tokens == straight.vocab.tokens and "ssl.proj.fc1.weight" in ema


@pytest.mark.parametrize("kw", [dict(ssl="simclr"), dict(ssl="simsiam"), dict(byol=True),
                                dict(ssl="simclr", byol=True, strategy="mixed", ema_resolution="half"),
                                dict(strategy="random", granularity=16), dict(strategy="high", ema_layers="last")])
def test_training_variants_run(tiny_corpus, kw):
    cfg = small(views=2, keep_ratio=0.5, **kw)
    rep = Trainer(cfg, tiny_corpus).train_step()
    d = rep.to_dict()
    assert math.isfinite(d["total"])
    if cfg.ssl != "none":
        assert d["ssl_online"] is not None
    if cfg.byol:
        assert d["ssl_ema"] is not None


def test_run_writes_log_and_checkpoint(tiny_corpus, tmp_path):
    cfg = small(total_steps=3)
    tr = Trainer(cfg, tiny_corpus)
    recs = tr.run(log_path=tmp_path / "log.jsonl", ckpt_dir=tmp_path)
    lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in lines] == [0, 1, 2] == [r["step"] for r in recs]
    assert lines[0]["mu"] == 0.996 and lines[0]["lr"] == 0.0
    assert (tmp_path / "last.ckpt").exists()
