import numpy as np
import pytest

from uolo import data, trainer
from uolo import tensor as T
from uolo.checkpoint import read_checkpoint, write_checkpoint
from uolo.data import SceneSpec
from uolo.exceptions import ConfigurationError, DataError, NumericError
from uolo.model import ModelConfig, build_model
from uolo.segnet import SegNetConfig
from uolo.tensor import Tensor
from uolo.trainer import Adam, AdamState, LossLedger, TrainConfig

TINY = ModelConfig(segnet=SegNetConfig(input_size=16, depth=2, base_channels=2))
TINY_SCENE = SceneSpec(image_size=16, disc_radius_range=(2.0, 2.5), spot_radius_range=(1.0, 1.2),
                       distractor_count=(0, 1))


def tiny_samples(n=6, masked=3, seed=0):
    return data.strip_masks(data.generate(SceneSpec(**{**TINY_SCENE.__dict__, "rng_seed": seed}), n),
                            masked)


def tiny_config(**kw):
    base = dict(n_det=2, n_seg=1, batch_size=3, learning_rate=1e-3, max_steps=2)
    base.update(kw)
    return TrainConfig(**base)


def snapshot(params):
    return {k: p.data.copy() for k, p in params.items()}


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


def scalar_adam(w, grads_fn, steps, lr=0.1, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    trace = []
    for t in range(1, steps + 1):
        g = grads_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
        trace.append(w)
    return trace


def test_adam_first_step_is_lr():
    p = np.array([0.0])
    g = np.array([1.0])
    st = AdamState.zeros_like(p)
    trainer.adam_update(p, g, st, lr=1e-4)
    assert p[0] == pytest.approx(-1e-4, rel=1e-6)
    assert g[0] == 0.0 and st.t == 1


def test_adam_zero_grad_decays_moments():
    p = np.array([2.0])
    st = AdamState(np.array([0.5]), np.array([0.25]), 3)
    trainer.adam_update(p, np.array([0.0]), st, lr=0.0)
    assert p[0] == 2.0
    assert st.m[0] == 0.5 * 0.9 and st.v[0] == 0.25 * 0.999


def test_adam_matches_scalar_reference_on_square():
    w = Tensor(np.array(1.0), requires_grad=True, name="w")
    opt = Adam(lr=0.1)
    ref = scalar_adam(1.0, lambda x: 2 * x, 10)
    trace = []
    for _ in range(10):
        tape = T.Tape()
        with T.using_tape(tape):
            T.backward(T.square(w))
        opt.step({"w": w})
        trace.append(float(w.data))
    np.testing.assert_allclose(trace, ref, rtol=0, atol=1e-14)
    assert all(abs(a) > abs(b) for a, b in zip([1.0] + trace, trace))


def test_adam_rejects_nan_naming_parameter():
    w = Tensor(np.ones(2), requires_grad=True)
    w.grad[0] = np.nan
    before = w.data.copy()
    with pytest.raises(NumericError, match="enc0.weight"):
        Adam().step({"enc0.weight": w})
    np.testing.assert_array_equal(w.data, before)


def test_adam_state_roundtrip():
    w = Tensor(np.ones(3), requires_grad=True)
    opt = Adam(lr=0.01)
    w.grad[:] = [1, 2, 3]
    opt.step({"a": w})
    other = Adam(lr=0.01)
    other.load_state_arrays(opt.state_arrays())
    assert other.state["a"].t == 1
    np.testing.assert_array_equal(other.state["a"].m, opt.state["a"].m)


# --------------------------------------------------------------------------
# ledger and train_step
# --------------------------------------------------------------------------


def test_ledger_initial_values():
    ledger = LossLedger()
    assert ledger.l_unet == 1.0
    assert ledger.l_uolo == ledger.l_yolo + ledger.l_unet


def test_train_config_validation():
    for kw in (dict(n_det=0, n_seg=0), dict(n_det=-1), dict(validation_fraction=1.0),
               dict(learning_rate=0.0), dict(batch_size=0)):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kw).validate()


def _run_steps(config, k, samples=None, seed=0):
    model = build_model(TINY, seed)
    det, seg = data.streams(samples or tiny_samples(), config.batch_size, config.rng_seed,
                            need_seg=config.n_seg > 0)
    ledger, opt = LossLedger(), Adam(config.learning_rate)
    for _ in range(k):
        trainer.train_step(model, det, seg, config, ledger, opt)
    return model, det, seg, ledger


@pytest.mark.parametrize("n_det,n_seg,k", [(2, 1, 3), (1, 3, 2), (0, 2, 2), (3, 0, 1)])
def test_batch_accounting(n_det, n_seg, k):
    cfg = tiny_config(n_det=n_det, n_seg=n_seg)
    _, det, seg, ledger = _run_steps(cfg, k)
    assert det.batches_consumed == ledger.det_batches == k * n_det
    assert (seg.batches_consumed if seg else 0) == ledger.seg_batches == k * n_seg
    assert [h["step"] for h in ledger.history] == list(range(1, k + 1))


def test_ledger_identity_every_step():
    _, _, _, ledger = _run_steps(tiny_config(), 3)
    for row in ledger.history:
        assert row["L_UOLO"] == row["L_YOLO"] + row["L_U-Net"]
        assert 0.0 <= row["L_U-Net"] <= 1.0


def test_seg_phase_leaves_head_bit_identical():
    cfg = tiny_config(n_det=0, n_seg=1)
    model = build_model(TINY, 0)
    head_before = snapshot(model.head_parameters())
    seg_before = snapshot(model.segnet_parameters())
    det, seg = data.streams(tiny_samples(), 3)
    trainer.train_step(model, det, seg, cfg, LossLedger(), Adam(1e-3))
    for k, v in model.head_parameters().items():
        assert v.data.tobytes() == head_before[k].tobytes()
    assert any(not np.array_equal(v.data, seg_before[k]) for k, v in model.segnet_parameters().items())


def test_det_phase_updates_head_and_segnet():
    model, *_ = _run_steps(tiny_config(n_det=1, n_seg=0), 0)
    head_before = snapshot(model.head_parameters())
    seg_before = snapshot(model.segnet_parameters())
    det, _ = data.streams(tiny_samples(), 3, need_seg=False)
    trainer.train_step(model, det, None, tiny_config(n_det=1, n_seg=0), LossLedger(), Adam(1e-3))
    for before, params in ((head_before, model.head_parameters()),
                           (seg_before, model.segnet_parameters())):
        assert any(not np.array_equal(p.data, before[k]) for k, p in params.items())


def test_seg_phase_needs_stream():
    model = build_model(TINY)
    det, _ = data.streams(tiny_samples(), 3, need_seg=False)
    with pytest.raises(ConfigurationError):
        trainer.train_step(model, det, None, tiny_config(), LossLedger(), Adam())


def test_batch_seg_loss_masks_images_without_gt():
    rng = np.random.default_rng(0)
    soft = Tensor(rng.uniform(0.1, 0.9, (3, 1, 4, 4)))
    masks = (rng.random((3, 1, 4, 4)) > 0.5).astype(float)
    has = np.array([True, False, True])
    from uolo.segnet import seg_loss
    expect = (seg_loss(soft[0:1], masks[0:1]).data + seg_loss(soft[2:3], masks[2:3]).data) / 2
    assert trainer.batch_seg_loss(soft, masks, has).data == pytest.approx(expect, abs=1e-15)
    assert trainer.batch_seg_loss(soft, masks, np.zeros(3, bool)).data == 0.0


def test_training_deterministic():
    _, _, _, a = _run_steps(tiny_config(augment_flips=True, augment_shift=0.1), 2)
    _, _, _, b = _run_steps(tiny_config(augment_flips=True, augment_shift=0.1), 2)
    assert a.history == b.history


def test_nan_input_raises_numeric_error():
    samples = tiny_samples()
    samples[0].image[0, 0, 0] = np.nan
    cfg = tiny_config(n_det=2, n_seg=0, batch_size=6)
    with pytest.raises(NumericError):
        _run_steps(cfg, 1, samples)


# --------------------------------------------------------------------------
# split, evaluation, checkpoints, fit
# --------------------------------------------------------------------------


def test_split_stratified():
    samples = tiny_samples(n=12, masked=4)
    train, val = trainer.split_dataset(samples, 0.25, seed=1)
    assert len(train) == 9 and len(val) == 3
    assert sum(s.seg_mask is not None for s in val) == 1
    assert {s.id for s in train} | {s.id for s in val} == {s.id for s in samples}
    assert trainer.split_dataset(samples, 0.0) == (samples, [])


def test_evaluate_empty_dataset():
    with pytest.raises(ConfigurationError):
        trainer.evaluate(build_model(TINY), [])


def test_fit_zero_steps(tmp_path):
    model = build_model(TINY, 0)
    before = snapshot(model.parameters())
    res = trainer.fit(model, tiny_samples(), tiny_config(max_steps=0), tmp_path)
    assert res.ledger.l_unet == 1.0 and res.ledger.step == 0
    assert (tmp_path / "final.ckpt").exists()
    loaded, _, header = trainer.load_checkpoint(tmp_path / "final.ckpt")
    assert header["ledger"]["l_unet"] == 1.0
    for k, p in loaded.parameters().items():
        assert p.data.tobytes() == before[k].tobytes()


def test_checkpoint_roundtrip_bitwise(tmp_path):
    samples = tiny_samples()
    res = trainer.fit(build_model(TINY, 0), samples, tiny_config(), tmp_path)
    before = trainer.evaluate(res.model, samples).to_csv()
    loaded, _, _ = trainer.load_checkpoint(tmp_path / "final.ckpt", expect=TINY)
    assert trainer.evaluate(loaded, samples).to_csv() == before
    for name, st in res.model.net.stats.items():
        assert loaded.net.stats[name].mean.tobytes() == st.mean.tobytes()


def test_checkpoint_incompatible(tmp_path):
    trainer.save_checkpoint(tmp_path / "c.ckpt", build_model(TINY))
    other = ModelConfig(segnet=SegNetConfig(input_size=16, depth=2, base_channels=3))
    with pytest.raises(ConfigurationError, match="incompatible"):
        trainer.load_checkpoint(tmp_path / "c.ckpt", expect=other)


def test_checkpoint_corruption(tmp_path):
    path = trainer.save_checkpoint(tmp_path / "c.ckpt", build_model(TINY))
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(DataError):
        trainer.load_checkpoint(path)
    path.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(DataError):
        trainer.load_checkpoint(path)


def test_checkpoint_write_failure_removes_partial(tmp_path):
    class Boom(dict):
        def items(self):
            raise OSError("disk full")

    with pytest.raises(OSError):
        write_checkpoint(tmp_path / "x.ckpt", {}, Boom(), {})
    assert list(tmp_path.iterdir()) == []


def test_checkpoint_records(tmp_path):
    model = build_model(TINY)
    path = trainer.save_checkpoint(tmp_path / "c.ckpt", model)
    header, params, optim = read_checkpoint(path)
    assert header["model"] == TINY.to_dict()
    assert "head.weight" in params and "stats.enc0.bn1.mean" in params
    assert optim == {}


def test_fit_log_and_determinism(tmp_path):
    cfg = tiny_config(max_steps=3, validation_fraction=0.34, checkpoint_every=2)
    trainer.fit(build_model(TINY, 0), tiny_samples(), cfg, tmp_path / "a")
    trainer.fit(build_model(TINY, 0), tiny_samples(), cfg, tmp_path / "b")
    log_a = (tmp_path / "a" / "train_log.csv").read_bytes()
    assert log_a == (tmp_path / "b" / "train_log.csv").read_bytes()
    lines = log_a.decode().splitlines()
    assert lines[0].split(",") == trainer.LOG_COLUMNS
    assert len(lines) == 4
    assert (tmp_path / "a" / "checkpoints" / "step_000002.ckpt").exists()
    assert (tmp_path / "a" / "best.ckpt").exists()


def test_fit_resume_continues(tmp_path):
    samples = tiny_samples()
    cfg = tiny_config(max_steps=4, checkpoint_every=2)
    full = trainer.fit(build_model(TINY, 0), samples, cfg, tmp_path / "full")
    trainer.fit(build_model(TINY, 0), samples, tiny_config(max_steps=2), tmp_path / "part")
    resumed = trainer.fit(build_model(TINY, 0), samples, cfg, tmp_path / "part",
                          resume=tmp_path / "part" / "final.ckpt")
    assert resumed.ledger.step == 4
    assert resumed.ledger.history == full.ledger.history[2:]
    assert (tmp_path / "part" / "train_log.csv").read_bytes() == \
        (tmp_path / "full" / "train_log.csv").read_bytes()
    for k, p in full.model.parameters().items():
        assert p.data.tobytes() == resumed.model.parameters()[k].data.tobytes()


def test_fit_callback_stops(tmp_path):
    res = trainer.fit(build_model(TINY, 0), tiny_samples(), tiny_config(max_steps=10),
                      callback=lambda step, *_: step >= 2)
    assert res.ledger.step == 2
