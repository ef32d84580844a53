import numpy as np
import pytest

from rmamba.config import ModelConfig, TrainConfig, desk_train_config
from rmamba.data import synth_dataset
from rmamba.layers import Module
from rmamba.tensor import Tensor
from rmamba.trainer import (Adam, EarlyStopper, PlateauScheduler, augment,
                            evaluate, hflip, rotate_pair, train, vflip)


def _pair(rng, size=16):
    image = rng.uniform(0, 1, size=(3, size, size)).astype(np.float32)
    mask = (rng.uniform(size=(1, size, size)) > 0.5).astype(np.float32)
    return image, mask


def test_hflip_twice_is_identity(rng):
    image, mask = _pair(rng)
    i2, m2 = hflip(*hflip(image, mask))
    np.testing.assert_array_equal(i2, image)
    np.testing.assert_array_equal(m2, mask)


def test_vflip_twice_is_identity(rng):
    image, mask = _pair(rng)
    i2, m2 = vflip(*vflip(image, mask))
    np.testing.assert_array_equal(i2, image)


def test_rotation_keeps_mask_binary(rng):
    image, mask = _pair(rng, size=32)
    _, rotated = rotate_pair(image, mask, 13.7)
    assert set(np.unique(rotated)).issubset({0.0, 1.0})


def test_augment_deterministic_per_seed(rng):
    image, mask = _pair(rng, size=32)
    cfg = TrainConfig(image_size=32)
    out1 = augment(image, mask, np.random.default_rng(99), cfg)
    out2 = augment(image, mask, np.random.default_rng(99), cfg)
    assert np.array_equal(out1[0], out2[0]) and np.array_equal(out1[1], out2[1])


def test_augment_alignment_check():
    with pytest.raises(ValueError):
        augment(np.zeros((3, 8, 8), dtype=np.float32), np.zeros((1, 9, 9), dtype=np.float32),
                np.random.default_rng(0), TrainConfig())


class _OneParam(Module):
    def __init__(self, value):
        self.p = Tensor(np.array([value], dtype=np.float32), requires_grad=True)


def test_adam_first_step_closed_form():
    m = _OneParam(0.0)
    opt = Adam(m.named_parameters(), lr=1e-4)
    m.p.grad = np.array([1.0], dtype=np.float32)
    opt.step()
    # bias-corrected first step is -lr * g/(|g| + eps')
    np.testing.assert_allclose(m.p.data, [-1e-4], rtol=1e-4)
    assert opt.step_count == 1


def test_adam_zero_grads_leave_params():
    m = _OneParam(0.7)
    before = m.p.data.copy()
    opt = Adam(m.named_parameters(), lr=1e-2)
    m.p.grad = np.zeros(1, dtype=np.float32)
    opt.step()
    np.testing.assert_array_equal(m.p.data, before)
    assert opt.step_count == 1


def test_adam_missing_grad_raises():
    m = _OneParam(0.0)
    opt = Adam(m.named_parameters(), lr=1e-2)
    with pytest.raises(ValueError, match="no gradient"):
        opt.step()


def test_adam_converges_on_quadratic():
    m = _OneParam(1.0)
    opt = Adam(m.named_parameters(), lr=0.05)
    values = []
    for _ in range(50):
        opt.zero_grad()
        m.p.grad = 2.0 * m.p.data  # d(p^2)/dp
        opt.step()
        values.append(float(m.p.data[0] ** 2))
    last = values[-10:]
    assert all(a > b for a, b in zip(last, last[1:]))
    assert last[-1] < values[0]


def test_plateau_scheduler_six_stagnant_epochs():
    m = _OneParam(0.0)
    opt = Adam(m.named_parameters(), lr=1e-4)
    sched = PlateauScheduler(opt, factor=0.1, patience=5)
    sched.step(1.0)
    for _ in range(5):
        sched.step(1.0)
        assert opt.lr == pytest.approx(1e-4)
    sched.step(1.0)  # sixth stagnant epoch
    assert opt.lr == pytest.approx(1e-5)


def test_early_stopper_fires_after_patience():
    stop = EarlyStopper(patience=3)
    assert stop.update(1.0) is False  # improvement from inf
    assert stop.update(1.0) is False
    assert stop.update(1.0) is False
    assert stop.update(1.0) is True


def test_train_early_stops_on_constant_loss():
    # lr = 0 freezes the model, so the validation loss is constant and
    # training must stop at exactly early_stop_patience + 1 epochs
    ds = synth_dataset(seed=5, n=2, size=32)
    cfg = desk_train_config(lr=0.0, max_epochs=30, early_stop_patience=3,
                            image_size=32, batch_size=2, seed=1)
    model_cfg = ModelConfig(variant="T", desk_divisor=8)
    _, history = train(model_cfg, cfg, ds, ds)
    assert len(history) == 4


def test_train_respects_max_epochs_and_history_fields():
    ds = synth_dataset(seed=6, n=2, size=32)
    cfg = desk_train_config(max_epochs=2, image_size=32, batch_size=2, seed=2)
    model, history = train(ModelConfig(variant="T", desk_divisor=8), cfg, ds, ds)
    assert [h.epoch for h in history] == [1, 2]
    assert all(np.isfinite([h.train_loss, h.val_loss, h.lr]).all() for h in history)


def test_lr_monotone_under_plateau_scheduling():
    ds = synth_dataset(seed=6, n=2, size=32)
    cfg = desk_train_config(lr=1e-3, max_epochs=8, image_size=32, batch_size=2,
                            seed=2, scheduler_patience=2, early_stop_patience=50)
    _, history = train(ModelConfig(variant="T", desk_divisor=8), cfg, ds, ds)
    lrs = [h.lr for h in history]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_train_loss_history_reproducible():
    ds = synth_dataset(seed=7, n=3, size=32)
    cfg = desk_train_config(max_epochs=3, image_size=32, batch_size=2, seed=3, augment=True)
    model_cfg = ModelConfig(variant="T", desk_divisor=8)
    _, h1 = train(model_cfg, cfg, ds, ds)
    _, h2 = train(model_cfg, cfg, ds, ds)
    assert [(r.train_loss, r.val_loss, r.lr) for r in h1] == \
           [(r.train_loss, r.val_loss, r.lr) for r in h2]


def test_train_rejects_empty_split():
    ds = synth_dataset(seed=8, n=1, size=32)
    empty = type(ds)([])
    with pytest.raises(ValueError, match="non-empty"):
        train(ModelConfig(desk_divisor=8), desk_train_config(image_size=32), ds, empty)


def test_evaluate_perfect_when_predictions_forced():
    from rmamba.metrics import compute_metrics
    ds = synth_dataset(seed=9, n=3, size=32)
    for stem, image, mask in ds.items:
        rec = compute_metrics(mask[0] >= 0.5, mask[0] >= 0.5)
        assert rec.dice == rec.miou == rec.f2 == 1.0


def test_evaluate_empty_dataset_errors():
    from rmamba.model import build_model
    ds = synth_dataset(seed=10, n=1, size=32)
    model = build_model(ModelConfig(variant="T", desk_divisor=8), seed=0)
    with pytest.raises(ValueError, match="empty"):
        evaluate(model, type(ds)([]))


def test_evaluate_deterministic():
    from rmamba.model import build_model
    ds = synth_dataset(seed=11, n=2, size=32)
    model = build_model(ModelConfig(variant="T", desk_divisor=8), seed=4)
    r1, m1 = evaluate(model, ds)
    r2, m2 = evaluate(model, ds)
    assert [rec.as_row() for _, rec in r1] == [rec.as_row() for _, rec in r2]


def test_checkpoint_roundtrip_evaluation_bitwise(tmp_path):
    from rmamba.checkpoint import load_checkpoint, save_checkpoint
    from rmamba.model import build_model
    ds = synth_dataset(seed=12, n=2, size=32)
    model = build_model(ModelConfig(variant="T", desk_divisor=8), seed=5)
    before, _ = evaluate(model, ds)
    save_checkpoint(tmp_path / "m.ckpt", model, seed=5)
    loaded, _, _ = load_checkpoint(tmp_path / "m.ckpt")
    after, _ = evaluate(loaded, ds)
    assert [rec.as_row() for _, rec in before] == [rec.as_row() for _, rec in after]
