import numpy as np
import pytest
from PIL import Image

from rmamba.checkpoint import (ChecksumError, ConfigMismatchError,
                               VersionError, load_checkpoint, save_checkpoint)
from rmamba.config import (ModelConfig, TrainConfig, desk_model_config,
                           parse_config_text)
from rmamba.data import (DatasetError, load_dataset, save_dataset_dir,
                         split_dataset, synth_dataset, write_atomic)
from rmamba.model import build_model
from rmamba.trainer import Adam


def _write_png(path, arr):
    Image.fromarray(arr.astype(np.uint8)).save(path)


def _make_pairs(root, n=3, size=48, mask_value=255):
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir(parents=True)
    rng = np.random.default_rng(0)
    for i in range(n):
        _write_png(root / "images" / f"case{i}.png", rng.integers(0, 256, size=(size, size)))
        mask = (rng.uniform(size=(size, size)) > 0.5).astype(np.uint8) * mask_value
        _write_png(root / "masks" / f"case{i}.png", mask)


def test_load_dataset_happy_path(tmp_path):
    _make_pairs(tmp_path, n=3)
    ds = load_dataset(tmp_path, size=32)
    assert len(ds) == 3
    assert ds.ids() == ["case0", "case1", "case2"]
    for _, image, mask in ds.items:
        assert image.shape == (3, 32, 32) and mask.shape == (1, 32, 32)
        assert image.min() >= 0.0 and image.max() <= 1.0
        assert set(np.unique(mask)).issubset({0.0, 1.0})


def test_load_dataset_rgb_and_grayscale_agree_on_channels(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    rgb = np.random.default_rng(1).integers(0, 256, size=(16, 16, 3))
    _write_png(tmp_path / "images" / "a.png", rgb)
    _write_png(tmp_path / "masks" / "a.png", np.full((16, 16), 255))
    ds = load_dataset(tmp_path, size=16)
    assert ds[0][1].shape == (3, 16, 16)


def test_load_dataset_orphan_errors(tmp_path):
    _make_pairs(tmp_path, n=2)
    (tmp_path / "images" / "case1.png").unlink()
    with pytest.raises(DatasetError, match="case1"):
        load_dataset(tmp_path)


def test_load_dataset_nonbinary_mask_names_file(tmp_path):
    _make_pairs(tmp_path, n=1)
    bad = np.full((48, 48), 255, dtype=np.uint8)
    bad[0, 0] = 17
    _write_png(tmp_path / "masks" / "case0.png", bad)
    with pytest.raises(DatasetError, match="case0.*17|17.*case0"):
        load_dataset(tmp_path)


def test_mask_resize_stays_binary(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    half = np.zeros((512, 512), dtype=np.uint8)
    half[:, :256] = 255
    _write_png(tmp_path / "images" / "h.png", half)
    _write_png(tmp_path / "masks" / "h.png", half)
    ds = load_dataset(tmp_path, size=256)
    values = np.unique(ds[0][2])
    assert set(values.tolist()).issubset({0.0, 1.0})
    assert 0.4 < ds[0][2].mean() < 0.6


def test_synth_deterministic_and_fractions():
    a = synth_dataset(seed=3, n=6, size=64)
    b = synth_dataset(seed=3, n=6, size=64)
    for (ida, ia, ma), (idb, ib, mb) in zip(a.items, b.items):
        assert ida == idb
        assert np.array_equal(ia, ib) and np.array_equal(ma, mb)
    for _, image, mask in a.items:
        assert 0.05 <= mask.mean() <= 0.6
        assert image.shape == (3, 64, 64)


def test_synth_single_tiny():
    ds = synth_dataset(seed=0, n=1, size=64)
    assert len(ds) == 1
    assert ds[0][1].shape == (3, 64, 64) and ds[0][2].shape == (1, 64, 64)
    with pytest.raises(ValueError):
        synth_dataset(seed=0, n=0, size=64)


def test_synth_roundtrip_through_disk(tmp_path):
    ds = synth_dataset(seed=4, n=2, size=32)
    save_dataset_dir(ds, tmp_path)
    loaded = load_dataset(tmp_path, size=32)
    assert len(loaded) == 2
    for (sa, ia, ma), (sb, ib, mb) in zip(ds.items, loaded.items):
        assert sa == sb
        np.testing.assert_array_equal(ma, mb)  # masks survive the byte roundtrip


def test_split_deterministic():
    ds = synth_dataset(seed=5, n=10, size=32)
    t1, v1, e1 = split_dataset(ds, seed=7)
    t2, v2, e2 = split_dataset(ds, seed=7)
    assert t1.ids() == t2.ids() and v1.ids() == v2.ids() and e1.ids() == e2.ids()
    assert len(t1) + len(v1) + len(e1) == 10
    assert len(v1) == 1 and len(e1) == 1


def test_write_atomic_no_partial_output(tmp_path):
    target = tmp_path / "out.bin"
    write_atomic(target, b"hello")
    assert target.read_bytes() == b"hello"
    leftovers = [p for p in tmp_path.iterdir() if p.name != "out.bin"]
    assert leftovers == []


def test_checkpoint_roundtrip_bitwise(tmp_path):
    cfg = desk_model_config(variant="T")
    model = build_model(cfg, seed=1)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, seed=1)
    loaded, seed, optim = load_checkpoint(path)
    assert seed == 1 and optim is None
    orig = model.state_arrays()
    for name, arr in loaded.state_arrays().items():
        assert np.array_equal(arr, orig[name]), name


def test_checkpoint_with_optimizer_state(tmp_path):
    cfg = desk_model_config(variant="T")
    model = build_model(cfg, seed=2)
    opt = Adam(model.named_parameters(), lr=1e-3)
    for _, p in opt.named_params:
        p.grad = np.ones_like(p.data)
    opt.step()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, seed=2, optimizer=opt)
    _, _, optim = load_checkpoint(path)
    assert optim is not None and optim["step"] == 1
    name0 = next(iter(opt.m))
    np.testing.assert_array_equal(optim["moments"]["m." + name0], opt.m[name0])


def test_checkpoint_truncated_fails_checksum(tmp_path):
    cfg = desk_model_config(variant="T")
    model = build_model(cfg, seed=3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(ChecksumError):
        load_checkpoint(path)


def test_checkpoint_corrupted_fails_checksum(tmp_path):
    cfg = desk_model_config(variant="T")
    model = build_model(cfg, seed=3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    blob = bytearray(path.read_bytes())
    blob[40] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ChecksumError):
        load_checkpoint(path)


def test_checkpoint_version_rejected(tmp_path):
    cfg = desk_model_config(variant="T")
    model = build_model(cfg, seed=3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    blob = bytearray(path.read_bytes())
    blob[4] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(VersionError):
        load_checkpoint(path)


def test_checkpoint_config_mismatch(tmp_path):
    model = build_model(desk_model_config(variant="T"), seed=3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, expected_config=desk_model_config(variant="S"))
    loaded, _, _ = load_checkpoint(path, expected_config=desk_model_config(variant="T"))
    assert loaded.config.variant == "T"


def test_model_config_defaults_by_variant():
    t = ModelConfig(variant="T").resolved()
    s = ModelConfig(variant="S").resolved()
    assert t.n_extra_vss == 0 and s.n_extra_vss == 1
    assert t.channel_ladder == (96, 192, 384, 768)
    assert sum(s.stage_depths) > sum(t.stage_depths)
    with pytest.raises(ValueError):
        ModelConfig(variant="X").resolved()
    with pytest.raises(ValueError):
        ModelConfig(attention="ATT").resolved()
    with pytest.raises(ValueError):
        ModelConfig(desk_divisor=7).resolved()


def test_parse_config_text_roundtrip():
    text = """
    # model
    variant = S
    n_extra_vss = 2
    attention = RA
    ladder = 96,192,384,768
    desk_divisor = 8
    # training
    lr = 2e-4
    batch_size = 4
    augment = false
    seed = 11
    """
    model_cfg, train_cfg = parse_config_text(text)
    assert model_cfg.variant == "S" and model_cfg.n_extra_vss == 2
    assert model_cfg.attention == "RA" and model_cfg.desk_divisor == 8
    assert train_cfg.lr == 2e-4 and train_cfg.batch_size == 4
    assert train_cfg.augment is False and train_cfg.seed == 11


def test_parse_config_rejects_unknown_or_malformed():
    with pytest.raises(ValueError, match="unknown key"):
        parse_config_text("wat = 1")
    with pytest.raises(ValueError, match="key=value"):
        parse_config_text("just words")
    with pytest.raises(ValueError, match="cannot parse"):
        parse_config_text("lr = fast")


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(scheduler_patience=0)
