"""Dataset ingestion, synthetic data generation, and image file I/O.

On disk: a dataset root holds `images/` and `masks/` with files paired by
stem; 8-bit grayscale or RGB PNG/PGM images, masks strictly {0, 255}.
In memory: images are [3, S, S] float32 in [0, 1] (grayscale replicated),
masks are [1, S, S] float32 in {0, 1}.
"""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_EXTS = (".png", ".pgm")


class DatasetError(ValueError):
    """Bad dataset layout or file contents; the message names the path."""


class Dataset:
    def __init__(self, items):
        # items: list of (id, image [3,S,S], mask [1,S,S])
        self.items = list(items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def ids(self):
        return [it[0] for it in self.items]


def _resize_channel(arr, size, resample):
    if arr.shape == (size, size):
        return arr.astype(np.float32)
    img = Image.fromarray(arr.astype(np.float32), mode="F")
    return np.asarray(img.resize((size, size), resample=resample), dtype=np.float32)


def load_image(path, size) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img = img.convert("RGB") if img.mode not in ("L", "I;16") else img.convert("L")
            arr = np.asarray(img, dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"unreadable image {path}: {exc}") from exc
    arr = arr / 255.0
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=0)  # replicate grayscale
    else:
        arr = arr.transpose(2, 0, 1)
    chans = [_resize_channel(c, size, Image.BILINEAR) for c in arr]
    return np.clip(np.stack(chans, axis=0), 0.0, 1.0)


def load_mask(path, size) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"))
    except (OSError, ValueError) as exc:
        raise DatasetError(f"unreadable mask {path}: {exc}") from exc
    values = np.unique(arr)
    bad = [int(v) for v in values if v not in (0, 255)]
    if bad:
        raise DatasetError(f"mask {path} contains non-binary values {bad}; expected only 0 and 255")
    binary = (arr == 255).astype(np.float32)
    resized = _resize_channel(binary, size, Image.NEAREST)
    return resized[None]


def load_dataset(root, size=256) -> Dataset:
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    for d in (img_dir, mask_dir):
        if not d.is_dir():
            raise DatasetError(f"missing dataset directory {d}")
    images = {p.stem: p for p in sorted(img_dir.iterdir()) if p.suffix.lower() in IMAGE_EXTS}
    masks = {p.stem: p for p in sorted(mask_dir.iterdir()) if p.suffix.lower() in IMAGE_EXTS}
    orphan_imgs = sorted(set(images) - set(masks))
    orphan_masks = sorted(set(masks) - set(images))
    if orphan_imgs:
        raise DatasetError(f"image without mask partner: {images[orphan_imgs[0]]}")
    if orphan_masks:
        raise DatasetError(f"mask without image partner: {masks[orphan_masks[0]]}")
    if not images:
        raise DatasetError(f"no image/mask pairs found under {root}")
    items = []
    for stem in sorted(images):  # deterministic lexicographic order
        items.append((stem, load_image(images[stem], size), load_mask(masks[stem], size)))
    return Dataset(items)


# --- synthetic data -----------------------------------------------------------

def _blob_mask(rng, size):
    """Random smooth closed contour filled on the pixel grid."""
    cy, cx = (size / 2.0) * (1.0 + rng.uniform(-0.2, 0.2, size=2))
    r0 = rng.uniform(0.22, 0.33) * size
    n_harm = 4
    amps = rng.uniform(0.0, 0.1, size=n_harm)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_harm)
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    theta = np.arctan2(dy, dx)
    radius = r0 * (1.0 + sum(a * np.cos((k + 2) * theta + p)
                             for k, (a, p) in enumerate(zip(amps, phases))))
    return (np.hypot(dy, dx) <= radius).astype(np.float32)


def _texture(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / size
    fy, fx = rng.uniform(2.0, 6.0, size=2)
    py, px = rng.uniform(0.0, 2.0 * np.pi, size=2)
    return 0.5 * (np.sin(2.0 * np.pi * fy * yy + py) + np.sin(2.0 * np.pi * fx * xx + px))


def synth_sample(rng, size):
    """One organ-like blob on a darker textured background, with exact mask."""
    for _ in range(50):
        mask = _blob_mask(rng, size)
        frac = mask.mean()
        if 0.05 <= frac <= 0.6:
            break
    else:  # pragma: no cover - radius bounds keep fractions in range
        raise RuntimeError("failed to draw a blob with valid foreground fraction")
    base = 0.22 + 0.05 * _texture(rng, size)
    bright = rng.uniform(0.35, 0.5)
    image = base + mask * (bright + 0.04 * _texture(rng, size))
    image = image + rng.normal(0.0, 0.025, size=(size, size))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return np.stack([image] * 3, axis=0), mask[None].astype(np.float32)


def synth_dataset(seed, n, size=256) -> Dataset:
    if n < 1:
        raise ValueError("synth_dataset: n must be >= 1")
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n):
        image, mask = synth_sample(rng, size)
        items.append((f"synth_{i:04d}", image, mask))
    return Dataset(items)


def split_dataset(ds: Dataset, seed, val_fraction=0.1, test_fraction=0.1):
    """Deterministic shuffle split into (train, val, test)."""
    n = len(ds)
    order = np.random.default_rng(seed).permutation(n)
    n_val = max(1, round(n * val_fraction)) if n >= 3 else 0
    n_test = max(1, round(n * test_fraction)) if n >= 3 else 0
    val_idx = order[:n_val]
    test_idx = order[n_val:n_val + n_test]
    train_idx = order[n_val + n_test:]
    pick = lambda idx: Dataset([ds[i] for i in sorted(idx)])
    return pick(train_idx), pick(val_idx), pick(test_idx)


# --- writing -------------------------------------------------------------------

def write_atomic(path, data: bytes):
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _encode_image(arr_u8, suffix) -> bytes:
    import io
    buf = io.BytesIO()
    fmt = "PPM" if suffix == ".pgm" else "PNG"
    Image.fromarray(arr_u8).save(buf, format=fmt)
    return buf.getvalue()


def save_mask_file(path, mask01):
    """Write a {0,1} mask as an 8-bit {0,255} PNG/PGM, atomically."""
    path = Path(path)
    arr = np.atleast_2d(np.asarray(mask01).squeeze())
    arr = (arr >= 0.5).astype(np.uint8) * 255
    write_atomic(path, _encode_image(arr, path.suffix.lower()))


def save_gray_file(path, values01):
    """Write a [0,1] map as an 8-bit grayscale PNG/PGM, atomically."""
    path = Path(path)
    arr = np.atleast_2d(np.asarray(values01).squeeze())
    arr = np.clip(arr * 255.0, 0, 255).astype(np.uint8)
    write_atomic(path, _encode_image(arr, path.suffix.lower()))


def save_dataset_dir(ds: Dataset, out_dir):
    out = Path(out_dir)
    for stem, image, mask in ds.items:
        save_gray_file(out / "images" / f"{stem}.png", image[0])
        save_mask_file(out / "masks" / f"{stem}.png", mask)
    return out
