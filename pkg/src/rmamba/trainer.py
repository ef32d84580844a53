"""Training protocol: Adam, plateau LR schedule, early stopping, augmentation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .config import ModelConfig, TrainConfig
from .data import Dataset
from .losses import combined_loss
from .metrics import binarize, compute_metrics, mean_metrics
from .model import RMAMamba, build_model
from .tensor import Tape, Tensor, no_grad


# --- augmentation -------------------------------------------------------------

def hflip(image, mask):
    return image[:, :, ::-1].copy(), mask[:, :, ::-1].copy()


def vflip(image, mask):
    return image[:, ::-1, :].copy(), mask[:, ::-1, :].copy()


def rotate_pair(image, mask, angle_deg):
    """Same rotation for both; bilinear for the image, nearest for the mask."""
    img = ndimage.rotate(image, angle_deg, axes=(-2, -1), reshape=False,
                         order=1, mode="constant", cval=0.0)
    msk = ndimage.rotate(mask, angle_deg, axes=(-2, -1), reshape=False,
                         order=0, mode="constant", cval=0.0)
    return img.astype(np.float32), msk.astype(np.float32)


def augment(image, mask, rng, cfg: TrainConfig):
    if image.shape[-2:] != mask.shape[-2:]:
        raise ValueError("augment: image and mask are not spatially aligned")
    if rng.random() < cfg.flip_prob:
        image, mask = hflip(image, mask)
    if rng.random() < cfg.flip_prob:
        image, mask = vflip(image, mask)
    if cfg.rotate_deg > 0:
        angle = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg)
        image, mask = rotate_pair(image, mask, angle)
    return image, mask


# --- optimizer ------------------------------------------------------------------

class Adam:
    def __init__(self, named_params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.named_params:
            g = p.grad
            if g is None:
                raise ValueError(f"adam: parameter {name} has no gradient")
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - (self.lr * update).astype(p.dtype, copy=False)

    def state_arrays(self):
        out = {}
        for name in self.m:
            out["m." + name] = self.m[name]
            out["v." + name] = self.v[name]
        return out

    def load_state(self, state):
        self.step_count = int(state["step"])
        for name in self.m:
            self.m[name] = np.array(state["moments"]["m." + name], dtype=self.m[name].dtype)
            self.v[name] = np.array(state["moments"]["v." + name], dtype=self.v[name].dtype)


class PlateauScheduler:
    """Multiply lr by `factor` after `patience` epochs without improvement."""

    def __init__(self, optimizer, factor=0.1, patience=5):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, metric):
        if metric < self.best:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs > self.patience:
                self.optimizer.lr *= self.factor
                self.bad_epochs = 0


class EarlyStopper:
    def __init__(self, patience=50):
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def update(self, metric) -> bool:
        """Record one epoch; returns True when training should stop."""
        if metric < self.best:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


# --- loop -------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


def _batches(items, batch_size):
    for i in range(0, len(items), batch_size):
        chunk = items[i:i + batch_size]
        images = np.stack([c[0] for c in chunk])
        masks = np.stack([c[1] for c in chunk])
        yield Tensor(images), Tensor(masks)


def validation_loss(model, dataset, batch_size) -> float:
    pairs = [(image, mask) for _, image, mask in dataset.items]
    losses = []
    with no_grad():
        for images, masks in _batches(pairs, batch_size):
            preds = model(images)
            losses.append(combined_loss(preds, masks).item())
    return float(np.mean(losses))


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, train_ds: Dataset,
          val_ds: Dataset, log=None):
    """Run the optimization loop; returns (model at best validation, history).

    Per epoch: shuffle, augment, forward, combined loss, backward, Adam step;
    the validation loss drives the plateau scheduler and early stopping, and
    the best-validation parameters are restored into the returned model.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("train: train and validation splits must be non-empty")
    model = build_model(model_cfg, seed=train_cfg.seed)
    optimizer = Adam(model.named_parameters(), lr=train_cfg.lr)
    scheduler = PlateauScheduler(optimizer, factor=train_cfg.scheduler_factor,
                                 patience=train_cfg.scheduler_patience)
    stopper = EarlyStopper(patience=train_cfg.early_stop_patience)
    rng = np.random.default_rng(train_cfg.seed)
    history = []
    best_val = math.inf
    best_state = model.state_arrays()
    best_state = {k: v.copy() for k, v in best_state.items()}

    for epoch in range(1, train_cfg.max_epochs + 1):
        order = rng.permutation(len(train_ds))
        epoch_items = []
        for i in order:
            stem, image, mask = train_ds[int(i)]
            if train_cfg.augment:
                image, mask = augment(image, mask, rng, train_cfg)
            epoch_items.append((image, mask))
        batch_losses = []
        for images, masks in _batches(epoch_items, train_cfg.batch_size):
            with Tape():
                preds = model(images)
                loss = combined_loss(preds, masks)
                value = loss.item()
                if not math.isfinite(value):
                    raise ArithmeticError(f"non-finite training loss {value} at epoch {epoch}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
            batch_losses.append(value)
        train_loss = float(np.mean(batch_losses))
        val_loss = validation_loss(model, val_ds, train_cfg.batch_size)
        if not math.isfinite(val_loss):
            raise ArithmeticError(f"non-finite validation loss at epoch {epoch}")
        history.append(EpochRecord(epoch, train_loss, val_loss, optimizer.lr))
        if log is not None:
            log(f"epoch {epoch:4d}  train {train_loss:.4f}  val {val_loss:.4f}  lr {optimizer.lr:.2e}")
        if val_loss < best_val:
            best_val = val_loss
            best_state = {k: v.copy() for k, v in model.state_arrays().items()}
        scheduler.step(val_loss)
        if stopper.update(val_loss):
            break

    model.load_state(best_state)
    return model, history


def predict_mask(model: RMAMamba, image: np.ndarray) -> np.ndarray:
    """Binary {0,1} mask at input resolution for one [3,H,W] image."""
    with no_grad():
        preds = model(Tensor(image[None]))
    return binarize(preds.final.data[0, 0]).astype(np.float32)


def evaluate(model: RMAMamba, dataset: Dataset):
    """Deterministic inference over a dataset; per-image records plus means."""
    if len(dataset) == 0:
        raise ValueError("evaluate: dataset is empty")
    records = []
    for stem, image, mask in dataset.items:
        pred = predict_mask(model, image)
        records.append((stem, compute_metrics(pred, mask[0] >= 0.5)))
    mean = mean_metrics([r for _, r in records])
    return records, mean


def train_dice(model: RMAMamba, dataset: Dataset) -> float:
    records, mean = evaluate(model, dataset)
    return mean.dice
