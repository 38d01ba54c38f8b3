"""Training protocol: Adam with the composite loss, single-volume batches,
epoch-level validation, learning-rate halving on plateau, best-checkpoint
saving and seeded determinism."""

from __future__ import annotations

import csv
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import augment, models, volio
from .metrics import composite_loss

HISTORY_COLUMNS = ("epoch", "batch", "train_loss", "val_loss", "lr")
EPOCH_SUMMARY_BATCH = -1  # batch index used for the per-epoch summary row


class TrainingDiverged(RuntimeError):
    pass


def set_global_determinism(seed: int):
    """Seed every RNG the pipeline touches (python, numpy, torch); model
    construction after this call is reproducible."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


class PlateauScheduler:
    """Halve the learning rate after the (patience+1)-th consecutive epoch
    without improvement; an improvement of more than min_delta (absolute), or
    a halving, resets the stale counter."""

    def __init__(self, lr0: float, factor: float = 0.5, patience: int = 5, min_delta: float = 1e-6):
        self.lr = lr0
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.stale = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale > self.patience:
                self.lr *= self.factor
                self.stale = 0
        return self.lr


@dataclass
class TrainState:
    epoch: int = 0
    lr: float = 0.0
    plateau_counter: int = 0
    best_val_loss: float = float("inf")
    best_epoch: int = 0
    history: list = field(default_factory=list)  # (epoch, train_loss, val_loss, lr)
    batch_rows: list = field(default_factory=list)  # HISTORY_COLUMNS rows


def _model_inputs(model, src: torch.Tensor, rng: augment.RngStream, training: bool):
    """Build the forward input for one source batch according to the variant:
    na takes the volume as-is; ta augments it (training only); cc/fl take the
    four stream views (identity views at evaluation); bd takes the raw volume
    with in-graph streams resampled per training step."""
    variant = model.config.variant
    crop = model.config.crop_shape
    if variant == "na":
        return src
    if variant == "ta":
        if not training:
            return src
        x, _ = augment.random_flip(src, rng)
        x, _ = augment.random_rot90(x, rng)
        x = augment.center_crop_resize(x, crop)
        x, _ = augment.intensity_perturb(x, rng)
        return x
    if variant in ("cc", "fl"):
        if training:
            views, _ = augment.make_stream_views(src, rng, crop)
        else:
            views = tuple(
                augment.apply_spec(src, s) for s in augment.identity_specs(src.shape[1:4])
            )
        return list(views)
    # bd
    if training:
        model.resample_streams(rng)
    else:
        model.set_identity_streams()
    return src


def evaluate_loss(model, samples, loss_kwargs=None) -> float:
    """Mean composite loss over a sample list, deterministic (eval mode,
    identity streams)."""
    loss_kwargs = loss_kwargs or {}
    model.eval()
    rng = augment.RngStream(0)
    total, count = 0.0, 0
    with torch.no_grad():
        for src, tgt in volio.batch_dataset(samples, batch=1):
            inputs = _model_inputs(model, src, rng, training=False)
            pred = model(inputs)
            total += float(composite_loss(pred, tgt, **loss_kwargs))
            count += 1
    return total / max(count, 1)


def train(
    model,
    train_samples,
    val_samples,
    epochs: int = 300,
    lr0: float = 1e-4,
    patience: int = 5,
    factor: float = 0.5,
    seed: int = 0,
    out_dir=None,
    loss_kwargs: dict | None = None,
    log=None,
):
    """Run the full protocol; returns (model, TrainState).

    When out_dir is given, writes checkpoint.zip on each new best validation
    loss (with a meta sidecar echoing config, seeds and the stream specs of
    the checkpointed epoch) plus history.csv at the end.
    """
    if not train_samples or not val_samples:
        raise ValueError("train and validation sets must be non-empty")
    loss_kwargs = loss_kwargs or {}
    set_global_determinism(seed)
    aug_rng = augment.RngStream(seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr0)
    scheduler = PlateauScheduler(lr0, factor=factor, patience=patience)
    state = TrainState(lr=lr0)
    out_dir = Path(out_dir) if out_dir is not None else None
    started = time.time()

    for epoch in range(1, epochs + 1):
        model.train()
        epoch_specs = []
        losses = []
        for batch_idx, (src, tgt) in enumerate(
            volio.batch_dataset(train_samples, batch=1, shuffle_seed=seed + epoch)
        ):
            inputs = _model_inputs(model, src, aug_rng, training=True)
            if model.config.variant == "bd":
                epoch_specs.append([s.to_json() for s in model.stream_specs])
            optimizer.zero_grad()
            pred = model(inputs)
            loss = composite_loss(pred, tgt, **loss_kwargs)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch} batch {batch_idx} "
                    f"(lr={scheduler.lr:g}); aborting"
                )
            loss.backward()
            optimizer.step()
            losses.append(value)
            state.batch_rows.append((epoch, batch_idx, value, "", scheduler.lr))

        val_loss = evaluate_loss(model, val_samples, loss_kwargs)
        train_loss = float(np.mean(losses))
        lr_before = scheduler.lr
        new_lr = scheduler.step(val_loss)
        if new_lr != lr_before:
            for group in optimizer.param_groups:
                group["lr"] = new_lr
        state.epoch = epoch
        state.lr = new_lr
        state.plateau_counter = scheduler.stale
        state.history.append((epoch, train_loss, val_loss, new_lr))
        state.batch_rows.append((epoch, EPOCH_SUMMARY_BATCH, train_loss, val_loss, new_lr))

        if val_loss < state.best_val_loss:
            state.best_val_loss = val_loss
            state.best_epoch = epoch
            if out_dir is not None:
                meta = {
                    "epoch": epoch,
                    "val_loss": val_loss,
                    "seed": seed,
                    "lr": new_lr,
                    "epochs_total": epochs,
                    "augmentation_specs": epoch_specs,
                }
                models.save_checkpoint(out_dir / "checkpoint.zip", model, meta)
        if log is not None:
            log(
                f"epoch {epoch:3d}/{epochs} train {train_loss:.5f} val {val_loss:.5f} "
                f"lr {new_lr:g} best {state.best_val_loss:.5f} "
                f"[{time.time() - started:.0f}s]"
            )

    if out_dir is not None:
        write_history_csv(out_dir / "history.csv", state.batch_rows)
    return model, state


def write_history_csv(path, rows, manifest_digest: str | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if manifest_digest:
            fh.write(f"# manifest_digest: {manifest_digest}\n")
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for epoch, batch, train_loss, val_loss, lr in rows:
            writer.writerow(
                [
                    epoch,
                    batch,
                    f"{train_loss:.9g}",
                    "" if val_loss == "" else f"{val_loss:.9g}",
                    f"{lr:.9g}",
                ]
            )


def read_history_csv(path):
    rows = []
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    for row in csv.DictReader(lines):
        rows.append(
            (
                int(row["epoch"]),
                int(row["batch"]),
                float(row["train_loss"]),
                float(row["val_loss"]) if row["val_loss"] else None,
                float(row["lr"]),
            )
        )
    return rows
