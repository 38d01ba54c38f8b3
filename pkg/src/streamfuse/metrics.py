"""Training loss and 3D reconstruction metrics: composite MSE+SSIM loss,
volumetric SSIM/PSNR, Dice overlap, and the per-sample metric record schema
shared by the evaluation and comparison commands."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

PSNR_CAP_DB = 100.0  # reporting cap for identical volumes (psnr3d itself returns inf)

METRIC_COLUMNS = ("sample_id", "method", "condition", "split", "psnr_db", "ssim", "dice")


class ShapeMismatch(ValueError):
    pass


def _as_volume_tensor(x) -> torch.Tensor:
    """Coerce an array/tensor to a (1, 1, H, W, D) float tensor, squeezing any
    singleton batch/channel dims."""
    if not torch.is_tensor(x):
        x = torch.as_tensor(np.asarray(x))
    squeezed = x.squeeze()
    if squeezed.dim() != 3:
        raise ShapeMismatch(f"expected a single 3D volume, got shape {tuple(x.shape)}")
    return squeezed[None, None]


def ssim3d(
    pred,
    target,
    window: int = 7,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float = 1.0,
) -> torch.Tensor:
    """Mean local SSIM over all valid (window^3) neighborhoods, uniform
    window, sample-covariance normalization. Differentiable."""
    x = _as_volume_tensor(pred)
    y = _as_volume_tensor(target)
    if x.shape != y.shape:
        raise ShapeMismatch(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if min(x.shape[2:]) < window:
        raise ShapeMismatch(f"volume {tuple(x.shape[2:])} smaller than window {window}")
    y = y.to(x.dtype)

    def win_mean(t):
        return F.avg_pool3d(t, kernel_size=window, stride=1)

    ux, uy = win_mean(x), win_mean(y)
    n = window**3
    cov_norm = n / (n - 1)
    vx = cov_norm * (win_mean(x * x) - ux * ux)
    vy = cov_norm * (win_mean(y * y) - uy * uy)
    vxy = cov_norm * (win_mean(x * y) - ux * uy)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    return s.mean()


def psnr3d(pred, target, data_range: float = 1.0) -> float:
    """10*log10(range^2 / MSE) over the whole volume; +inf for identical
    volumes (capped to PSNR_CAP_DB only in reports)."""
    x = _as_volume_tensor(pred).double()
    y = _as_volume_tensor(target).double()
    if x.shape != y.shape:
        raise ShapeMismatch(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    mse = float(((x - y) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def dice(mask_a, mask_b) -> float:
    """Dice overlap 2|A&B| / (|A|+|B|) of two binary volumes; two empty masks
    agree perfectly (1.0)."""
    a = np.asarray(getattr(mask_a, "data", mask_a))
    b = np.asarray(getattr(mask_b, "data", mask_b))
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape mismatch: {a.shape} vs {b.shape}")
    for name, m in (("mask_a", a), ("mask_b", b)):
        if not np.all(np.isin(m, (0, 1))):
            raise ValueError(f"{name} is not binary")
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def composite_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    ssim_weight: float = 0.8,
    pixel_term: str = "mse",
    window: int = 7,
    data_range: float = 1.0,
) -> torch.Tensor:
    """Training loss: pixel term plus ssim_weight * (1 - SSIM). The pixel term
    is mean squared error by default ('mae' switch for sensitivity studies)."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pixel_term == "mse":
        pix = ((pred - target) ** 2).mean()
    elif pixel_term == "mae":
        pix = (pred - target).abs().mean()
    else:
        raise ValueError(f"unknown pixel_term {pixel_term!r}")
    return pix + ssim_weight * (1.0 - ssim3d(pred, target, window=window, data_range=data_range))


@dataclass
class MetricRecord:
    """One evaluation row; psnr_db is capped at PSNR_CAP_DB when the volumes
    were identical."""

    sample_id: str
    method: str
    condition: str
    split: str
    psnr_db: float
    ssim: float
    dice: float | None = None

    @classmethod
    def from_volumes(cls, sample_id, method, condition, split, pred, target, dice_value=None):
        return cls(
            sample_id=sample_id,
            method=method,
            condition=condition,
            split=split,
            psnr_db=min(psnr3d(pred, target), PSNR_CAP_DB),
            ssim=float(ssim3d(pred, target)),
            dice=dice_value,
        )


def write_metric_csv(path, records, manifest_digest: str | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if manifest_digest:
            fh.write(f"# manifest_digest: {manifest_digest}\n")
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.sample_id,
                    r.method,
                    r.condition,
                    r.split,
                    f"{r.psnr_db:.9g}",
                    f"{r.ssim:.9g}",
                    "" if r.dice is None else f"{r.dice:.9g}",
                ]
            )


def read_metric_csv(path) -> list[MetricRecord]:
    records = []
    with open(path, newline="") as fh:
        rows = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(rows)
    if reader.fieldnames is None or tuple(reader.fieldnames) != METRIC_COLUMNS:
        raise ValueError(f"{path}: unexpected metric CSV columns {reader.fieldnames}")
    for row in reader:
        records.append(
            MetricRecord(
                sample_id=row["sample_id"],
                method=row["method"],
                condition=row["condition"],
                split=row["split"],
                psnr_db=float(row["psnr_db"]),
                ssim=float(row["ssim"]),
                dice=float(row["dice"]) if row["dice"] else None,
            )
        )
    return records
