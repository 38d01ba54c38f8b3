"""The four augmentation transforms (flip, 90-degree rotation, center
crop-resize, intensity perturbation), each usable as a stochastic pipeline
transform or, with forced parameters, as a differentiable in-graph layer.

Tensors are channels-last with spatial axes (H, W, D, C); rank-4 single
volumes and rank-5 batches are both accepted (axes are indexed from the
right). All randomness goes through an explicit RngStream; there is no global
RNG use.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

AXIS_H, AXIS_W, AXIS_D, AXIS_C = -4, -3, -2, -1

SHIFT_RANGE = (-0.1, 0.1)
CONTRAST_RANGE = (0.9, 1.1)

CONDITIONS = ("none", "flip", "rotate", "crop", "intensity")


@dataclass
class RngStream:
    """Counter-based RNG: identical (seed, counter) always yields identical
    draws; each draw call advances the counter by one."""

    seed: int
    counter: int = 0

    def _next(self):
        gen = np.random.default_rng([int(self.seed), int(self.counter)])
        self.counter += 1
        return gen

    def uniform(self, low: float, high: float, size=None):
        return self._next().uniform(low, high, size=size)

    def integers(self, low: int, high: int) -> int:
        return int(self._next().integers(low, high))


@dataclass
class AugmentationSpec:
    """Declarative record of one augmentation op and its parameters."""

    kind: str  # flip | rot90 | crop_resize | intensity
    params: dict
    sampled: bool

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "params": self.params, "sampled": self.sampled})

    @classmethod
    def from_json(cls, text: str) -> "AugmentationSpec":
        d = json.loads(text)
        return cls(kind=d["kind"], params=d["params"], sampled=d["sampled"])


def _check_rank(x):
    if x.dim() < 4:
        raise ValueError(f"expected rank-4 (H,W,D,C) or rank-5 (B,H,W,D,C) tensor, got rank {x.dim()}")


def flip_forced(x: torch.Tensor, flip_h: bool, flip_w: bool) -> torch.Tensor:
    _check_rank(x)
    if flip_h:
        x = torch.flip(x, dims=[AXIS_H])
    if flip_w:
        x = torch.flip(x, dims=[AXIS_W])
    return x


def random_flip(x: torch.Tensor, rng: RngStream, p: float = 0.5):
    """Independent random flips along H then W; each axis flips iff its
    uniform draw exceeds 1 - p (for the default p = 0.5: iff b > 0.5)."""
    b_h, b_w = rng.uniform(0.0, 1.0, size=2)
    flip_h, flip_w = bool(b_h > 1.0 - p), bool(b_w > 1.0 - p)
    spec = AugmentationSpec(
        "flip",
        {"flip_h": flip_h, "flip_w": flip_w, "b_h": float(b_h), "b_w": float(b_w)},
        sampled=True,
    )
    return flip_forced(x, flip_h, flip_w), spec


def rot90_forced(x: torch.Tensor, k: int) -> torch.Tensor:
    _check_rank(x)
    if x.shape[AXIS_H] != x.shape[AXIS_W]:
        raise ValueError(
            f"rot90 requires square in-plane dims, got H={x.shape[AXIS_H]} W={x.shape[AXIS_W]}"
        )
    return torch.rot90(x, int(k) % 4, dims=(AXIS_H, AXIS_W))


def random_rot90(x: torch.Tensor, rng: RngStream):
    """Rotate every depth slice by k*90 degrees in the H-W plane, k uniform in
    {0,1,2,3}; depth and channel axes untouched."""
    k = rng.integers(0, 4)
    spec = AugmentationSpec("rot90", {"k": k}, sampled=True)
    return rot90_forced(x, k), spec


def crop_offsets(spatial, crop):
    """Center-crop start offsets: floor((X - X_c) / 2) per axis."""
    return tuple((s - c) // 2 for s, c in zip(spatial, crop))


def center_crop_resize(x: torch.Tensor, crop) -> torch.Tensor:
    """Center-crop to (H_c, W_c, D_c) with offsets floor((X - X_c)/2), then
    resize back to the input spatial shape (trilinear, pixel-center grid
    mapping). Identity when crop equals the input shape."""
    _check_rank(x)
    crop = tuple(int(c) for c in crop)
    spatial = tuple(x.shape[a] for a in (AXIS_H, AXIS_W, AXIS_D))
    for c, s in zip(crop, spatial):
        if c < 1 or c > s:
            raise ValueError(f"crop {crop} out of range for input {spatial}")
    if crop == spatial:
        return x
    offs = crop_offsets(spatial, crop)
    for axis, (off, c) in zip((AXIS_H, AXIS_W, AXIS_D), zip(offs, crop)):
        x = x.narrow(axis, off, c)
    squeeze = x.dim() == 4
    if squeeze:
        x = x.unsqueeze(0)
    x = x.permute(0, 4, 1, 2, 3)
    x = F.interpolate(x, size=spatial, mode="trilinear", align_corners=False)
    x = x.permute(0, 2, 3, 4, 1)
    return x.squeeze(0) if squeeze else x


def intensity_forced(
    x: torch.Tensor, delta: float, alpha: float, use_original_mean: bool = True
) -> torch.Tensor:
    """Brightness shift then contrast scaling about the mean: X'' = a*(X + d)
    + (1 - a)*mu, where mu is the mean of the original tensor (per batch
    item), or of the shifted tensor when use_original_mean=False."""
    _check_rank(x)
    shifted = x + delta
    ref = x if use_original_mean else shifted
    if x.dim() == 4:
        mu = ref.mean()
    else:
        mu = ref.mean(dim=(1, 2, 3, 4), keepdim=True)
    return alpha * shifted + (1.0 - alpha) * mu


def intensity_perturb(x: torch.Tensor, rng: RngStream, use_original_mean: bool = True):
    delta = float(rng.uniform(*SHIFT_RANGE))
    alpha = float(rng.uniform(*CONTRAST_RANGE))
    spec = AugmentationSpec("intensity", {"delta": delta, "alpha": alpha}, sampled=True)
    return intensity_forced(x, delta, alpha, use_original_mean), spec


def small_angle_rotate(x: torch.Tensor, angle_degrees: float) -> torch.Tensor:
    """Optional extension: in-plane rotation by an arbitrary angle (bilinear
    resampling, zero padding outside the volume), rotating each depth slice
    about its center.

    Not part of the standard stream set and unused by default; the canonical
    rotation augmentation is the k*90-degree rot90_forced/random_rot90.
    """
    _check_rank(x)
    squeeze = x.dim() == 4
    if squeeze:
        x = x.unsqueeze(0)
    b, h, w, d, c = x.shape
    flat = x.permute(0, 3, 4, 1, 2).reshape(b * d, c, h, w)
    theta = float(np.deg2rad(angle_degrees))
    mat = torch.tensor(
        [[np.cos(theta), -np.sin(theta), 0.0], [np.sin(theta), np.cos(theta), 0.0]],
        dtype=x.dtype,
    ).expand(b * d, 2, 3)
    grid = F.affine_grid(mat, size=list(flat.shape), align_corners=False)
    out = F.grid_sample(flat, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    out = out.reshape(b, d, c, h, w).permute(0, 3, 4, 1, 2)
    return out.squeeze(0) if squeeze else out


def make_stream_views(x: torch.Tensor, rng: RngStream, crop_shape):
    """Build the four fixed-order stream views (flip, rot90, crop_resize,
    intensity) of one input; returns (views, specs)."""
    v1, s1 = random_flip(x, rng)
    v2, s2 = random_rot90(x, rng)
    v3 = center_crop_resize(x, crop_shape)
    s3 = AugmentationSpec("crop_resize", {"crop_shape": list(crop_shape)}, sampled=False)
    v4, s4 = intensity_perturb(x, rng)
    return (v1, v2, v3, v4), (s1, s2, s3, s4)


def identity_specs(spatial_shape):
    """Per-stream parameter records that make every stream a no-op (used for
    deterministic evaluation)."""
    return (
        AugmentationSpec("flip", {"flip_h": False, "flip_w": False}, sampled=False),
        AugmentationSpec("rot90", {"k": 0}, sampled=False),
        AugmentationSpec("crop_resize", {"crop_shape": list(spatial_shape)}, sampled=False),
        AugmentationSpec("intensity", {"delta": 0.0, "alpha": 1.0}, sampled=False),
    )


def apply_spec(x: torch.Tensor, spec: AugmentationSpec) -> torch.Tensor:
    """Apply one augmentation with the exact parameters recorded in spec."""
    p = spec.params
    if spec.kind == "flip":
        return flip_forced(x, p["flip_h"], p["flip_w"])
    if spec.kind == "rot90":
        return rot90_forced(x, p["k"])
    if spec.kind == "crop_resize":
        return center_crop_resize(x, p["crop_shape"])
    if spec.kind == "intensity":
        return intensity_forced(x, p["delta"], p["alpha"])
    raise ValueError(f"unknown augmentation kind {spec.kind!r}")


def apply_condition(x: torch.Tensor, condition: str, rng: RngStream, crop_shape=None):
    """Apply one named evaluation perturbation to a test input; returns the
    perturbed tensor and the spec actually applied (None for 'none')."""
    if condition == "none":
        return x, None
    if condition == "flip":
        return random_flip(x, rng)
    if condition == "rotate":
        return random_rot90(x, rng)
    if condition == "crop":
        if crop_shape is None:
            raise ValueError("crop condition requires a crop_shape")
        spec = AugmentationSpec("crop_resize", {"crop_shape": list(crop_shape)}, sampled=False)
        return center_crop_resize(x, crop_shape), spec
    if condition == "intensity":
        return intensity_perturb(x, rng)
    raise ValueError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")
