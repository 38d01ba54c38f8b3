"""Volume I/O and preprocessing: NIfTI loading, trilinear resampling,
Hounsfield windowing, intensity normalization, paired-dataset assembly and a
synthetic two-tissue phantom generator for desk-scale experiments.

All operations are pure functions on :class:`Volume`; every output is finite
for finite input.
"""

from __future__ import annotations

import json
import queue
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import nifti

# intensity interval that defines the phantom's "gray matter" tissue class,
# in normalized units (used for the mask and for threshold segmentation of
# predicted volumes)
GRAY_MATTER_INTERVAL = (0.30, 0.52)

# desk-scale default working shape; the full-scale 128x128x64 stays available
DEFAULT_SHAPE = (32, 32, 16)


class ShapeError(ValueError):
    """Raised when volume shapes violate an operation's contract."""


@dataclass
class Volume:
    """A 3D scalar grid with spacing metadata.

    data is float (H, W, D); intensity_units is one of 'HU', 'normalized',
    'arbitrary'. 'normalized' implies all values in [0, 1].
    """

    data: np.ndarray
    spacing: tuple | None = None
    intensity_units: str = "arbitrary"
    affine: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeError(f"volume must be 3D with positive dims, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("volume contains NaN/Inf")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class PairedSample:
    """Aligned (source CT, target MRI, optional binary mask) triple."""

    source: Volume
    target: Volume
    id: str
    mask: Volume | None = None

    def __post_init__(self):
        if self.source.shape != self.target.shape:
            raise ShapeError(
                f"{self.id}: source {self.source.shape} != target {self.target.shape}"
            )
        if self.mask is not None:
            if self.mask.shape != self.source.shape:
                raise ShapeError(f"{self.id}: mask shape {self.mask.shape} mismatch")
            vals = np.unique(self.mask.data)
            if not np.all(np.isin(vals, (0.0, 1.0))):
                raise ValueError(f"{self.id}: mask is not binary")


def load_volume(path) -> Volume:
    """Load a NIfTI-1 volume (3D, or 4D with singleton trailing dim).

    The affine is kept as metadata only; no reorientation or registration is
    performed.
    """
    data, affine, spacing = nifti.read_nifti(path)
    return Volume(data=data, spacing=spacing, intensity_units="arbitrary", affine=affine)


def save_volume(path, vol: Volume):
    """Write a Volume to single-file NIfTI-1 (float32)."""
    spacing = vol.spacing if vol.spacing is not None else (1.0, 1.0, 1.0)
    nifti.write_nifti(path, vol.data, spacing=spacing, affine=vol.affine)


def _linear_resample_axis(data: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    """Linearly resample one axis using the align-corners-false (pixel-center)
    convention with edge clamping."""
    n_in = data.shape[axis]
    if n_out == n_in:
        return data
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    w = src - lo
    shape = [1] * data.ndim
    shape[axis] = n_out
    w = w.reshape(shape)
    return data.take(lo, axis=axis) * (1.0 - w) + data.take(hi, axis=axis) * w


def resample_trilinear(vol: Volume, target_shape) -> Volume:
    """Trilinear resample to target_shape (separable per-axis linear
    interpolation, which is exactly the tensor-product trilinear formula)."""
    target_shape = tuple(int(t) for t in target_shape)
    if len(target_shape) != 3 or min(target_shape) < 1:
        raise ShapeError(f"bad target shape {target_shape}")
    out = vol.data
    for axis in range(3):
        out = _linear_resample_axis(out, axis, target_shape[axis])
    spacing = None
    if vol.spacing is not None:
        spacing = tuple(
            s * n_in / n_out for s, n_in, n_out in zip(vol.spacing, vol.shape, target_shape)
        )
    return replace(vol, data=out, spacing=spacing)


def resample_nearest(vol: Volume, target_shape) -> Volume:
    """Nearest-neighbor resample (same grid convention); preserves binary
    masks, which trilinear interpolation would not."""
    target_shape = tuple(int(t) for t in target_shape)
    out = vol.data
    for axis in range(3):
        n_in, n_out = out.shape[axis], target_shape[axis]
        if n_in == n_out:
            continue
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        idx = np.clip(np.rint(src), 0, n_in - 1).astype(np.int64)
        out = out.take(idx, axis=axis)
    return replace(vol, data=out, spacing=None)


def hu_window(vol: Volume, level: float = 40.0, width: float = 80.0) -> Volume:
    """Map Hounsfield units in [level - width/2, level + width/2] linearly to
    [0, 1], clamping outside; output units become 'normalized'."""
    if width <= 0:
        raise ValueError(f"window width must be positive, got {width}")
    if vol.intensity_units != "HU":
        raise ValueError(f"hu_window requires HU input, got {vol.intensity_units!r}")
    lower = level - width / 2.0
    out = np.clip((vol.data - lower) / width, 0.0, 1.0)
    return replace(vol, data=out, intensity_units="normalized")


def normalize_intensity(vol: Volume) -> Volume:
    """Min-max normalize to [0, 1]; a constant volume maps to all zeros."""
    lo, hi = float(vol.data.min()), float(vol.data.max())
    if hi - lo == 0.0:
        out = np.zeros_like(vol.data)
    else:
        out = (vol.data - lo) / (hi - lo)
    return replace(vol, data=out, intensity_units="normalized")


# ---------------------------------------------------------------------------
# synthetic phantom


def mri_like_remap(v):
    """Fixed smooth monotone intensity remap used to synthesize the phantom's
    MRI-like target from the clean CT-like source.

    Monotone on [0, 1] with g(0) = 0 and g(1) = 1; the logistic term makes the
    curve steepest around the gray-matter level, emphasizing tissue
    boundaries in intensity space.
    """
    v = np.asarray(v, dtype=np.float64)
    s = 1.0 / (1.0 + np.exp(-12.0 * (v - 0.45)))
    s0 = 1.0 / (1.0 + np.exp(12.0 * 0.45))
    s1 = 1.0 / (1.0 + np.exp(-12.0 * 0.55))
    s = (s - s0) / (s1 - s0)
    return 0.55 * v + 0.45 * s


def _ellipsoid(grid, center, semiaxes):
    h, w, d = grid
    return ((h - center[0]) / semiaxes[0]) ** 2 + ((w - center[1]) / semiaxes[1]) ** 2 + (
        (d - center[2]) / semiaxes[2]
    ) ** 2 <= 1.0


def phantom_components(seed: int, shape):
    """Deterministic phantom building blocks for (seed, shape): the clean
    noise-free source, the additive noise field and the gray-matter mask.

    Every phantom shares a head-like layout in canonical orientation: a large
    soft-tissue ellipsoid with a bright nose-like marker on its +H side
    (placements jittered per seed), plus randomly placed gray-matter blobs
    inside the head and a bright bone-like blob. The consistent asymmetry
    gives volumes a recoverable canonical frame, mirroring anatomical
    orientation cues.
    """
    shape = tuple(int(s) for s in shape)
    if min(shape) < 8:
        raise ShapeError(f"phantom dims must be >= 8, got {shape}")
    rng = np.random.default_rng(seed)
    axes = [np.linspace(0.0, 1.0, n) for n in shape]
    grid = np.meshgrid(*axes, indexing="ij")

    clean = np.zeros(shape, dtype=np.float64)
    mask = np.zeros(shape, dtype=bool)
    # soft-tissue class at 0.4, bright (bone-like) class at 0.8; overlaps sum.
    # The head is elongated along H so in-plane rotations genuinely misalign it.
    head_center = rng.uniform(0.42, 0.52, size=3)
    head_semi = np.array(
        [rng.uniform(0.30, 0.36), rng.uniform(0.17, 0.23), rng.uniform(0.24, 0.31)]
    )
    clean += 0.4 * _ellipsoid(grid, head_center, head_semi)
    nose_center = head_center + np.array(
        [head_semi[0] * rng.uniform(0.9, 1.05), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)]
    )
    clean += 0.8 * _ellipsoid(grid, nose_center, rng.uniform(0.07, 0.11, size=3))
    for _ in range(int(rng.integers(2, 5))):
        center = head_center + rng.uniform(-0.16, 0.16, size=3)
        region = _ellipsoid(grid, center, rng.uniform(0.06, 0.14, size=3))
        clean += 0.4 * region
        mask |= region
    clean += 0.8 * _ellipsoid(
        grid, rng.uniform(0.25, 0.75, size=3), rng.uniform(0.05, 0.1, size=3)
    )
    clean = np.clip(clean, 0.0, 1.0)
    noise = rng.normal(0.0, 0.02, size=shape)
    return clean, noise, mask.astype(np.float64)


def make_phantom_pair(seed: int, shape=DEFAULT_SHAPE) -> PairedSample:
    """Deterministic synthetic paired sample: source = clean two-level
    ellipsoid phantom + low noise; target = mri_like_remap(clean); mask =
    gray-matter ellipsoid union."""
    clean, noise, mask = phantom_components(seed, shape)
    source = np.clip(clean + noise, 0.0, 1.0)
    target = mri_like_remap(clean)
    return PairedSample(
        source=Volume(source, intensity_units="normalized"),
        target=Volume(target, intensity_units="normalized"),
        mask=Volume(mask, intensity_units="arbitrary"),
        id=f"phantom-{seed:05d}",
    )


# ---------------------------------------------------------------------------
# dataset assembly


def batch_dataset(samples, batch: int = 1, shuffle_seed: int | None = None):
    """Yield (source, target) float32 torch tensor pairs shaped (B,H,W,D,1).

    Order is the manifest order, or a deterministic permutation of it when
    shuffle_seed is given. The final batch may be smaller.
    """
    if not samples:
        return
    shape = samples[0].source.shape
    for s in samples:
        if s.source.shape != shape:
            raise ShapeError(f"mixed shapes in dataset: {shape} vs {s.source.shape} ({s.id})")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))
    for start in range(0, len(samples), batch):
        chunk = [samples[i] for i in order[start : start + batch]]
        src = np.stack([c.source.data for c in chunk])[..., None]
        tgt = np.stack([c.target.data for c in chunk])[..., None]
        yield (
            torch.from_numpy(src.astype(np.float32)),
            torch.from_numpy(tgt.astype(np.float32)),
        )


def prefetch(iterable, depth: int = 2):
    """Wrap an iterable with a producer thread that keeps `depth` items ready.

    The producer owns the upstream iterator; the consumer sees items in order.
    """
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def worker():
        try:
            for item in iterable:
                q.put(item)
        finally:
            q.put(done)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        yield item


# ---------------------------------------------------------------------------
# manifests


def write_manifest(path, entries):
    """Write a dataset manifest: a JSON list of
    {id, source_path, target_path, mask_path?} records."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(entries, indent=2) + "\n")


def read_manifest(path):
    entries = json.loads(Path(path).read_text())
    if not isinstance(entries, list):
        raise ValueError(f"{path}: manifest must be a JSON list")
    for e in entries:
        for key in ("id", "source_path", "target_path"):
            if key not in e:
                raise ValueError(f"{path}: manifest entry missing {key!r}: {e}")
    return entries


def load_manifest_samples(path, source_units: str = "normalized") -> list[PairedSample]:
    """Load all samples referenced by a manifest. Paths are resolved relative
    to the manifest's directory."""
    path = Path(path)
    base = path.parent
    samples = []
    for e in read_manifest(path):
        src = load_volume(base / e["source_path"])
        src.intensity_units = source_units
        tgt = load_volume(base / e["target_path"])
        tgt.intensity_units = "normalized"
        mask = None
        if e.get("mask_path"):
            mvol = load_volume(base / e["mask_path"])
            mvol.data = (mvol.data > 0.5).astype(np.float64)
            mask = mvol
        samples.append(PairedSample(source=src, target=tgt, mask=mask, id=e["id"]))
    return samples
