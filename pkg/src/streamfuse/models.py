"""The five model configurations over the shared backbone:

- na / ta: single encoder-decoder stream (ta differs only by pipeline-time
  augmentation during training);
- cc: four non-shared encoders fused by channel concatenation;
- fl: four non-shared encoders fused by concatenation + 1x1x1 bottleneck conv;
- bd: one shared encoder over four in-graph differentiable augmentation
  streams, mixed by softmax attention weights from a controller network.

All forwards take and return channels-last tensors; outputs are
(B, H, W, D, 1) with values in (0, 1).
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import augment
from .backbone import Decoder, Encoder, OutputHead, SkipDecoder

VARIANTS = ("na", "ta", "cc", "fl", "bd")

# reference trainable-parameter counts of the original full-scale models, used
# only to annotate our own counts (never targeted)
PUBLISHED_PARAM_COUNTS = {"na": 4_428_545, "ta": 4_428_545, "cc": 13_725_953, "fl": 10_760_577, "bd": 273_265_538}


class ConfigError(ValueError):
    pass


class UsageError(ValueError):
    pass


def default_crop_shape(input_shape):
    """Scale the standard 100-of-128 center crop to the working shape."""
    return tuple(max(1, int(round(s * 100 / 128))) for s in input_shape)


@dataclass
class ModelConfig:
    variant: str
    input_shape: tuple = (32, 32, 16)
    in_channels: int = 1
    widths: tuple = (64, 128, 256)
    fuse_channels: int = 128
    controller_hidden: int = 64
    crop_shape: tuple | None = None
    dropout_rate: float = 0.2
    decoder_skips: bool | None = None  # None -> variant default (na/ta: True)

    def __post_init__(self):
        self.variant = str(self.variant).lower()
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 3 or any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be three positive ints, got {self.widths}")
        if self.crop_shape is None:
            self.crop_shape = default_crop_shape(self.input_shape)
        else:
            self.crop_shape = tuple(int(c) for c in self.crop_shape)
        if self.decoder_skips is None:
            self.decoder_skips = self.variant in ("na", "ta")

    @property
    def decoder_widths(self):
        return (self.widths[1], self.widths[0])

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        for key in ("input_shape", "widths", "crop_shape"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


# ---------------------------------------------------------------------------
# fusion operations


def fuse_cc(h1, h2, h3, h4):
    """Channel-wise concatenation of four bottleneck feature maps."""
    maps = (h1, h2, h3, h4)
    spatial = tuple(h1.shape[:-1])
    for h in maps[1:]:
        if tuple(h.shape[:-1]) != spatial:
            raise ValueError(f"spatial mismatch in fusion: {spatial} vs {tuple(h.shape[:-1])}")
    return torch.cat(maps, dim=-1)


class FuseFL(nn.Module):
    """Concatenate four streams, then a learned 1x1x1 bottleneck convolution
    down to out_channels."""

    def __init__(self, stream_channels: int, out_channels: int = 128):
        super().__init__()
        self.conv = nn.Conv3d(4 * stream_channels, out_channels, 1)

    def forward(self, h1, h2, h3, h4):
        cat = fuse_cc(h1, h2, h3, h4)
        return self.conv(cat.permute(0, 4, 1, 2, 3)).permute(0, 2, 3, 4, 1)


class Controller(nn.Module):
    """Computes per-stream attention: alpha_k = softmax_k(w . ReLU(W gap_k)),
    where gap_k is global average pooling of the k-th bottleneck map. Holds
    the learned projections W (d x C) and w (d) and the last alpha vector."""

    def __init__(self, channels: int = 256, hidden: int = 64):
        super().__init__()
        self.W = nn.Parameter(torch.empty(hidden, channels))
        self.w = nn.Parameter(torch.empty(hidden))
        nn.init.kaiming_uniform_(self.W, a=5**0.5)
        nn.init.uniform_(self.w, -(1.0 / hidden**0.5), 1.0 / hidden**0.5)
        self.last_alphas = None

    def forward(self, feature_maps):
        logits = []
        for h in feature_maps:
            gap = h.mean(dim=(1, 2, 3))  # (B, C)
            logits.append(F.relu(gap @ self.W.T) @ self.w)  # (B,)
        alphas = torch.softmax(torch.stack(logits, dim=-1), dim=-1)  # (B, K)
        self.last_alphas = alphas.detach()
        return alphas


def controller_alphas(h1, h2, h3, h4, controller: Controller):
    """Functional form of the controller attention over four feature maps."""
    return controller([h1, h2, h3, h4])


def fuse_bd(x, aug_fns, encoder, controller):
    """Shared-encoder augmentation fusion: sum_k alpha_k * f(A_k(x)).

    aug_fns are four fixed-parameter augmentation callables; returns the
    fused bottleneck map and the alpha vector.
    """
    feature_maps = [encoder(fn(x))[0] for fn in aug_fns]
    alphas = controller(feature_maps)
    fused = sum(
        alphas[:, k].view(-1, 1, 1, 1, 1) * feature_maps[k] for k in range(len(feature_maps))
    )
    return fused, alphas


# ---------------------------------------------------------------------------
# model variants


def _check_input(x, config: ModelConfig):
    if not torch.is_tensor(x) or x.dim() != 5:
        raise UsageError(f"expected a rank-5 (B,H,W,D,C) tensor, got {getattr(x, 'shape', x)}")
    if tuple(x.shape[1:4]) != config.input_shape or x.shape[4] != config.in_channels:
        raise UsageError(
            f"input shape {tuple(x.shape[1:])} does not match config "
            f"{config.input_shape + (config.in_channels,)}"
        )


class SingleStreamModel(nn.Module):
    """na / ta: encoder -> decoder (skip connections by default) -> head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        w = config.widths
        self.encoder = Encoder(config.in_channels, w, config.dropout_rate)
        if config.decoder_skips:
            self.decoder = SkipDecoder(w[2], config.decoder_widths, (w[1], w[0]), config.dropout_rate)
            head_in = config.decoder_widths[1]
        else:
            self.decoder = Decoder(w[2], config.decoder_widths, config.dropout_rate)
            head_in = config.decoder_widths[0]
        self.head = OutputHead(head_in)

    def forward(self, x):
        if isinstance(x, (list, tuple)):
            raise UsageError(f"{self.config.variant} takes a single input tensor")
        _check_input(x, self.config)
        bottleneck, skips = self.encoder(x)
        if self.config.decoder_skips:
            decoded = self.decoder(bottleneck, skips)
        else:
            decoded = self.decoder(bottleneck)
        return self.head(decoded)


class MultiEncoderModel(nn.Module):
    """cc / fl: four identical but non-shared encoders over pre-augmented
    views, fused at the bottleneck, one skipless decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        w = config.widths
        self.encoders = nn.ModuleList(
            Encoder(config.in_channels, w, config.dropout_rate) for _ in range(4)
        )
        if config.variant == "fl":
            self.fuse = FuseFL(w[2], config.fuse_channels)
            decoder_in = config.fuse_channels
        else:
            self.fuse = None
            decoder_in = 4 * w[2]
        self.decoder = Decoder(decoder_in, config.decoder_widths, config.dropout_rate)
        self.head = OutputHead(config.decoder_widths[0])

    def forward(self, views):
        if not isinstance(views, (list, tuple)) or len(views) != 4:
            got = len(views) if isinstance(views, (list, tuple)) else type(views).__name__
            raise UsageError(f"{self.config.variant} takes exactly 4 stream views, got {got}")
        for v in views:
            _check_input(v, self.config)
        maps = [enc(v)[0] for enc, v in zip(self.encoders, views)]
        if self.fuse is not None:
            fused = self.fuse(*maps)
        else:
            fused = fuse_cc(*maps)
        return self.head(self.decoder(fused))


class ControllerFusionModel(nn.Module):
    """bd: differentiable in-graph augmentation streams, one shared encoder,
    controller-weighted fusion, skipless decoder.

    Stream parameters are plain attributes (resampled per training step via
    resample_streams, identity at evaluation); they are not trainable
    parameters, so parameter counts cover only the network weights.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        w = config.widths
        self.encoder = Encoder(config.in_channels, w, config.dropout_rate)
        self.controller = Controller(w[2], config.controller_hidden)
        self.decoder = Decoder(w[2], config.decoder_widths, config.dropout_rate)
        self.head = OutputHead(config.decoder_widths[0])
        self.stream_specs = augment.identity_specs(config.input_shape)

    def resample_streams(self, rng: augment.RngStream):
        """Draw fresh per-stream parameters (flip decisions, rotation k,
        intensity delta/alpha); the crop stream keeps its configured shape."""
        _, flip_spec = augment.random_flip(torch.zeros(1, 1, 1, 1), rng)
        k = rng.integers(0, 4)
        delta = float(rng.uniform(*augment.SHIFT_RANGE))
        alpha = float(rng.uniform(*augment.CONTRAST_RANGE))
        self.stream_specs = (
            flip_spec,
            augment.AugmentationSpec("rot90", {"k": k}, sampled=True),
            augment.AugmentationSpec(
                "crop_resize", {"crop_shape": list(self.config.crop_shape)}, sampled=False
            ),
            augment.AugmentationSpec("intensity", {"delta": delta, "alpha": alpha}, sampled=True),
        )
        return self.stream_specs

    def set_identity_streams(self):
        self.stream_specs = augment.identity_specs(self.config.input_shape)

    @property
    def last_alphas(self):
        return self.controller.last_alphas

    def forward(self, x):
        if isinstance(x, (list, tuple)):
            raise UsageError("bd takes the raw volume, not pre-augmented views")
        _check_input(x, self.config)
        aug_fns = [lambda t, s=s: augment.apply_spec(t, s) for s in self.stream_specs]
        fused, _ = fuse_bd(x, aug_fns, self.encoder, self.controller)
        return self.head(self.decoder(fused))


def build(config: ModelConfig) -> nn.Module:
    """Construct the configured variant (call set_global_determinism first
    for reproducible initialization)."""
    if config.variant in ("na", "ta"):
        return SingleStreamModel(config)
    if config.variant in ("cc", "fl"):
        return MultiEncoderModel(config)
    return ControllerFusionModel(config)


def count_params(model: nn.Module):
    """Return (trainable, non_trainable) parameter counts."""
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    frozen = sum(p.numel() for p in model.parameters() if not p.requires_grad)
    return trainable, frozen


def parameter_report(configs=None) -> str:
    """Tabulate trainable / non-trainable counts for every variant next to
    the reference counts, annotating match or deviation."""
    if configs is None:
        configs = {v: ModelConfig(variant=v, input_shape=(128, 128, 64)) for v in VARIANTS}
    lines = [f"{'variant':8s} {'trainable':>14s} {'non-trainable':>14s} {'published':>14s}  note"]
    for variant, cfg in configs.items():
        model = build(cfg)
        trainable, frozen = count_params(model)
        published = PUBLISHED_PARAM_COUNTS.get(variant)
        if published is None:
            note = ""
        elif trainable == published:
            note = "matches reference count"
        else:
            note = (
                f"deviates from reference count by {trainable - published:+d} "
                "(architecture details such as projection/upsampling placement are "
                "under-specified in the source; counts are reported, not tuned)"
            )
        lines.append(f"{variant:8s} {trainable:14d} {frozen:14d} {published or 0:14d}  {note}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# checkpoints: a zip archive of named float arrays plus a JSON config echo


def save_checkpoint(path, model: nn.Module, meta: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("config.json", model.config.to_json())
        zf.writestr("meta.json", json.dumps(meta or {}, indent=2))
        for name, tensor in model.state_dict().items():
            buf = io.BytesIO()
            np.save(buf, tensor.detach().cpu().numpy())
            zf.writestr(f"weights/{name}.npy", buf.getvalue())


def load_checkpoint(path):
    """Rebuild the model from its config echo and load the saved weights;
    returns (model, meta)."""
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        config = ModelConfig.from_json(zf.read("config.json").decode())
        meta = json.loads(zf.read("meta.json").decode())
        model = build(config)
        state = {}
        for name, tensor in model.state_dict().items():
            arr = np.load(io.BytesIO(zf.read(f"weights/{name}.npy")))
            state[name] = torch.from_numpy(arr).to(tensor.dtype)
        model.load_state_dict(state)
    model.eval()
    return model, meta
