"""Networks: speaker encoder, per-speaker weight heads, lip-reading backbone.

The backbone exposes two injection sites. Per-speaker weight maps from the
heads multiply the feature tensors at those sites elementwise; a ``None`` map
is the identity. The enhancement activation keeps its weights in [1, inf), the
suppression activation keeps its weights in (0, 1], so "no head" and "head
emitting exactly 1" are the same computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .data import VideoClip

SITE_SHALLOW = "shallow"
SITE_DEEP = "deep"
SITE_BACKEND = "backend"
SITE_TAGS = (SITE_SHALLOW, SITE_DEEP, SITE_BACKEND)


def sigma_enhance(h: Tensor) -> Tensor:
    """Map pre-activations to [1, inf): 1 + |LeakyReLU(h)|."""
    return 1.0 + torch.abs(F.leaky_relu(h, negative_slope=0.01))


def sigma_suppress(h: Tensor) -> Tensor:
    """Map pre-activations to (0, 1]: 1 - |tanh(h)|.

    Computed as 2*sigmoid(-2|h|), which is the same function but keeps
    precision deep into saturation where tanh(|h|) would round to 1. The
    floor at the smallest normal float preserves strict positivity (a weight
    of exactly zero would erase a feature channel for good).
    """
    out = 2.0 * torch.sigmoid(-2.0 * torch.abs(h))
    return torch.clamp(out, min=torch.finfo(out.dtype).tiny)


@dataclass
class ModelConfig:
    """Shapes and switches for the full model. Height/width must be multiples of 8."""

    n_classes: int = 10
    task: str = "word"  # "word" -> class logits, "sentence" -> per-frame CTC logits
    frames: int = 16
    height: int = 32
    width: int = 32
    d_id: int = 64
    verifier_channels: tuple[int, int] = (8, 16)
    frontend_channels: int = 16
    block_channels: tuple[int, int, int, int] = (16, 16, 32, 32)
    backend_hidden: int = 48
    head_seed_channels: int = 8
    use_enhancement: bool = True
    use_suppression: bool = True

    def validate(self) -> None:
        if self.task not in ("word", "sentence"):
            raise ValueError("task must be 'word' or 'sentence'")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.height % 8 or self.width % 8 or self.height < 8 or self.width < 8:
            raise ValueError("height and width must be multiples of 8")
        if self.frames < 5:
            raise ValueError("frames must be >= 5 (speaker encoder receptive field)")
        for name in ("d_id", "frontend_channels", "backend_hidden", "head_seed_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def shallow_site_shape(self) -> tuple[int, int, int]:
        return (self.block_channels[0], self.height // 2, self.width // 2)

    @property
    def deep_site_shape(self) -> tuple[int, int, int]:
        return (self.block_channels[3], self.height // 8, self.width // 8)

    @property
    def n_logits(self) -> int:
        # Sentence mode appends a blank class for the sequence criterion.
        return self.n_classes + (1 if self.task == "sentence" else 0)


@dataclass
class BackboneActivations:
    """Intermediate tensors from one backbone pass, post any weighting."""

    shallow: Tensor  # (B, T, C1, H/2, W/2)
    deep: Tensor  # (B, T, C4, H/8, W/8)
    backend: Tensor  # (B, T, 2 * hidden)
    logits: Tensor  # word: (B, n_classes); sentence: (B, T, n_classes + 1)

    def by_tag(self, tag: str) -> Tensor:
        if tag not in SITE_TAGS:
            raise ValueError(f"unknown activation tag {tag!r}")
        return getattr(self, tag)


def _gn_groups(channels: int) -> int:
    for g in (4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class ResidualBlock2d(nn.Module):
    """Two 3x3 convs with GroupNorm; 1x1 shortcut when shape changes."""

    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.norm1 = nn.GroupNorm(_gn_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, stride=1, padding=1, bias=False)
        self.norm2 = nn.GroupNorm(_gn_groups(c_out), c_out)
        if stride != 1 or c_in != c_out:
            self.skip = nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False)
        else:
            self.skip = nn.Identity()

    def forward(self, x: Tensor) -> Tensor:
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(h + self.skip(x))


class SpeakerVerifier(nn.Module):
    """Clip-level speaker embedding: two (2+1)D conv blocks, pooled, GRU summary.

    Temporal receptive field is 5 frames (two temporal k=3 convs), so clips
    shorter than that are rejected.
    """

    temporal_receptive_field = 5

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c1, c2 = cfg.verifier_channels
        self.space1 = nn.Conv3d(1, c1, (1, 5, 5), stride=(1, 2, 2), padding=(0, 2, 2))
        self.time1 = nn.Conv3d(c1, c1, (3, 1, 1), padding=(1, 0, 0))
        self.norm1 = nn.GroupNorm(_gn_groups(c1), c1)
        self.space2 = nn.Conv3d(c1, c2, (1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1))
        self.time2 = nn.Conv3d(c2, c2, (3, 1, 1), padding=(1, 0, 0))
        self.norm2 = nn.GroupNorm(_gn_groups(c2), c2)
        self.summary = nn.GRU(c2, cfg.d_id, batch_first=True)

    def forward(self, clips: Tensor) -> Tensor:
        if clips.dim() != 5:
            raise ValueError("expected (B, 1, T, H, W) input")
        if clips.shape[2] < self.temporal_receptive_field:
            raise ValueError(
                f"need at least {self.temporal_receptive_field} frames, got {clips.shape[2]}"
            )
        h = F.relu(self.norm1(self.time1(self.space1(clips))))
        h = F.relu(self.norm2(self.time2(self.space2(h))))
        h = h.mean(dim=(3, 4)).transpose(1, 2)  # (B, T, C)
        _, final = self.summary(h)
        return final[0]  # (B, d_id)


class WeightHead(nn.Module):
    """Embedding -> per-speaker pre-activation map for one injection site.

    A linear layer shapes a small seed map which two transposed convolutions
    grow to the site's spatial size (stride 2 where upsampling is needed).
    """

    def __init__(self, d_id: int, seed_channels: int, site_shape: tuple[int, int, int]):
        super().__init__()
        c_out, height, width = site_shape
        seed_h = height if height <= 4 else height // 4
        seed_w = width if width <= 4 else width // 4
        strides = []
        for out_dim, seed_dim in ((height, seed_h), (width, seed_w)):
            factor = out_dim // seed_dim
            if factor == 1:
                strides.append((1, 1))
            elif factor == 2:
                strides.append((2, 1))
            elif factor == 4:
                strides.append((2, 2))
            else:
                raise ValueError(f"cannot grow seed {seed_dim} to {out_dim}")
        (s1h, s2h), (s1w, s2w) = strides
        self.seed_shape = (seed_channels, seed_h, seed_w)
        self.site_shape = site_shape
        self.project = nn.Linear(d_id, seed_channels * seed_h * seed_w)
        self.grow1 = self._tconv(seed_channels, seed_channels, (s1h, s1w))
        self.grow2 = self._tconv(seed_channels, c_out, (s2h, s2w))
        # Near-identity start: tiny pre-activations make the map ~1 when the
        # head comes online, so a later training stage is not disrupted.
        # Exactly zero would pin the map's subgradient at zero and never train.
        with torch.no_grad():
            self.grow2.weight.mul_(0.01)
            self.grow2.bias.zero_()

    @staticmethod
    def _tconv(c_in: int, c_out: int, stride: tuple[int, int]) -> nn.ConvTranspose2d:
        kernel = tuple(4 if s == 2 else 3 for s in stride)
        padding = tuple(1 for _ in stride)
        return nn.ConvTranspose2d(c_in, c_out, kernel, stride=stride, padding=padding)

    def forward(self, theta: Tensor) -> Tensor:
        if theta.dim() == 1:
            theta = theta.unsqueeze(0)
        seed = self.project(theta).reshape(theta.shape[0], *self.seed_shape)
        h = F.leaky_relu(self.grow1(seed), negative_slope=0.01)
        return self.grow2(h)  # (B, C, H_site, W_site), pre-activation


class LipReader(nn.Module):
    """(2+1)D frontend, four residual blocks, bidirectional GRU, output head.

    Weight maps passed to forward() multiply the shallow site (block 1 output)
    and the deep site (block 4 output); None leaves a site untouched.
    """

    temporal_receptive_field = 3

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        fc = cfg.frontend_channels
        b1, b2, b3, b4 = cfg.block_channels
        self.front_space = nn.Conv3d(1, fc, (1, 5, 5), stride=(1, 2, 2), padding=(0, 2, 2))
        self.front_norm1 = nn.GroupNorm(_gn_groups(fc), fc)
        self.front_time = nn.Conv3d(fc, fc, (3, 1, 1), padding=(1, 0, 0))
        self.front_norm2 = nn.GroupNorm(_gn_groups(fc), fc)
        self.block1 = ResidualBlock2d(fc, b1, stride=1)
        self.block2 = ResidualBlock2d(b1, b2, stride=2)
        self.block3 = ResidualBlock2d(b2, b3, stride=2)
        self.block4 = ResidualBlock2d(b3, b4, stride=1)
        self.backend = nn.GRU(
            b4, cfg.backend_hidden, num_layers=3, batch_first=True, bidirectional=True
        )
        self.head = nn.Linear(2 * cfg.backend_hidden, cfg.n_logits)

    @staticmethod
    def _apply_map(feats: Tensor, weights: Tensor | None, batch: int, site: str) -> Tensor:
        """Multiply (B*T, C, H, W) features by per-clip (B, C, H, W) maps."""
        if weights is None:
            return feats
        n_frames = feats.shape[0] // batch
        c, h, w = feats.shape[1:]
        if weights.shape != (batch, c, h, w):
            raise ValueError(
                f"{site} weight map shape {tuple(weights.shape)} does not match "
                f"site shape {(batch, c, h, w)}"
            )
        expanded = weights.unsqueeze(1).expand(batch, n_frames, c, h, w)
        return feats * expanded.reshape(batch * n_frames, c, h, w)

    def forward(
        self,
        clips: Tensor,
        enh_weights: Tensor | None = None,
        sup_weights: Tensor | None = None,
    ) -> BackboneActivations:
        if clips.dim() != 5:
            raise ValueError("expected (B, 1, T, H, W) input")
        batch, _, n_frames = clips.shape[:3]
        if n_frames < self.temporal_receptive_field:
            raise ValueError(f"need at least {self.temporal_receptive_field} frames")
        h = F.relu(self.front_norm1(self.front_space(clips)))
        h = F.relu(self.front_norm2(self.front_time(h)))
        # Per-frame spatial processing: fold time into the batch.
        h = h.transpose(1, 2).reshape(batch * n_frames, h.shape[1], *h.shape[3:])
        h = self.block1(h)
        h = self._apply_map(h, enh_weights, batch, "shallow")
        shallow = h.reshape(batch, n_frames, *h.shape[1:])
        h = self.block4(self.block3(self.block2(h)))
        h = self._apply_map(h, sup_weights, batch, "deep")
        deep = h.reshape(batch, n_frames, *h.shape[1:])
        pooled = deep.mean(dim=(3, 4))  # (B, T, C)
        # Temporal mean normalisation: static per-clip offsets (texture,
        # lighting) cancel so the recurrent part sees motion, not identity.
        pooled = pooled - pooled.mean(dim=1, keepdim=True)
        backend, _ = self.backend(pooled)
        if self.cfg.task == "word":
            logits = self.head(backend.mean(dim=1))
        else:
            logits = self.head(backend)
        return BackboneActivations(shallow=shallow, deep=deep, backend=backend, logits=logits)


class LipAdaptModel(nn.Module):
    """Backbone plus speaker encoder and optional enhancement/suppression heads.

    ``enh_active``/``sup_active`` record whether a trained head should be
    applied by default; conditioned_forward can override per call.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.verifier = SpeakerVerifier(cfg)
        self.backbone = LipReader(cfg)
        self.enh_head = (
            WeightHead(cfg.d_id, cfg.head_seed_channels, cfg.shallow_site_shape)
            if cfg.use_enhancement
            else None
        )
        self.sup_head = (
            WeightHead(cfg.d_id, cfg.head_seed_channels, cfg.deep_site_shape)
            if cfg.use_suppression
            else None
        )
        self.enh_active = False
        self.sup_active = False

    def embed_speaker(self, clips: Tensor) -> Tensor:
        return self.verifier(clips)

    def enhancement_weights(self, theta: Tensor) -> Tensor:
        if self.enh_head is None:
            raise RuntimeError("model was built without an enhancement head")
        return sigma_enhance(self.enh_head(theta))

    def suppression_weights(self, theta: Tensor) -> Tensor:
        if self.sup_head is None:
            raise RuntimeError("model was built without a suppression head")
        return sigma_suppress(self.sup_head(theta))

    def conditioned_forward(
        self,
        clips: Tensor,
        apply_enh: bool | None = None,
        apply_sup: bool | None = None,
    ):
        """Full pass: embed the speaker, build weight maps, run the backbone.

        Returns (activations, theta, enh_weights, sup_weights); the latter
        three are None when unused.
        """
        apply_enh = self.enh_active if apply_enh is None else apply_enh
        apply_sup = self.sup_active if apply_sup is None else apply_sup
        if apply_enh and self.enh_head is None:
            raise RuntimeError("cannot apply enhancement: head not present")
        if apply_sup and self.sup_head is None:
            raise RuntimeError("cannot apply suppression: head not present")
        theta = None
        enh_w = None
        sup_w = None
        if apply_enh or apply_sup:
            theta = self.embed_speaker(clips)
            if apply_enh:
                enh_w = self.enhancement_weights(theta)
            if apply_sup:
                sup_w = self.suppression_weights(theta)
        acts = self.backbone(clips, enh_weights=enh_w, sup_weights=sup_w)
        return acts, theta, enh_w, sup_w

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {
            "verifier": list(self.verifier.parameters()),
            "backbone": list(self.backbone.parameters()),
        }
        if self.enh_head is not None:
            groups["enh_head"] = list(self.enh_head.parameters())
        if self.sup_head is not None:
            groups["sup_head"] = list(self.sup_head.parameters())
        return groups


_MODEL_SEED_SALT = 0xB41E


def build_model(cfg: ModelConfig, seed: int) -> LipAdaptModel:
    """Construct a model with parameter init driven only by (cfg, seed)."""
    torch.manual_seed((int(seed) ^ _MODEL_SEED_SALT) & 0x7FFFFFFF)
    return LipAdaptModel(cfg)


def stack_clips(clips: list[VideoClip], device=None) -> Tensor:
    """(B, 1, T, H, W) float tensor from a list of clips."""
    if not clips:
        raise ValueError("empty clip list")
    arr = np.stack([c.frames for c in clips])[:, None]
    return torch.from_numpy(arr).to(device=device)
