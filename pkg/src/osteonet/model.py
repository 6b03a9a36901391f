"""Image/radiomic encoders, softmax fusion gate and hierarchical heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .dataset import NATIVE_INPUT_SIZE
from .errors import ConfigError, InvalidInput, ShapeError
from .radiomics import N_FEATURES

BACKBONES = ("inception_v3", "vit", "efficientnet_b0", "tiny", "linear")
HEAD_TYPES = ("hierarchical", "flat")


@dataclass
class ModelConfig:
    backbone: str = "inception_v3"
    embed_dim: int = 256
    pretrained: bool = True
    use_radiomics: bool = True
    head: str = "hierarchical"
    rad_hidden: int = 128
    gate_hidden: int = 128
    input_size: Optional[tuple[int, int]] = None
    n_features: int = N_FEATURES

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        if self.head not in HEAD_TYPES:
            raise ConfigError(f"unknown head type {self.head!r}; choose from {HEAD_TYPES}")
        if self.embed_dim < 2:
            raise ConfigError("embedding dimension must be at least 2")
        if self.input_size is not None:
            size = self.input_size
            self.input_size = (int(size), int(size)) if np.isscalar(size) else tuple(int(s) for s in size)

    @property
    def spatial_size(self) -> tuple[int, int]:
        if self.input_size is not None:
            return self.input_size
        if self.backbone == "linear":
            raise ConfigError("the linear backbone needs an explicit input_size")
        s = NATIVE_INPUT_SIZE[self.backbone]
        return (s, s)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size) if self.input_size else None
        return d


def _torchvision_trunk(kind: str, pretrained: bool) -> tuple[nn.Module, int]:
    from torchvision import models

    if kind == "inception_v3":
        weights = models.Inception_V3_Weights.IMAGENET1K_V1 if pretrained else None
        net = models.inception_v3(weights=weights, aux_logits=True, init_weights=not pretrained)
        net.aux_logits = False
        net.AuxLogits = None
        dim = net.fc.in_features
        net.fc = nn.Identity()
    elif kind == "vit":
        weights = models.ViT_B_16_Weights.IMAGENET1K_V1 if pretrained else None
        net = models.vit_b_16(weights=weights)
        dim = net.heads.head.in_features
        net.heads = nn.Identity()
    elif kind == "efficientnet_b0":
        weights = models.EfficientNet_B0_Weights.IMAGENET1K_V1 if pretrained else None
        net = models.efficientnet_b0(weights=weights)
        dim = net.classifier[1].in_features
        net.classifier = nn.Identity()
    else:
        raise ConfigError(f"not a torchvision backbone: {kind}")
    return net, dim


def _tiny_trunk() -> tuple[nn.Module, int]:
    def block(cin, cout):
        return [nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]

    net = nn.Sequential(
        *block(3, 16), nn.MaxPool2d(2),
        *block(16, 32), nn.MaxPool2d(2),
        *block(32, 64),
        nn.AdaptiveAvgPool2d(1), nn.Flatten(),
    )
    return net, 64


class ImageEncoder(nn.Module):
    """Backbone trunk (classifier removed) followed by a trainable projection to d."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.expected = (3, *cfg.spatial_size)
        if cfg.backbone == "tiny":
            self.trunk, dim = _tiny_trunk()
        elif cfg.backbone == "linear":
            self.trunk, dim = nn.Flatten(), int(np.prod(self.expected))
        else:
            self.trunk, dim = _torchvision_trunk(cfg.backbone, cfg.pretrained)
        self.proj = nn.Linear(dim, cfg.embed_dim)

    def forward(self, x):
        if tuple(x.shape[1:]) != self.expected:
            raise ShapeError(f"image batch has shape {tuple(x.shape)}, expected (B, {', '.join(map(str, self.expected))})")
        return self.proj(self.trunk(x))


class RadiomicEncoder(nn.Module):
    def __init__(self, n_features: int, hidden: int, d: int):
        super().__init__()
        self.n_features = n_features
        self.net = nn.Sequential(nn.Linear(n_features, hidden), nn.ReLU(), nn.Linear(hidden, d))

    def forward(self, r):
        if r.ndim != 2 or r.shape[1] != self.n_features:
            raise ShapeError(f"radiomic batch has shape {tuple(r.shape)}, expected (B, {self.n_features})")
        if not torch.isfinite(r).all():
            raise InvalidInput("radiomic features contain non-finite values")
        return self.net(r)


class FusionGate(nn.Module):
    """Two-layer MLP scoring the concatenated embeddings; outputs 2 gate logits."""

    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(2 * d, hidden), nn.ReLU(), nn.Linear(hidden, 2))

    def forward(self, z_img, z_rad):
        return self.net(torch.cat([z_img, z_rad], dim=1))


def fuse_with_logits(z_img, z_rad, gate_logits):
    """Convex combination of the two embeddings; returns ``(z, alpha)``."""
    if z_img.shape != z_rad.shape:
        raise ShapeError(f"embedding shapes differ: {tuple(z_img.shape)} vs {tuple(z_rad.shape)}")
    alpha = torch.softmax(gate_logits, dim=1)
    z = alpha[:, :1] * z_img + alpha[:, 1:] * z_rad
    return z, alpha


def fuse(z_img, z_rad, gate: FusionGate):
    if z_img.shape != z_rad.shape:
        raise ShapeError(f"embedding shapes differ: {tuple(z_img.shape)} vs {tuple(z_rad.shape)}")
    return fuse_with_logits(z_img, z_rad, gate(z_img, z_rad))


def hierarchical_distribution(p_a, p_b):
    """Three-way distribution (NT, NVT, VT) from the coarse and fine head probabilities."""
    return torch.stack([p_a[:, 0], p_a[:, 1] * p_b[:, 0], p_a[:, 1] * p_b[:, 1]], dim=1)


@dataclass
class HierarchicalPrediction:
    p_a: torch.Tensor
    p_b: torch.Tensor
    dist3: torch.Tensor


class HierarchicalHeads(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.head_a = nn.Linear(d, 2)  # non-tumor vs. tumor
        self.head_b = nn.Linear(d, 2)  # non-viable vs. viable

    def forward(self, z) -> HierarchicalPrediction:
        p_a = torch.softmax(self.head_a(z), dim=1)
        p_b = torch.softmax(self.head_b(z), dim=1)
        return HierarchicalPrediction(p_a, p_b, hierarchical_distribution(p_a, p_b))


class FlatHead(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.head = nn.Linear(d, 3)

    def forward(self, z):
        return torch.softmax(self.head(z), dim=1)


def predict_class(dist3):
    """Argmax of the three-way distribution; exact ties go to the lower class."""
    if isinstance(dist3, HierarchicalPrediction):
        dist3 = dist3.dist3
    if isinstance(dist3, torch.Tensor):
        return torch.argmax(dist3, dim=-1)
    return np.argmax(np.asarray(dist3), axis=-1)


@dataclass
class ModelOutput:
    dist3: torch.Tensor
    p_a: Optional[torch.Tensor] = None
    p_b: Optional[torch.Tensor] = None
    alpha: Optional[torch.Tensor] = None


class MultimodalNet(nn.Module):
    """Image encoder, optional radiomic branch with gated fusion, and heads.

    Without radiomics the fused representation is the image embedding itself.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.image_encoder = ImageEncoder(cfg)
        if cfg.use_radiomics:
            self.radiomic_encoder = RadiomicEncoder(cfg.n_features, cfg.rad_hidden, d)
            self.gate = FusionGate(d, cfg.gate_hidden)
        if cfg.head == "hierarchical":
            self.heads = HierarchicalHeads(d)
        else:
            self.flat_head = FlatHead(d)

    def forward(self, x_img, x_rad=None) -> ModelOutput:
        z = self.image_encoder(x_img)
        alpha = None
        if self.cfg.use_radiomics:
            if x_rad is None:
                raise InvalidInput("model was built with radiomics but none were given")
            z, alpha = fuse(z, self.radiomic_encoder(x_rad), self.gate)
        if self.cfg.head == "hierarchical":
            pred = self.heads(z)
            return ModelOutput(pred.dist3, pred.p_a, pred.p_b, alpha)
        return ModelOutput(self.flat_head(z), alpha=alpha)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {"image_encoder": list(self.image_encoder.parameters())}
        if self.cfg.use_radiomics:
            groups["radiomic_encoder"] = list(self.radiomic_encoder.parameters())
            groups["gate"] = list(self.gate.parameters())
        if self.cfg.head == "hierarchical":
            groups["head_a"] = list(self.heads.head_a.parameters())
            groups["head_b"] = list(self.heads.head_b.parameters())
        else:
            groups["flat_head"] = list(self.flat_head.parameters())
        return groups

    def summary(self) -> str:
        lines = [f"MultimodalNet(backbone={self.cfg.backbone}, d={self.cfg.embed_dim}, head={self.cfg.head}, "
                 f"radiomics={self.cfg.use_radiomics})"]
        total = 0
        for name, params in self.parameter_groups().items():
            n = sum(p.numel() for p in params)
            total += n
            lines.append(f"  {name:<18}{n:>12,d}")
        lines.append(f"  {'total':<18}{total:>12,d}")
        return "\n".join(lines)
