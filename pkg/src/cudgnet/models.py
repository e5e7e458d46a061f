"""Task model (WideResNet), projection head and the feature tap used by the generator."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .generator import DomainGenerator, PerturbationParams

TAP_STAGES = ("after_block1", "after_block2")


@dataclass
class TaskModelConfig:
    depth: int = 16
    widen_factor: int = 4
    num_classes: int = 10
    tap_stage: str = "after_block1"
    proj_dim: int = 128
    dropout: float = 0.0
    in_channels: int = 3

    def __post_init__(self):
        if (self.depth - 4) % 6 != 0 or self.depth < 10:
            raise ValueError(f"WideResNet depth must satisfy (depth - 4) % 6 == 0, got {self.depth}")
        if self.tap_stage not in TAP_STAGES:
            raise ValueError(f"tap_stage must be one of {TAP_STAGES}, got {self.tap_stage!r}")
        if self.proj_dim < 2:
            raise ValueError("proj_dim must be >= 2")
        if self.widen_factor < 1:
            raise ValueError("widen_factor must be >= 1")

    @property
    def widths(self):
        k = self.widen_factor
        return (16, 16 * k, 32 * k, 64 * k)

    @property
    def tap_channels(self):
        return self.widths[1] if self.tap_stage == "after_block1" else self.widths[2]


class BasicBlock(nn.Module):
    def __init__(self, in_planes, out_planes, stride, dropout=0.0):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_planes)
        self.conv1 = nn.Conv2d(in_planes, out_planes, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_planes)
        self.conv2 = nn.Conv2d(out_planes, out_planes, 3, stride=1, padding=1, bias=False)
        self.dropout = dropout
        self.equal_in_out = in_planes == out_planes and stride == 1
        self.shortcut = None if self.equal_in_out else nn.Conv2d(in_planes, out_planes, 1, stride=stride, bias=False)

    def forward(self, x):
        o = F.relu(self.bn1(x))
        y = self.conv1(o)
        y = F.relu(self.bn2(y))
        if self.dropout > 0:
            y = F.dropout(y, p=self.dropout, training=self.training)
        y = self.conv2(y)
        return y + (x if self.equal_in_out else self.shortcut(o))


def _group(n, in_planes, out_planes, stride, dropout):
    layers = [BasicBlock(in_planes if i == 0 else out_planes, out_planes, stride if i == 0 else 1, dropout)
              for i in range(n)]
    return nn.Sequential(*layers)


class WideResNet(nn.Module):
    """WRN-d-k for 32x32 inputs, split around the feature tap."""

    def __init__(self, cfg: TaskModelConfig):
        super().__init__()
        self.cfg = cfg
        n = (cfg.depth - 4) // 6
        w = cfg.widths
        self.conv1 = nn.Conv2d(cfg.in_channels, w[0], 3, padding=1, bias=False)
        self.block1 = _group(n, w[0], w[1], 1, cfg.dropout)
        self.block2 = _group(n, w[1], w[2], 2, cfg.dropout)
        self.block3 = _group(n, w[2], w[3], 2, cfg.dropout)
        self.bn = nn.BatchNorm2d(w[3])
        self.fc = nn.Linear(w[3], cfg.num_classes)
        self.feature_dim = w[3]

        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Linear):
                nn.init.zeros_(m.bias)

    def features_to_tap(self, x):
        h = self.block1(self.conv1(x))
        if self.cfg.tap_stage == "after_block2":
            h = self.block2(h)
        return h

    def features_from_tap(self, h):
        if self.cfg.tap_stage == "after_block1":
            h = self.block2(h)
        h = F.relu(self.bn(self.block3(h)))
        return F.adaptive_avg_pool2d(h, 1).flatten(1)

    def forward(self, x):
        return self.fc(self.features_from_tap(self.features_to_tap(x)))


class ProjectionHead(nn.Module):
    """One fully connected layer mapping pooled features to the contrastive space."""

    def __init__(self, in_dim: int, proj_dim: int = 128, bias: bool = True):
        super().__init__()
        self.fc = nn.Linear(in_dim, proj_dim, bias=bias)

    def forward(self, v):
        return self.fc(v)


@dataclass
class ForwardOutputs:
    logits: torch.Tensor
    h: torch.Tensor
    z: torch.Tensor
    pooled: torch.Tensor
    y_plus: torch.Tensor | None = None
    params: PerturbationParams | None = None
    lam: torch.Tensor | None = None
    extras: dict = field(default_factory=dict)


class CUDGNet(nn.Module):
    """Task model M, projection head P and generator G behind one forward.

    ``mode="clean"`` runs M unchanged. ``mode="perturbed"`` replaces the tapped
    feature ``h`` by the generator's mixed feature before the remaining layers.
    Passing ``h=`` reuses already computed tap features.
    """

    def __init__(self, cfg: TaskModelConfig | None = None, **generator_kwargs):
        super().__init__()
        self.cfg = cfg or TaskModelConfig()
        self.backbone = WideResNet(self.cfg)
        self.projection = ProjectionHead(self.backbone.feature_dim, self.cfg.proj_dim)
        self.generator = DomainGenerator(self.cfg.tap_channels, **generator_kwargs)

    def task_parameters(self):
        return list(self.backbone.parameters()) + list(self.projection.parameters())

    def generator_parameters(self):
        return list(self.generator.parameters())

    def tap(self, x):
        return self.backbone.features_to_tap(x)

    def forward(self, x=None, mode: str = "clean", y=None, *, h=None, **gen_kwargs) -> ForwardOutputs:
        if mode not in ("clean", "perturbed"):
            raise ValueError(f"mode must be 'clean' or 'perturbed', got {mode!r}")
        if h is None:
            h = self.tap(x)
        if mode == "clean":
            pooled = self.backbone.features_from_tap(h)
            return ForwardOutputs(self.backbone.fc(pooled), h, self.projection(pooled), pooled, y_plus=y)
        gen = self.generator(h, y, **gen_kwargs)
        pooled = self.backbone.features_from_tap(gen["h_mixed"])
        return ForwardOutputs(
            self.backbone.fc(pooled), h, self.projection(pooled), pooled,
            y_plus=gen["y_plus"], params=gen["params"], lam=gen["lam"], extras=gen,
        )


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
