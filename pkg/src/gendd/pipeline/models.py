"""Desk-scale teacher/student model zoo.

Every backbone maps an input batch to a flat feature vector; teachers add a
linear classifier on top.
"""
from __future__ import annotations

import hashlib

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError


class LinearBackbone(nn.Module):
    def __init__(self, in_shape, feature_dim: int, hidden_dim: int = 0):
        super().__init__()
        self.fc = nn.Linear(_flat(in_shape), feature_dim)

    def forward(self, x):
        return self.fc(x.flatten(1))


class MLPBackbone(nn.Module):
    def __init__(self, in_shape, feature_dim: int, hidden_dim: int = 256):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(_flat(in_shape), hidden_dim), nn.ReLU(),
            nn.Linear(hidden_dim, feature_dim), nn.ReLU(),
        )

    def forward(self, x):
        return self.net(x.flatten(1))


class CNN2Backbone(nn.Module):
    """Two conv layers, global average pool, linear projection."""

    def __init__(self, in_shape, feature_dim: int, hidden_dim: int = 32):
        super().__init__()
        c = in_shape[0]
        self.conv1 = nn.Conv2d(c, hidden_dim, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(hidden_dim)
        self.conv2 = nn.Conv2d(hidden_dim, 2 * hidden_dim, 3, padding=1, stride=2)
        self.bn2 = nn.BatchNorm2d(2 * hidden_dim)
        self.proj = nn.Linear(2 * hidden_dim, feature_dim)

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        x = F.relu(self.bn2(self.conv2(x)))
        return self.proj(F.adaptive_avg_pool2d(x, 1).flatten(1))


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.short = None
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.short is None else self.short(x)))


class CifarResNet(nn.Module):
    """CIFAR ResNet with 6n+2 layers; the "x4" variants use widths 32/64/128/256."""

    def __init__(self, in_shape, depth: int, widths=(32, 64, 128, 256)):
        super().__init__()
        if (depth - 2) % 6:
            raise ConfigError(f"resnet depth must be 6n+2, got {depth}")
        n = (depth - 2) // 6
        self.stem = nn.Sequential(nn.Conv2d(in_shape[0], widths[0], 3, 1, 1, bias=False),
                                  nn.BatchNorm2d(widths[0]), nn.ReLU())
        layers, cin = [], widths[0]
        for i, w in enumerate(widths[1:]):
            for b in range(n):
                layers.append(BasicBlock(cin, w, 2 if (b == 0 and i > 0) else 1))
                cin = w
        self.layers = nn.Sequential(*layers)
        self.feature_dim = cin

    def forward(self, x):
        return F.adaptive_avg_pool2d(self.layers(self.stem(x)), 1).flatten(1)


def _flat(shape) -> int:
    n = 1
    for s in shape:
        n *= int(s)
    return n


ARCHS = ("linear", "mlp", "cnn2", "resnet8x4", "resnet32x4")


def build_backbone(arch: str, in_shape, feature_dim: int, hidden_dim: int) -> nn.Module:
    if arch == "linear":
        return LinearBackbone(in_shape, feature_dim)
    if arch == "mlp":
        return MLPBackbone(in_shape, feature_dim, hidden_dim)
    if arch == "cnn2":
        return CNN2Backbone(in_shape, feature_dim, hidden_dim)
    if arch in ("resnet8x4", "resnet32x4"):
        net = CifarResNet(in_shape, 8 if arch == "resnet8x4" else 32)
        if net.feature_dim != feature_dim:
            raise ConfigError(f"{arch} produces {net.feature_dim}-d features, config says {feature_dim}")
        return net
    raise ConfigError(f"unknown architecture {arch!r}; expected one of {ARCHS}")


class Teacher(nn.Module):
    def __init__(self, backbone: nn.Module, feature_dim: int, num_classes: int):
        super().__init__()
        self.backbone = backbone
        self.classifier = nn.Linear(feature_dim, num_classes)

    def features(self, x):
        return self.backbone(x)

    def forward(self, x):
        return self.classifier(self.backbone(x))


class KLStudent(nn.Module):
    """Student with its own classifier, used only by the logit baseline."""

    def __init__(self, backbone: nn.Module, feature_dim: int, num_classes: int):
        super().__init__()
        self.backbone = backbone
        self.classifier = nn.Linear(feature_dim, num_classes)

    def forward(self, x):
        return self.classifier(self.backbone(x))


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
