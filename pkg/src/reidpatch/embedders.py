"""Pluggable feature extractors with unit-norm embeddings.

Three architectures are registered: ``small-cnn`` (four conv blocks, used by
the desk-scale tests), ``residual-50`` (torchvision ResNet-50 trunk) and
``osnet-like`` (omni-scale residual blocks with channel gates).

A handle is either ``target_whitebox`` (gradients and feature pyramids
allowed) or ``auxiliary_blackbox`` (embeddings only, never differentiable).
Every handle counts its forward calls in ``calls``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from .errors import RegistryError, RoleViolationError, ShapeError, WeightsLoadError
from .utils import to_tensor

ROLES = ("target_whitebox", "auxiliary_blackbox")
WEIGHTS_VERSION = 1


def _conv_bn_relu(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """Base class: ``stages`` produce the pyramid, ``head`` the raw embedding."""

    arch = "base"
    default_dim = 128

    def __init__(self, embedding_dim, num_classes=0, input_size=(256, 128)):
        super().__init__()
        self.embedding_dim = embedding_dim
        self.input_size = tuple(input_size)
        self.num_classes = num_classes

    def _attach_heads(self, feat_dim):
        self.head = nn.Linear(feat_dim, self.embedding_dim)
        self.neck = nn.BatchNorm1d(self.embedding_dim)
        self.classifier = nn.Linear(self.embedding_dim, self.num_classes, bias=False) if self.num_classes else None

    def pyramid(self, x):
        raise NotImplementedError

    def forward(self, x):
        top = self.pyramid(x)[-1]
        return self.neck(self.head(F.adaptive_avg_pool2d(top, 1).flatten(1)))


class SmallCNN(Backbone):
    arch = "small-cnn"
    default_dim = 128

    def __init__(self, embedding_dim=128, num_classes=0, input_size=(256, 128), width=16):
        super().__init__(embedding_dim, num_classes, input_size)
        w = width
        self.stem = _conv_bn_relu(3, w, stride=2)
        self.stages = nn.ModuleList([
            nn.Sequential(_conv_bn_relu(w, 2 * w), nn.MaxPool2d(2)),
            nn.Sequential(_conv_bn_relu(2 * w, 4 * w), nn.MaxPool2d(2)),
            nn.Sequential(_conv_bn_relu(4 * w, 8 * w), nn.MaxPool2d(2)),
        ])
        self.pyramid_channels = (2 * w, 4 * w, 8 * w)
        self._attach_heads(8 * w)

    def pyramid(self, x):
        x = self.stem(x)
        levels = []
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return levels


class Residual50(Backbone):
    arch = "residual-50"
    default_dim = 512

    def __init__(self, embedding_dim=512, num_classes=0, input_size=(256, 128)):
        super().__init__(embedding_dim, num_classes, input_size)
        net = torchvision.models.resnet50(weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool, net.layer1)
        self.stages = nn.ModuleList([net.layer2, net.layer3, net.layer4])
        self.pyramid_channels = (512, 1024, 2048)
        self._attach_heads(2048)

    def pyramid(self, x):
        x = self.stem(x)
        levels = []
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return levels


class _LiteConv(nn.Module):
    """Pointwise then depthwise 3x3 convolution."""

    def __init__(self, cin, cout):
        super().__init__()
        self.pw = nn.Conv2d(cin, cout, 1, bias=False)
        self.dw = nn.Conv2d(cout, cout, 3, padding=1, groups=cout, bias=False)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x):
        return F.relu(self.bn(self.dw(self.pw(x))))


class _OmniScaleBlock(nn.Module):
    def __init__(self, cin, cout, streams=3):
        super().__init__()
        mid = max(cout // 4, 8)
        self.reduce = nn.Sequential(nn.Conv2d(cin, mid, 1, bias=False), nn.BatchNorm2d(mid), nn.ReLU(inplace=True))
        self.streams = nn.ModuleList(
            nn.Sequential(*[_LiteConv(mid, mid) for _ in range(t + 1)]) for t in range(streams)
        )
        self.gate = nn.Sequential(nn.Linear(mid, max(mid // 4, 4)), nn.ReLU(inplace=True),
                                  nn.Linear(max(mid // 4, 4), mid), nn.Sigmoid())
        self.expand = nn.Sequential(nn.Conv2d(mid, cout, 1, bias=False), nn.BatchNorm2d(cout))
        self.shortcut = (nn.Sequential(nn.Conv2d(cin, cout, 1, bias=False), nn.BatchNorm2d(cout))
                         if cin != cout else nn.Identity())

    def forward(self, x):
        r = self.reduce(x)
        agg = 0
        for stream in self.streams:
            s = stream(r)
            agg = agg + s * self.gate(s.mean((2, 3)))[:, :, None, None]
        return F.relu(self.expand(agg) + self.shortcut(x))


class OSNetLike(Backbone):
    arch = "osnet-like"
    default_dim = 256

    def __init__(self, embedding_dim=256, num_classes=0, input_size=(256, 128), widths=(32, 64, 96, 128)):
        super().__init__(embedding_dim, num_classes, input_size)
        c0, c1, c2, c3 = widths
        self.stem = nn.Sequential(
            nn.Conv2d(3, c0, 5, stride=2, padding=2, bias=False), nn.BatchNorm2d(c0), nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
        )
        self.stages = nn.ModuleList([
            nn.Sequential(_OmniScaleBlock(c0, c1), nn.AvgPool2d(2)),
            nn.Sequential(_OmniScaleBlock(c1, c2), nn.AvgPool2d(2)),
            nn.Sequential(_OmniScaleBlock(c2, c3), nn.AvgPool2d(2)),
        ])
        self.pyramid_channels = (c1, c2, c3)
        self._attach_heads(c3)

    def pyramid(self, x):
        x = self.stem(x)
        levels = []
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return levels


ARCHITECTURES = {cls.arch: cls for cls in (SmallCNN, Residual50, OSNetLike)}


@dataclass
class ModelSpec:
    arch: str
    weights: str = "random"
    seed: int = 0
    embedding_dim: int | None = None
    role: str = "target_whitebox"
    input_size: tuple = (256, 128)
    num_classes: int = 0
    model_id: str | None = None


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    model_id: str


@dataclass(frozen=True)
class FeaturePyramid:
    levels: list


@dataclass(eq=False)
class EmbedderHandle:
    model_id: str
    role: str
    embedding_dim: int
    model: Backbone = field(repr=False)
    calls: int = 0

    @property
    def input_size(self):
        return self.model.input_size

    def _check(self, x):
        if tuple(x.shape[-2:]) != self.input_size:
            raise ShapeError(f"{self.model_id} expects {self.input_size} inputs, got {tuple(x.shape[-2:])}")

    def embed_batch(self, x: torch.Tensor, grad: bool = False) -> torch.Tensor:
        """Unit-norm (N, d) embeddings; differentiable only for white-box handles with ``grad``."""
        self._check(x)
        self.calls += 1
        if grad and self.role != "target_whitebox":
            raise RoleViolationError(f"{self.model_id} is a black-box handle; gradients are not available")
        with torch.set_grad_enabled(grad):
            z = F.normalize(self.model(x), dim=1)
        return z if grad else z.detach()

    def pyramid_batch(self, x: torch.Tensor, grad: bool = False) -> list:
        if self.role != "target_whitebox":
            raise RoleViolationError(f"{self.model_id} is a black-box handle; feature maps are not exposed")
        self._check(x)
        self.calls += 1
        with torch.set_grad_enabled(grad):
            levels = self.model.pyramid(x)
        return levels if grad else [lv.detach() for lv in levels]


def _freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def build_model(arch: str, embedding_dim=None, num_classes=0, input_size=(256, 128), seed=0) -> Backbone:
    try:
        cls = ARCHITECTURES[arch]
    except KeyError:
        raise RegistryError(f"unknown architecture {arch!r}; known: {sorted(ARCHITECTURES)}") from None
    torch.manual_seed(seed)
    return cls(embedding_dim=embedding_dim or cls.default_dim, num_classes=num_classes, input_size=input_size)


def manifest_path(weights_path) -> Path:
    return Path(weights_path).with_suffix(".json")


def save_model(model: Backbone, path, train_dataset: str = "unknown") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    manifest = {
        "arch": model.arch,
        "embedding_dim": model.embedding_dim,
        "num_classes": model.num_classes,
        "input_size": list(model.input_size),
        "train_dataset": train_dataset,
        "version": WEIGHTS_VERSION,
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2))
    return path


def register_embedder(spec) -> EmbedderHandle:
    """Build (or load) a frozen model and wrap it in a handle."""
    if isinstance(spec, dict):
        spec = ModelSpec(**spec)
    if spec.role not in ROLES:
        raise RegistryError(f"unknown role {spec.role!r}")
    if spec.arch not in ARCHITECTURES:
        raise RegistryError(f"unknown architecture {spec.arch!r}; known: {sorted(ARCHITECTURES)}")
    if spec.weights == "random":
        model = build_model(spec.arch, spec.embedding_dim, spec.num_classes, spec.input_size, spec.seed)
    else:
        path = Path(spec.weights)
        if not path.is_file() or not manifest_path(path).is_file():
            raise WeightsLoadError(f"weights file or manifest missing: {path}")
        manifest = json.loads(manifest_path(path).read_text())
        if manifest["arch"] != spec.arch:
            raise WeightsLoadError(f"{path} holds {manifest['arch']!r} weights, not {spec.arch!r}")
        model = build_model(spec.arch, manifest["embedding_dim"], manifest.get("num_classes", 0),
                            tuple(manifest.get("input_size", spec.input_size)), spec.seed)
        try:
            model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
        except (RuntimeError, OSError) as exc:
            raise WeightsLoadError(f"cannot load {path}: {exc}") from exc
    model_id = spec.model_id or f"{spec.arch}:{spec.weights if spec.weights == 'random' else Path(spec.weights).stem}:{spec.seed}"
    return EmbedderHandle(model_id, spec.role, model.embedding_dim, _freeze(model))


def handle_from_model(model: Backbone, role="target_whitebox", model_id=None) -> EmbedderHandle:
    return EmbedderHandle(model_id or model.arch, role, model.embedding_dim, _freeze(model))


def embed(handle: EmbedderHandle, image) -> Embedding:
    """Embed one H x W x 3 image in [-1, 1]."""
    z = handle.embed_batch(to_tensor(image))[0]
    return Embedding(z.numpy().astype(np.float64), handle.model_id)


def features_multiscale(handle: EmbedderHandle, image) -> FeaturePyramid:
    levels = handle.pyramid_batch(to_tensor(image))
    return FeaturePyramid([lv[0].numpy() for lv in levels])


def embed_records(handle: EmbedderHandle, records, batch_size: int = 32) -> np.ndarray:
    from .data import load_batch

    H, W = handle.input_size
    out = []
    for i in range(0, len(records), batch_size):
        x = torch.from_numpy(load_batch(records[i:i + batch_size], H, W))
        out.append(handle.embed_batch(x).numpy())
    return np.concatenate(out).astype(np.float64)


def spec_dict(spec: ModelSpec) -> dict:
    return asdict(spec)
