"""Conditional encoder-decoder patch generator.

A frozen backbone yields a three-level feature pyramid for the source and
target images. The top source and target levels are fused to 512 channels,
then four up-blocks double the resolution, each concatenating a target skip:
the two lower pyramid levels first, then the target image itself resized to
the block's resolution (the pyramid has no level that fine). A 3x3 conv plus
tanh gives the RGB patch, bilinearly resized to (h, w) when the decoder
output differs.

In untargeted mode every target input is replaced by a learned constant of
the same shape. In latent mode the head emits a latent perturbation instead
of RGB; ``PatchAttacker`` decodes it through a frozen latent pipeline.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .embedders import Backbone, build_model
from .errors import MissingTargetError, ShapeError
from .utils import to_tensor

FUSED_CHANNELS = 512


def _rms_normalize(x):
    return x / (x.pow(2).mean(dim=(1, 2, 3), keepdim=True).sqrt() + 1e-6)


class FeatureFusion(nn.Module):
    """Channel concatenation followed by a learned 1x1 convolution."""

    def __init__(self, source_channels, target_channels, out_channels=FUSED_CHANNELS):
        super().__init__()
        self.conv = nn.Conv2d(source_channels + target_channels, out_channels, 1)

    def forward(self, source_top, target_top):
        if source_top.shape[-2:] != target_top.shape[-2:]:
            raise ShapeError(f"cannot fuse {tuple(source_top.shape[-2:])} with {tuple(target_top.shape[-2:])} maps")
        return self.conv(torch.cat([source_top, target_top], dim=1))


class UpBlock(nn.Module):
    """x2 transpose conv, concat target skip, 3x3 conv, ReLU, batch norm."""

    def __init__(self, in_channels, skip_channels, out_channels):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_channels, out_channels, 4, stride=2, padding=1)
        self.conv = nn.Conv2d(out_channels + skip_channels, out_channels, 3, padding=1)
        self.bn = nn.BatchNorm2d(out_channels)

    def forward(self, x, target_skip):
        expected = (2 * x.shape[-2], 2 * x.shape[-1])
        if tuple(target_skip.shape[-2:]) != expected:
            raise ShapeError(f"skip is {tuple(target_skip.shape[-2:])}, expected {expected}")
        x = self.up(x)
        x = torch.cat([x, target_skip], dim=1)
        return self.bn(F.relu(self.conv(x)))


class PatchGenerator(nn.Module):
    """The trainable parameters (theta) of the patch generator."""

    def __init__(self, level_shapes, image_size=(256, 128), patch_size=(64, 64), conditioning="untargeted",
                 widths=(256, 128, 64, 32), latent_shape=None, noise_dim=0):
        super().__init__()
        if conditioning not in ("targeted", "untargeted"):
            raise ValueError(f"unknown conditioning {conditioning!r}")
        self.level_shapes = [tuple(s) for s in level_shapes]
        self.image_size = tuple(image_size)
        self.patch_size = tuple(patch_size)
        self.conditioning = conditioning
        self.latent_shape = tuple(latent_shape) if latent_shape else None
        self.noise_dim = noise_dim

        (c0, h0, w0), (c1, h1, w1), (c2, h2, w2) = self.level_shapes
        if (h1, w1) != (2 * h2, 2 * w2) or (h0, w0) != (4 * h2, 4 * w2):
            raise ShapeError(f"pyramid levels must halve in size, got {self.level_shapes}")
        self.top_hw = (h2, w2)
        self.fuse = FeatureFusion(c2, c2)
        skip_channels = (c1, c0, 3, 3)
        blocks, cin = [], FUSED_CHANNELS
        for cs, cout in zip(skip_channels, widths):
            blocks.append(UpBlock(cin, cs, cout))
            cin = cout
        self.blocks = nn.ModuleList(blocks)
        self.decoder_hw = (16 * h2, 16 * w2)
        head_out = self.latent_shape[0] if self.latent_shape else 3
        self.head = nn.Conv2d(cin, head_out, 3, padding=1)
        if self.latent_shape:
            self.delta_scale = nn.Parameter(torch.tensor(0.1))

        if conditioning == "untargeted":
            self.const_top = nn.Parameter(torch.zeros(1, c2, h2, w2))
            self.const_skips = nn.ParameterList([
                nn.Parameter(torch.zeros(1, c1, h1, w1)),
                nn.Parameter(torch.zeros(1, c0, h0, w0)),
                nn.Parameter(torch.zeros(1, 3, 8 * h2, 8 * w2)),
                nn.Parameter(torch.zeros(1, 3, 16 * h2, 16 * w2)),
            ])
        if noise_dim:
            self.noise_proj = nn.Linear(noise_dim, FUSED_CHANNELS)

    def target_inputs(self, target_levels, target_image, n):
        """Target top map and the four skip tensors (learned constants if untargeted)."""
        if self.conditioning == "untargeted":
            return self.const_top.expand(n, -1, -1, -1), [c.expand(n, -1, -1, -1) for c in self.const_skips]
        if target_levels is None or target_image is None:
            raise MissingTargetError("targeted generation needs target features and image")
        h2, w2 = self.top_hw
        img_skips = [F.interpolate(target_image, size=(8 * h2, 8 * w2), mode="bilinear", align_corners=False),
                     F.interpolate(target_image, size=(16 * h2, 16 * w2), mode="bilinear", align_corners=False)]
        return target_levels[2], [target_levels[1], target_levels[0]] + img_skips

    def forward(self, source_top, target_levels=None, target_image=None, noise=None):
        n = source_top.shape[0]
        target_top, skips = self.target_inputs(
            None if target_levels is None else [_rms_normalize(t) for t in target_levels], target_image, n)
        x = self.fuse(_rms_normalize(source_top), target_top)
        if self.noise_dim:
            if noise is None:
                noise = torch.zeros(n, self.noise_dim)
            x = x + self.noise_proj(noise)[:, :, None, None]
        for block, skip in zip(self.blocks, skips):
            x = block(x, skip)
        x = self.head(x)
        if self.latent_shape:
            return self.delta_scale * F.adaptive_avg_pool2d(x, self.latent_shape[1:])
        x = torch.tanh(x)
        if tuple(x.shape[-2:]) != self.patch_size:
            x = F.interpolate(x, size=self.patch_size, mode="bilinear", align_corners=False)
        return x


def pyramid_shapes(backbone: Backbone, image_size) -> list:
    with torch.no_grad():
        levels = backbone.pyramid(torch.zeros(1, 3, *image_size))
    return [tuple(lv.shape[1:]) for lv in levels]


@dataclass
class BackboneSpec:
    arch: str = "residual-50"
    seed: int = 0
    weights: str = "random"


def build_backbone(spec: BackboneSpec, image_size=(256, 128)) -> Backbone:
    from .embedders import register_embedder

    handle = register_embedder({"arch": spec.arch, "weights": spec.weights, "seed": spec.seed,
                                "input_size": tuple(image_size)})
    return handle.model


class PatchAttacker:
    """Inference bundle: frozen backbone + generator (+ frozen latent pipeline)."""

    def __init__(self, generator: PatchGenerator, backbone: Backbone, backbone_spec: BackboneSpec | None = None,
                 pipeline=None, clean_latent=None):
        self.generator = generator
        self.backbone = backbone
        self.backbone_spec = backbone_spec or BackboneSpec()
        self.pipeline = pipeline
        self.clean_latent = clean_latent
        if generator.latent_shape and (pipeline is None or clean_latent is None):
            raise ValueError("latent-mode generators need a pipeline and a clean latent")

    @property
    def patch_size(self):
        return self.generator.patch_size

    @property
    def conditioning(self):
        return self.generator.conditioning

    @torch.no_grad()
    def features(self, images: torch.Tensor) -> list:
        return self.backbone.pyramid(images)

    def delta_to_patch(self, delta):
        from .naturalizer import decode_latent, perturb_latent

        latent = perturb_latent(self.clean_latent.expand_as(delta), delta)
        return decode_latent(self.pipeline, latent, self.patch_size)

    def patches(self, source_top, target_levels=None, target_image=None, noise=None):
        out = self.generator(source_top, target_levels, target_image, noise)
        if self.generator.latent_shape:
            return self.delta_to_patch(out)
        return out

    def patches_from_images(self, sources: torch.Tensor, targets: torch.Tensor | None = None, noise=None):
        if self.conditioning == "targeted" and targets is None:
            raise MissingTargetError("targeted generator needs target images")
        src_top = self.features(sources)[-1]
        tgt_levels = self.features(targets) if self.conditioning == "targeted" else None
        return self.patches(src_top, tgt_levels, targets if self.conditioning == "targeted" else None, noise)


def generate_patch(attacker: PatchAttacker, I_s, I_t=None) -> np.ndarray:
    """One forward pass; returns an h x w x 3 patch in [-1, 1]."""
    if attacker.conditioning == "targeted" and I_t is None:
        raise MissingTargetError("targeted generator needs a target image")
    was_training = attacker.generator.training
    attacker.generator.eval()
    try:
        with torch.no_grad():
            src = to_tensor(I_s)
            tgt = to_tensor(I_t) if I_t is not None and attacker.conditioning == "targeted" else None
            patch = attacker.patches_from_images(src, tgt)
    finally:
        attacker.generator.train(was_training)
    return patch[0].permute(1, 2, 0).numpy()


def save_generator(attacker: PatchAttacker, path, epoch: int, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    g = attacker.generator
    torch.save(g.state_dict(), path)
    manifest = {
        "h": g.patch_size[0],
        "w": g.patch_size[1],
        "conditioning": g.conditioning,
        "image_size": list(g.image_size),
        "level_shapes": [list(s) for s in g.level_shapes],
        "latent_shape": list(g.latent_shape) if g.latent_shape else None,
        "noise_dim": g.noise_dim,
        "backbone_id": attacker.backbone_spec.arch,
        "backbone_seed": attacker.backbone_spec.seed,
        "backbone_weights": attacker.backbone_spec.weights,
        "epoch": epoch,
    }
    if extra:
        manifest.update(extra)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2))
    return path


def load_generator(path, pipeline=None, clean_latent=None) -> PatchAttacker:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    gen = PatchGenerator(manifest["level_shapes"], manifest["image_size"], (manifest["h"], manifest["w"]),
                         manifest["conditioning"], latent_shape=manifest.get("latent_shape"),
                         noise_dim=manifest.get("noise_dim", 0))
    gen.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    gen.eval()
    spec = BackboneSpec(manifest["backbone_id"], manifest["backbone_seed"], manifest.get("backbone_weights", "random"))
    backbone = build_backbone(spec, manifest["image_size"])
    return PatchAttacker(gen, backbone, spec, pipeline, clean_latent)
