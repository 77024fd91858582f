"""Naturalistic patch synthesis.

Two routes:
  * latent perturbation: a frozen latent pipeline (encoder, denoiser,
    decoder) decodes ``l + delta``; only the generator emitting ``delta``
    is trained.
  * GAN realism: a patch discriminator is trained against natural crops
    and its score enters the generator objective.

Pipelines are loaded from a local directory holding ``manifest.json``.
``format: tiny`` is the bundled small autoencoder (state dict in
``pipeline.pt``); ``format: diffusers`` wraps a local ``AutoencoderKL``
checkpoint and needs the optional ``diffusers`` package.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DependencyError, ShapeError
from .utils import param_checksum

EPS = 1e-7
LATENT_CHANNELS = 4


def perturb_latent(l: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    if l.shape != delta.shape:
        raise ShapeError(f"latent {tuple(l.shape)} and perturbation {tuple(delta.shape)} differ")
    return l + delta


def latent_regularizer(delta: torch.Tensor, weight: float = 0.01) -> torch.Tensor:
    """Squared L2 penalty on the latent perturbation."""
    return weight * delta.pow(2).sum()


def gan_discriminator_loss(real_scores, fake_scores) -> torch.Tensor:
    real = torch.as_tensor(real_scores, dtype=torch.float64 if not torch.is_tensor(real_scores) else None)
    fake = torch.as_tensor(fake_scores, dtype=torch.float64 if not torch.is_tensor(fake_scores) else None)
    real = real.clamp(EPS, 1 - EPS)
    fake = fake.clamp(EPS, 1 - EPS)
    return -(torch.log(real).mean() + torch.log(1 - fake).mean())


def gan_generator_loss(fake_scores, adv_loss=0.0, lambda_adv: float = 1.0) -> torch.Tensor:
    fake = torch.as_tensor(fake_scores, dtype=torch.float64 if not torch.is_tensor(fake_scores) else None)
    fake = fake.clamp(EPS, 1 - EPS)
    return -torch.log(fake).mean() + lambda_adv * adv_loss


class PatchDiscriminator(nn.Module):
    """Small conv net scoring realism in (0, 1)."""

    def __init__(self, width=32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(width, 2 * width, 4, 2, 1), nn.BatchNorm2d(2 * width), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * width, 4 * width, 4, 2, 1), nn.BatchNorm2d(4 * width), nn.LeakyReLU(0.2, inplace=True),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(4 * width, 1),
        )

    def forward(self, x):
        return torch.sigmoid(self.net(x)).squeeze(1)


class TinyLatentPipeline(nn.Module):
    """x8 downsampling autoencoder with a residual latent denoiser."""

    downsample = 8

    def __init__(self, latent_channels=LATENT_CHANNELS, width=32):
        super().__init__()
        w = width
        self.encoder = nn.Sequential(
            nn.Conv2d(3, w, 3, 2, 1), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, 2, 1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, 2, 1), nn.SiLU(),
            nn.Conv2d(2 * w, latent_channels, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, 2 * w, 3, 1, 1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(2 * w, 2 * w, 3, 1, 1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(2 * w, w, 3, 1, 1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(w, w, 3, 1, 1), nn.SiLU(),
            nn.Conv2d(w, 3, 3, 1, 1), nn.Tanh(),
        )
        self.denoiser = nn.Sequential(
            nn.Conv2d(latent_channels, w, 3, 1, 1), nn.SiLU(), nn.Conv2d(w, latent_channels, 3, 1, 1),
        )
        self.latent_channels = latent_channels

    def encode(self, x):
        return self.encoder(x)

    def decode(self, latent):
        return self.decoder(latent)

    def sample(self, shape, seed=0, steps=10):
        """Unconditional sampling: iterate ``l <- l - denoiser(l)/steps`` from noise."""
        g = torch.Generator().manual_seed(seed)
        l = torch.randn(shape, generator=g)
        with torch.no_grad():
            for _ in range(steps):
                l = l - self.denoiser(l) / steps
        return l


class DiffusersPipeline(nn.Module):
    """Adapter for a local diffusers ``AutoencoderKL`` (decoder + encoder)."""

    downsample = 8

    def __init__(self, vae):
        super().__init__()
        self.vae = vae
        self.scaling = float(getattr(vae.config, "scaling_factor", 0.18215))
        self.latent_channels = vae.config.latent_channels

    def encode(self, x):
        return self.vae.encode(x).latent_dist.mean * self.scaling

    def decode(self, latent):
        return self.vae.decode(latent / self.scaling).sample.clamp(-1, 1)

    def sample(self, shape, seed=0, steps=10):
        raise DependencyError("prompt-driven sampling is not wired for diffusers pipelines; "
                              "encode a reference image instead")


def freeze_pipeline(pipeline: nn.Module) -> nn.Module:
    pipeline.eval()
    for p in pipeline.parameters():
        p.requires_grad_(False)
    return pipeline


def save_tiny_pipeline(pipeline: TinyLatentPipeline, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(pipeline.state_dict(), directory / "pipeline.pt")
    (directory / "manifest.json").write_text(json.dumps(
        {"format": "tiny", "latent_channels": pipeline.latent_channels, "downsample": 8}, indent=2))
    return directory


def load_latent_pipeline(directory) -> nn.Module:
    """Load frozen pipeline weights from a local directory (never downloads)."""
    directory = Path(directory) if directory else None
    if directory is None or not (directory / "manifest.json").is_file():
        raise DependencyError(
            f"no latent pipeline at {directory}; point naturalizer.pipeline_dir at a directory with "
            "manifest.json (format 'tiny', or 'diffusers' holding a local AutoencoderKL)")
    manifest = json.loads((directory / "manifest.json").read_text())
    fmt = manifest.get("format")
    if fmt == "tiny":
        pipe = TinyLatentPipeline(manifest.get("latent_channels", LATENT_CHANNELS))
        pipe.load_state_dict(torch.load(directory / "pipeline.pt", map_location="cpu", weights_only=True))
    elif fmt == "diffusers":
        try:
            from diffusers import AutoencoderKL
        except ImportError as exc:
            raise DependencyError("diffusers pipelines need `pip install diffusers`") from exc
        pipe = DiffusersPipeline(AutoencoderKL.from_pretrained(directory / manifest.get("vae_subdir", "vae"),
                                                               local_files_only=True))
    else:
        raise DependencyError(f"unsupported pipeline format {fmt!r} in {directory}")
    return freeze_pipeline(pipe)


def pipeline_checksum(pipeline: nn.Module) -> str:
    return param_checksum(pipeline)


def latent_shape_for(pipeline, patch_size) -> tuple:
    h, w = patch_size
    d = pipeline.downsample
    return (pipeline.latent_channels, max(1, math.ceil(h / d)), max(1, math.ceil(w / d)))


def encode_reference(pipeline, image: np.ndarray, patch_size) -> torch.Tensor:
    """Clean latent (1, C, h_l, w_l) of an H x W x 3 reference image in [-1, 1]."""
    _, hl, wl = latent_shape_for(pipeline, patch_size)
    d = pipeline.downsample
    x = torch.as_tensor(np.asarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    x = F.interpolate(x, size=(hl * d, wl * d), mode="bilinear", align_corners=False)
    with torch.no_grad():
        return pipeline.encode(x)


def decode_latent(pipeline, latent: torch.Tensor, patch_size=None) -> torch.Tensor:
    """Decode (N, C, h_l, w_l) latents to (N, 3, h, w) RGB in [-1, 1]."""
    img = pipeline.decode(latent)
    if patch_size is not None and tuple(img.shape[-2:]) != tuple(patch_size):
        img = F.interpolate(img, size=tuple(patch_size), mode="bilinear", align_corners=False)
    return img.clamp(-1.0, 1.0)


def fit_tiny_pipeline(images: torch.Tensor, steps: int = 200, seed: int = 0, lr: float = 2e-3,
                      batch_size: int = 16) -> TinyLatentPipeline:
    """Train the tiny autoencoder on (N, 3, h, w) crops by reconstruction, then freeze it.

    The denoiser is fit to remove Gaussian noise added to clean latents.
    """
    torch.manual_seed(seed)
    pipe = TinyLatentPipeline()
    opt = torch.optim.Adam(pipe.parameters(), lr=lr)
    g = torch.Generator().manual_seed(seed)
    for _ in range(steps):
        idx = torch.randint(0, images.shape[0], (batch_size,), generator=g)
        x = images[idx]
        lat = pipe.encode(x)
        noise = 0.1 * torch.randn(lat.shape, generator=g)
        loss = F.mse_loss(pipe.decode(lat), x) + F.mse_loss(pipe.denoiser(lat.detach() + noise), noise)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return freeze_pipeline(pipe)
