"""Patch placement, random transformation and differentiable blending.

Tensors are channel-first: patches are (3, h, w) or (N, 3, h, w), images
(3, H, W) or (N, 3, H, W), all in [-1, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import PlacementError, ShapeError


@dataclass(frozen=True)
class PlacementMask:
    M: np.ndarray
    x: int
    y: int
    h: int
    w: int


def make_mask(H: int, W: int, h: int, w: int, x: int, y: int) -> PlacementMask:
    if not (0 <= x <= W - w and 0 <= y <= H - h) or h <= 0 or w <= 0:
        raise PlacementError(f"{h}x{w} window at (x={x}, y={y}) does not fit a {H}x{W} image")
    M = np.zeros((H, W), dtype=np.float32)
    M[y:y + h, x:x + w] = 1.0
    return PlacementMask(M, x, y, h, w)


def sample_placement(H: int, W: int, h: int, w: int, rng: np.random.Generator) -> tuple[int, int]:
    """Uniform (x, y) over all valid window origins."""
    if h > H or w > W:
        raise PlacementError(f"{h}x{w} patch does not fit a {H}x{W} image")
    return int(rng.integers(0, W - w + 1)), int(rng.integers(0, H - h + 1))


def center_placement(H: int, W: int, h: int, w: int) -> tuple[int, int]:
    if h > H or w > W:
        raise PlacementError(f"{h}x{w} patch does not fit a {H}x{W} image")
    return (W - w) // 2, (H - h) // 2


@dataclass(frozen=True)
class TransformSpec:
    rotation: tuple[float, float] = (-15.0, 15.0)
    scale: tuple[float, float] = (0.8, 1.2)
    perspective: float = 0.05
    blur_sigma: tuple[float, float] = (0.0, 1.0)
    brightness: tuple[float, float] = (-0.1, 0.1)
    contrast: tuple[float, float] = (-0.1, 0.1)
    interpolation: str = "bilinear"

    def __post_init__(self):
        checks = [
            ("rotation", self.rotation, 0.0),
            ("scale", self.scale, 1.0),
            ("blur_sigma", self.blur_sigma, 0.0),
            ("brightness", self.brightness, 0.0),
            ("contrast", self.contrast, 0.0),
        ]
        for name, (lo, hi), ident in checks:
            if not lo <= hi:
                raise ValueError(f"{name} range is empty: {(lo, hi)}")
            if not lo <= ident <= hi:
                raise ValueError(f"{name} range {(lo, hi)} must contain the identity value {ident}")
        if self.scale[0] <= 0 or self.blur_sigma[0] < 0 or self.perspective < 0:
            raise ValueError("scale must be positive; blur and perspective non-negative")
        if self.interpolation not in ("bilinear", "nearest"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")

    @classmethod
    def identity(cls) -> "TransformSpec":
        return cls((0.0, 0.0), (1.0, 1.0), 0.0, (0.0, 0.0), (0.0, 0.0), (0.0, 0.0))


def _uniform(rng, lo, hi, n):
    if lo == hi:
        return np.full(n, float(lo))
    return rng.uniform(lo, hi, n)


def transform_params(n: int, rotation=0.0, scale=1.0, corners=None, blur=0.0,
                     brightness=0.0, contrast=0.0) -> dict:
    """Explicit (non-random) parameters for ``apply_transform``."""
    return {
        "rotation": np.full(n, float(rotation)),
        "scale": np.full(n, float(scale)),
        "corners": np.zeros((n, 4, 2)) if corners is None else np.broadcast_to(corners, (n, 4, 2)).copy(),
        "blur": np.full(n, float(blur)),
        "brightness": np.full(n, float(brightness)),
        "contrast": np.full(n, float(contrast)),
    }


def sample_transform_params(spec: TransformSpec, n: int, rng: np.random.Generator) -> dict:
    params = {
        "rotation": _uniform(rng, *spec.rotation, n),
        "scale": _uniform(rng, *spec.scale, n),
        "corners": rng.uniform(-spec.perspective, spec.perspective, (n, 4, 2))
        if spec.perspective > 0 else np.zeros((n, 4, 2)),
        "blur": _uniform(rng, *spec.blur_sigma, n),
        "brightness": _uniform(rng, *spec.brightness, n),
        "contrast": _uniform(rng, *spec.contrast, n),
    }
    return params


def _homography_from_corners(corners: np.ndarray) -> np.ndarray:
    """Homography mapping the unit square corners to jittered corners (normalized coords)."""
    src = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=np.float64)
    dst = src + corners
    A, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        A.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        A.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    h = np.linalg.solve(np.array(A), np.array(b))
    return np.append(h, 1.0).reshape(3, 3)


def _warp_matrices(params: dict, h: int, w: int) -> np.ndarray:
    """Per-sample 3x3 maps from output to input normalized coordinates."""
    n = len(params["rotation"])
    mats = np.empty((n, 3, 3))
    # normalized coords are anisotropic for non-square patches; rotate in pixel units
    to_px = np.diag([w / 2.0, h / 2.0, 1.0])
    to_norm = np.diag([2.0 / w, 2.0 / h, 1.0])
    for i in range(n):
        th = math.radians(params["rotation"][i])
        c, s = math.cos(th), math.sin(th)
        # forward: counterclockwise on screen (y axis points down), then scale
        fwd = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]]) * params["scale"][i]
        fwd[2, 2] = 1.0
        fwd = to_norm @ fwd @ to_px
        if np.any(params["corners"][i]):
            fwd = _homography_from_corners(params["corners"][i]) @ fwd
        mats[i] = np.linalg.inv(fwd)
    return mats


def _warp(patches: torch.Tensor, mats: np.ndarray, mode: str) -> torch.Tensor:
    n, _, h, w = patches.shape
    ys = (torch.arange(h, dtype=patches.dtype) * 2 + 1) / h - 1
    xs = (torch.arange(w, dtype=patches.dtype) * 2 + 1) / w - 1
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    pts = torch.stack([gx, gy, torch.ones_like(gx)], dim=-1).reshape(-1, 3)
    m = torch.as_tensor(mats, dtype=patches.dtype)
    mapped = torch.einsum("nij,pj->npi", m, pts)
    grid = (mapped[..., :2] / mapped[..., 2:3]).reshape(n, h, w, 2)
    return F.grid_sample(patches, grid, mode=mode, padding_mode="zeros", align_corners=False)


def _gaussian_blur(patches: torch.Tensor, sigmas: np.ndarray) -> torch.Tensor:
    out = []
    for p, sigma in zip(patches, sigmas):
        if sigma <= 0:
            out.append(p)
            continue
        radius = max(1, int(math.ceil(3 * sigma)))
        k = torch.arange(-radius, radius + 1, dtype=p.dtype)
        k = torch.exp(-(k ** 2) / (2 * sigma ** 2))
        k = k / k.sum()
        c = p.shape[0]
        x = p.unsqueeze(0)
        x = F.conv2d(F.pad(x, (radius, radius, 0, 0), mode="replicate"), k.view(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
        x = F.conv2d(F.pad(x, (0, 0, radius, radius), mode="replicate"), k.view(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)
        out.append(x[0])
    return torch.stack(out)


def apply_transform(patches: torch.Tensor, params: dict, interpolation: str = "bilinear") -> torch.Tensor:
    """Apply sampled transform parameters to a (N, 3, h, w) batch.

    Each stage is skipped when its parameters are at the identity value, so
    the identity transform returns the input unchanged.
    """
    n, _, h, w = patches.shape
    out = patches
    spatial = (np.any(params["rotation"] != 0) or np.any(params["scale"] != 1)
               or np.any(params["corners"] != 0))
    if spatial:
        out = _warp(out, _warp_matrices(params, h, w), interpolation)
    if np.any(params["blur"] > 0):
        out = _gaussian_blur(out, params["blur"])
    photometric = np.any(params["contrast"] != 0) or np.any(params["brightness"] != 0)
    if photometric:
        gain = torch.as_tensor(1.0 + params["contrast"], dtype=out.dtype).view(n, 1, 1, 1)
        shift = torch.as_tensor(params["brightness"], dtype=out.dtype).view(n, 1, 1, 1)
        out = torch.clamp(out * gain + shift, -1.0, 1.0)
    return out


def transform_patch(P: torch.Tensor, spec: TransformSpec, seed) -> torch.Tensor:
    """Randomly transform one (3, h, w) patch or a (N, 3, h, w) batch.

    Out-of-support pixels after warping are 0 (mid-gray).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    single = P.dim() == 3
    batch = P.unsqueeze(0) if single else P
    params = sample_transform_params(spec, batch.shape[0], rng)
    out = apply_transform(batch, params, spec.interpolation)
    return out[0] if single else out


def compose(I_s: torch.Tensor, P_t: torch.Tensor, mask: PlacementMask) -> torch.Tensor:
    """Blend a patch into the mask window: (1 - M) * I_s + M * P_padded.

    Pixels outside the window are returned bit-for-bit from ``I_s``.
    """
    if P_t.shape[-2:] != (mask.h, mask.w):
        raise ShapeError(f"patch {tuple(P_t.shape[-2:])} does not match window {(mask.h, mask.w)}")
    if I_s.shape[-2:] != mask.M.shape:
        raise ShapeError(f"image {tuple(I_s.shape[-2:])} does not match mask {mask.M.shape}")
    H, W = mask.M.shape
    padded = F.pad(P_t, (mask.x, W - mask.x - mask.w, mask.y, H - mask.y - mask.h))
    M = torch.as_tensor(mask.M, dtype=torch.bool)
    return torch.where(M, padded, I_s)


def compose_batch(images: torch.Tensor, patches: torch.Tensor, origins) -> torch.Tensor:
    """Paste patch i at origin (x_i, y_i) of image i; differentiable in ``patches``."""
    n, _, H, W = images.shape
    h, w = patches.shape[-2:]
    out = images.clone()
    for i, (x, y) in enumerate(origins):
        if not (0 <= x <= W - w and 0 <= y <= H - h):
            raise PlacementError(f"{h}x{w} window at (x={x}, y={y}) does not fit a {H}x{W} image")
        out[i, :, y:y + h, x:x + w] = patches[i]
    return out
