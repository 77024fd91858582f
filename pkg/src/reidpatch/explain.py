"""Activation-map and PCA diagnostics."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import RankError, ShapeError

GROUPS = ("source", "clean_same_id", "target", "attacked")


@dataclass(frozen=True)
class ActivationMap:
    A: np.ndarray
    layer_id: str
    normalized: np.ndarray


def activation_map(F, layer_id: str = "last") -> ActivationMap:
    """Per-location sum of squared activations over channels of a (C, h, w) map."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 3 or F.size == 0:
        raise ShapeError(f"expected a non-empty (C, h, w) feature map, got shape {F.shape}")
    A = np.square(F).sum(axis=0)
    peak = A.max()
    normalized = A / peak if peak > 0 else np.zeros_like(A)
    return ActivationMap(A, layer_id, normalized)


def window_mass_fraction(A: np.ndarray, image_size, x: int, y: int, h: int, w: int) -> float:
    """Share of activation mass falling inside a pixel window.

    The window is mapped onto the activation grid by area: each cell
    receives the fraction of its footprint covered by the window.
    """
    H, W = image_size
    gh, gw = A.shape
    ys = np.arange(gh + 1) * H / gh
    xs = np.arange(gw + 1) * W / gw
    cover_y = np.clip(np.minimum(ys[1:], y + h) - np.maximum(ys[:-1], y), 0, None) / (H / gh)
    cover_x = np.clip(np.minimum(xs[1:], x + w) - np.maximum(xs[:-1], x), 0, None) / (W / gw)
    weight = np.outer(cover_y, cover_x)
    total = A.sum()
    return float((A * weight).sum() / total) if total > 0 else 0.0


@dataclass(frozen=True)
class ProjectionResult:
    coordinates: np.ndarray
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray
    components: np.ndarray
    mean: np.ndarray
    labels: list


def pca_project(embeddings, labels=None, k: int = 2) -> ProjectionResult:
    """Mean-center, take the top-k principal directions (SVD), project.

    Component signs are fixed so the largest-magnitude loading is positive.
    Variances use the N - 1 denominator.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    n = X.shape[0]
    if X.ndim != 2 or not (n > k >= 1):
        raise RankError(f"need N > k >= 1, got N={n}, k={k}")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = vt[:k]
    flip = np.sign(comps[np.arange(k), np.abs(comps).argmax(axis=1)])
    comps = comps * flip[:, None]
    var_all = s ** 2 / (n - 1)
    total = var_all.sum()
    var = var_all[:k]
    ratio = var / total if total > 0 else np.zeros_like(var)
    labels = list(labels) if labels is not None else [""] * n
    return ProjectionResult(Xc @ comps.T, var, ratio, comps, mean, labels)


def write_projection_csv(result: ProjectionResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "x", "y"])
        for label, (x, y) in zip(result.labels, result.coordinates[:, :2]):
            writer.writerow([label, f"{x:.8f}", f"{y:.8f}"])


def save_projection_plot(result: ProjectionResult, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    labels = np.array(result.labels)
    for group, marker in zip(GROUPS, "osx^"):
        sel = labels == group
        if sel.any():
            ax.scatter(result.coordinates[sel, 0], result.coordinates[sel, 1], marker=marker, label=group, s=24)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def heatmap_overlay(image: np.ndarray, amap: ActivationMap, alpha: float = 0.5) -> np.ndarray:
    """Blend the normalized map (jet colormap, bilinear-upsampled) over an H x W x 3 image in [-1, 1].

    Returns a uint8 array.
    """
    import matplotlib
    from PIL import Image

    from .data import to_uint8

    H, W = image.shape[:2]
    m = Image.fromarray((amap.normalized * 255).astype(np.uint8)).resize((W, H), Image.BILINEAR)
    colored = matplotlib.colormaps["jet"](np.asarray(m, dtype=np.float64) / 255.0)[..., :3] * 255
    base = to_uint8(image).astype(np.float64)
    return np.clip((1 - alpha) * base + alpha * colored, 0, 255).astype(np.uint8)


def save_heatmap(image, amap, path, alpha=0.5) -> None:
    from PIL import Image

    Image.fromarray(heatmap_overlay(image, amap, alpha)).save(path)
