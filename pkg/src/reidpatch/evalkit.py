"""Retrieval metrics, attack success rate and patch-size sweeps."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .composer import (
    TransformSpec,
    apply_transform,
    center_placement,
    compose_batch,
    sample_placement,
    sample_transform_params,
)
from .data import load_batch
from .embedders import EmbedderHandle
from .errors import EmptyQueryError, EmptyTrialsError, PlacementError
from .kernels import rank_queries

log = logging.getLogger(__name__)

CONDITIONS = ("no_patch", "random_patch", "adversarial_patch", "naturalistic_patch")
REPORT_FIELDS = ["condition", "mAP", "rank10", "rank1", "box"]


@dataclass(frozen=True)
class RetrievalProtocol:
    metric: str = "cosine"
    cross_camera_filter: bool = True
    junk_filter: bool = True

    @classmethod
    def for_layout(cls, layout: str, metric: str = "cosine") -> "RetrievalProtocol":
        return cls(metric, layout in ("market1501", "dukemtmc", "synthetic"), True)


@dataclass(frozen=True)
class EvalReport:
    condition: str
    mAP: float
    rank1: float
    rank10: float
    num_queries: int
    box: str = "white"

    def row(self) -> dict:
        return {"condition": self.condition, "mAP": f"{self.mAP:.6f}", "rank10": f"{self.rank10:.6f}",
                "rank1": f"{self.rank1:.6f}", "box": self.box}


@dataclass
class AttackConfig:
    """How queries are patched before embedding.

    ``attacker`` is a ``PatchAttacker`` for adversarial/naturalistic
    conditions; ``patch_size`` overrides the generator's size by bilinear
    rescaling. Targeted attackers need ``targets`` (one record per query).
    """

    condition: str = "adversarial_patch"
    attacker: object = None
    placement: str = "center"
    seed: int = 0
    transform: TransformSpec | None = None
    patch_size: tuple | None = None
    targets: list | None = None


def average_precision(relevance) -> float:
    """Mean of precision@k over the relevant positions k of a ranked list."""
    rel = np.asarray(relevance, dtype=bool)
    if rel.size == 0:
        raise EmptyQueryError("empty ranking")
    hits = np.cumsum(rel)
    if hits[-1] == 0:
        return 0.0
    k = np.arange(1, rel.size + 1)
    return float((hits[rel] / k[rel]).mean())


def similarity(q: np.ndarray, g: np.ndarray, metric: str) -> np.ndarray:
    """(Q, G) scores where higher means closer."""
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if metric == "cosine":
        qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
        gn = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
        return qn @ gn.T
    if metric == "euclidean":
        d2 = (q ** 2).sum(1)[:, None] + (g ** 2).sum(1)[None, :] - 2 * q @ g.T
        return -np.sqrt(np.maximum(d2, 0.0))
    raise ValueError(f"unknown metric {metric!r}")


def retrieval_metrics(q_feats, q_ids, q_cams, g_feats, g_ids, g_cams, protocol: RetrievalProtocol,
                      use_numba=None) -> dict:
    """mAP and CMC rank-1/rank-10 over feature matrices.

    Junk queries (identity -1) are skipped. A query without any valid
    gallery match contributes AP 0 and no rank hit.
    """
    q_ids = np.asarray(q_ids)
    keep = q_ids != -1
    if not keep.any():
        raise EmptyQueryError("no usable queries")
    if len(g_ids) == 0:
        raise EmptyQueryError("empty gallery")
    scores = similarity(np.asarray(q_feats)[keep], g_feats, protocol.metric)
    ap, first, n_good = rank_queries(scores, q_ids[keep], np.asarray(q_cams)[keep], g_ids, g_cams,
                                     protocol.cross_camera_filter, protocol.junk_filter, use_numba)
    missing = int((n_good == 0).sum())
    if missing:
        log.warning("%d queries have no valid gallery match; counted with AP 0", missing)
    return {
        "mAP": float(ap.mean()),
        "rank1": float(((first >= 0) & (first < 1)).mean()),
        "rank10": float(((first >= 0) & (first < 10)).mean()),
        "num_queries": int(keep.sum()),
        "ap": ap,
        "first_hit": first,
    }


def random_patches(n, size, seed) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.uniform(-1, 1, (n, 3, *size)).astype(np.float32))


def attack_patches(attack: AttackConfig, images: torch.Tensor, start: int) -> torch.Tensor:
    """Patches for a batch of query images (generator output or random control)."""
    n = images.shape[0]
    attacker = attack.attacker
    size = attack.patch_size or (attacker.patch_size if attacker is not None else (64, 64))
    if attack.condition == "random_patch":
        return random_patches(n, size, [attack.seed, start])
    if attacker is None:
        raise ValueError(f"condition {attack.condition!r} needs a generator")
    targets = None
    if attacker.conditioning == "targeted":
        if attack.targets is None:
            raise ValueError("targeted attacker needs per-query target records")
        H, W = images.shape[-2:]
        targets = torch.from_numpy(load_batch(attack.targets[start:start + n], H, W))
    attacker.generator.eval()
    with torch.no_grad():
        p = attacker.patches_from_images(images, targets)
    if tuple(p.shape[-2:]) != tuple(size):
        p = F.interpolate(p, size=tuple(size), mode="bilinear", align_corners=False)
    return p


def apply_attack(attack: AttackConfig, images: torch.Tensor, start: int = 0) -> torch.Tensor:
    """Compose attack patches into a batch of (N, 3, H, W) query images."""
    if attack is None or attack.condition == "no_patch":
        return images
    patches = attack_patches(attack, images, start)
    n, _, H, W = images.shape
    h, w = patches.shape[-2:]
    if h > H or w > W:
        raise PlacementError(f"{h}x{w} patch does not fit a {H}x{W} image")
    rng = np.random.default_rng([attack.seed, start, 1])
    if attack.transform is not None:
        patches = apply_transform(patches, sample_transform_params(attack.transform, n, rng),
                                  attack.transform.interpolation)
    if attack.placement == "center":
        origins = [center_placement(H, W, h, w)] * n
    else:
        origins = [sample_placement(H, W, h, w, rng) for _ in range(n)]
    return compose_batch(images, patches, origins)


def embed_queries(handle: EmbedderHandle, records, attack: AttackConfig | None = None, batch_size=32):
    H, W = handle.input_size
    out = []
    for i in range(0, len(records), batch_size):
        x = torch.from_numpy(load_batch(records[i:i + batch_size], H, W))
        x = apply_attack(attack, x, i)
        out.append(handle.embed_batch(x).numpy())
    return np.concatenate(out).astype(np.float64)


def evaluate_retrieval(queries, gallery, embedder: EmbedderHandle, protocol: RetrievalProtocol,
                       attack: AttackConfig | None = None, box: str = "white",
                       gallery_feats: np.ndarray | None = None) -> EvalReport:
    """Patch (optionally) and embed the queries, rank the clean gallery, report means."""
    if not gallery:
        raise EmptyQueryError("empty gallery")
    q_feats = embed_queries(embedder, queries, attack)
    if gallery_feats is None:
        gallery_feats = embed_queries(embedder, gallery)
    m = retrieval_metrics(
        q_feats, [r.identity for r in queries], [r.camera for r in queries],
        gallery_feats, np.array([r.identity for r in gallery]), np.array([r.camera for r in gallery]),
        protocol,
    )
    condition = "no_patch" if attack is None else attack.condition
    return EvalReport(condition, m["mAP"], m["rank1"], m["rank10"], m["num_queries"], box)


def attack_success_rate(adv_embeddings, target_embeddings, tau_asr: float = 0.5) -> float:
    """Fraction of trials with cos(f_adv, f_t) > tau_asr."""
    a = np.asarray(adv_embeddings, dtype=np.float64)
    t = np.asarray(target_embeddings, dtype=np.float64)
    if a.shape[0] == 0:
        raise EmptyTrialsError("no trials")
    if a.shape != t.shape:
        raise ValueError(f"paired embeddings differ in shape: {a.shape} vs {t.shape}")
    cos = (a * t).sum(1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(t, axis=1))
    return float((cos > tau_asr).mean())


def pair_cosines(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return (a * b).sum(1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))


def patch_size_sweep(sizes, queries, gallery, embedder, protocol, attack: AttackConfig,
                     sweep_mode: str = "rescale", retrain=None, box="white") -> list:
    """One report per patch size with everything else fixed.

    ``rescale`` resizes the trained generator's output; ``retrain`` calls
    ``retrain(size)`` to obtain a fresh attacker for each size.
    """
    if len(sizes) < 1:
        raise ValueError("need at least one size")
    if sweep_mode not in ("rescale", "retrain"):
        raise ValueError(f"unknown sweep_mode {sweep_mode!r}")
    H, W = embedder.input_size
    gallery_feats = embed_queries(embedder, gallery)
    reports = []
    for size in sizes:
        size = (size, size) if np.isscalar(size) else tuple(size)
        if size[0] > H or size[1] > W:
            raise PlacementError(f"{size} patch does not fit a {H}x{W} image")
        if sweep_mode == "retrain":
            cfg = replace(attack, attacker=retrain(size), patch_size=None)
        else:
            cfg = replace(attack, patch_size=size)
        reports.append(evaluate_retrieval(queries, gallery, embedder, protocol, cfg, box, gallery_feats))
    return reports


def write_reports(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        writer.writeheader()
        for r in reports:
            writer.writerow(r.row())


def save_retrieval_strip(query_image, gallery_records, order, query_identity, path, image_size, k=10) -> None:
    """Query followed by its top-k gallery images; green border = same identity."""
    from PIL import Image, ImageOps

    from .data import load_image, to_uint8

    H, W = image_size
    pad = 4
    strip = Image.new("RGB", ((k + 1) * (W + 2 * pad) + pad, H + 2 * pad), (255, 255, 255))
    tiles = [(np.asarray(query_image), (0, 0, 0))]
    for j in order[:k]:
        rec = gallery_records[j]
        color = (0, 170, 0) if rec.identity == query_identity else (200, 0, 0)
        tiles.append((load_image(rec, H, W), color))
    for i, (img, color) in enumerate(tiles):
        tile = ImageOps.expand(Image.fromarray(to_uint8(img)), border=pad, fill=color)
        strip.paste(tile, (i * (W + 2 * pad), 0))
    strip.save(path)


def report_dict(report: EvalReport) -> dict:
    return asdict(report)
