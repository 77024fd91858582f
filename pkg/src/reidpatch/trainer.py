"""Training loops for the patch generator and for desk-scale embedders."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .composer import TransformSpec, apply_transform, compose_batch, sample_placement, sample_transform_params
from .data import DatasetIndex, load_image
from .embedders import EmbedderHandle, build_model, handle_from_model, save_model
from .errors import EmptyDatasetError, InsufficientIdentitiesError, RoleViolationError
from .naturalizer import (
    PatchDiscriminator,
    encode_reference,
    gan_discriminator_loss,
    gan_generator_loss,
    latent_regularizer,
    latent_shape_for,
)
from .objectives import LossWeights, loss_terms
from .patchgen import BackboneSpec, PatchAttacker, PatchGenerator, build_backbone, pyramid_shapes, save_generator

log = logging.getLogger(__name__)

LOG_FIELDS = ["epoch", "step", "loss_total", "loss_pull", "loss_push", "loss_reg"]


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 2e-4
    batch_size: int = 16
    optimizer: str = "adam"
    schedule: str = "cosine"
    seed: int = 0
    loss: LossWeights = field(default_factory=lambda: LossWeights(mode="untargeted"))
    transform: TransformSpec = field(default_factory=TransformSpec)
    patch_size: tuple = (64, 64)
    image_size: tuple = (256, 128)
    naturalistic: bool = False
    natural_method: str = "diffusion"
    latent_weight: float = 0.01
    lambda_adv: float = 1.0
    noise_dim: int = 16
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    split: str = "train"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.natural_method not in ("diffusion", "gan"):
            raise ValueError(f"unknown natural_method {self.natural_method!r}")

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    attacker: PatchAttacker
    epoch: int
    loss_history: list
    fingerprint: str
    path: Path | None = None
    probe_loss: float | None = None

    @property
    def epoch_means(self) -> list:
        by_epoch: dict = {}
        for row in self.loss_history:
            by_epoch.setdefault(row["epoch"], []).append(row["loss_total"])
        return [float(np.mean(v)) for _, v in sorted(by_epoch.items())]


class ImageCache:
    """Decoded images and frozen-backbone pyramids, keyed by path."""

    def __init__(self, image_size, backbone=None):
        self.image_size = tuple(image_size)
        self.backbone = backbone
        self._images: dict = {}
        self._pyramids: dict = {}

    def image(self, record) -> torch.Tensor:
        key = str(record.image_path)
        if key not in self._images:
            arr = load_image(record, *self.image_size)
            self._images[key] = torch.from_numpy(arr).permute(2, 0, 1).contiguous()
        return self._images[key]

    def images(self, records) -> torch.Tensor:
        return torch.stack([self.image(r) for r in records])

    def pyramids(self, records) -> list:
        missing = [r for r in records if str(r.image_path) not in self._pyramids]
        if missing:
            with torch.no_grad():
                levels = self.backbone.pyramid(self.images(missing))
            for i, r in enumerate(missing):
                self._pyramids[str(r.image_path)] = [lv[i] for lv in levels]
        per = [self._pyramids[str(r.image_path)] for r in records]
        return [torch.stack([p[k] for p in per]) for k in range(3)]


def _usable(data: DatasetIndex, split: str) -> list:
    records = [r for r in data.records if not r.is_junk and (split is None or r.split == split)]
    if not records:
        raise EmptyDatasetError(f"no usable records in split {split!r}")
    return records


def _optimizer(params, config):
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.lr, momentum=0.9)
    return torch.optim.Adam(params, lr=config.lr, betas=(0.5, 0.999))


def _scheduler(opt, config, total_steps):
    if config.schedule == "cosine":
        return torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(total_steps, 1), eta_min=0.0)
    return torch.optim.lr_scheduler.LambdaLR(opt, lambda _: 1.0)


def build_attacker(config: TrainConfig, pipeline=None, reference_image=None) -> PatchAttacker:
    backbone = build_backbone(config.backbone, config.image_size)
    latent_shape = clean = None
    if config.naturalistic and config.natural_method == "diffusion":
        if pipeline is None or reference_image is None:
            raise ValueError("the diffusion route needs a latent pipeline and a reference image")
        latent_shape = latent_shape_for(pipeline, config.patch_size)
        clean = encode_reference(pipeline, reference_image, config.patch_size)
    torch.manual_seed(config.seed)
    gen = PatchGenerator(pyramid_shapes(backbone, config.image_size), config.image_size, config.patch_size,
                         config.loss.mode, latent_shape=latent_shape,
                         noise_dim=config.noise_dim if config.naturalistic and config.natural_method == "gan" else 0)
    return PatchAttacker(gen, backbone, config.backbone, pipeline, clean)


def _draw_targets(sources, pool, rng):
    targets = []
    for s in sources:
        others = [r for r in pool if r.identity != s.identity]
        targets.append(others[rng.integers(len(others))])
    return targets


def _adversarial_step(attacker, target, cache, sources, targets, config, rng, noise=None):
    """Forward pass of one batch; returns (terms, reg, patches)."""
    gen = attacker.generator
    src_img = cache.images(sources)
    src_top = cache.pyramids(sources)[2]
    tgt_levels = tgt_img = None
    if gen.conditioning == "targeted":
        tgt_levels = cache.pyramids(targets)
        tgt_img = cache.images(targets)
    out = gen(src_top, tgt_levels, tgt_img, noise)
    reg = torch.zeros(())
    if gen.latent_shape:
        reg = latent_regularizer(out, config.latent_weight) / out.shape[0]
        patches = attacker.delta_to_patch(out)
    else:
        patches = out
    n = len(sources)
    params = sample_transform_params(config.transform, n, rng)
    patches_t = apply_transform(patches, params, config.transform.interpolation)
    H, W = config.image_size
    h, w = config.patch_size
    origins = [sample_placement(H, W, h, w, rng) for _ in range(n)]
    adv = compose_batch(src_img, patches_t, origins)
    z_adv = target.embed_batch(adv, grad=True)
    z_s = target.embed_batch(src_img)
    z_t = target.embed_batch(tgt_img) if tgt_img is not None else None
    terms = loss_terms(config.loss, z_adv, z_s, z_t)
    return terms, reg, patches


def probe_batch_loss(attacker, target, data, config, seed=12345, size=8) -> float:
    """Loss of one deterministic batch with the generator in eval mode."""
    pool = _usable(data, config.split)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pool), size=min(size, len(pool)), replace=False)
    sources = [pool[i] for i in idx]
    targets = _draw_targets(sources, pool, rng) if config.loss.mode == "targeted" else None
    cache = ImageCache(config.image_size, attacker.backbone)
    was = attacker.generator.training
    attacker.generator.eval()
    try:
        with torch.no_grad():
            terms, reg, _ = _adversarial_step(attacker, target, cache, sources, targets, config, rng)
    finally:
        attacker.generator.train(was)
    return float(terms["total"].mean() + reg)


def train_generator(config: TrainConfig, data: DatasetIndex, target: EmbedderHandle, *, out_dir=None,
                    pipeline=None, reference_image=None, natural_crops=None, attacker=None) -> Checkpoint:
    """Optimize generator parameters against a frozen white-box embedder.

    Only the generator (and, on the GAN route, the discriminator) is
    updated. ``natural_crops`` (N, 3, h, w) supplies real samples for the
    discriminator.
    """
    if target.role != "target_whitebox":
        raise RoleViolationError(f"{target.model_id} is a black-box handle and cannot be trained against")
    pool = _usable(data, config.split)
    if config.loss.mode == "targeted" and len({r.identity for r in pool}) < 2:
        raise InsufficientIdentitiesError("targeted training needs at least two identities")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    attacker = attacker or build_attacker(config, pipeline, reference_image)
    gen = attacker.generator
    gen.train()
    cache = ImageCache(config.image_size, attacker.backbone)

    gan = config.naturalistic and config.natural_method == "gan"
    disc = d_opt = None
    if gan:
        if natural_crops is None:
            raise ValueError("the GAN route needs natural_crops")
        disc = PatchDiscriminator()
        d_opt = torch.optim.Adam(disc.parameters(), lr=config.lr, betas=(0.5, 0.999))

    steps_per_epoch = max(1, math.ceil(len(pool) / config.batch_size))
    opt = _optimizer([p for p in gen.parameters() if p.requires_grad], config)
    sched = _scheduler(opt, config, steps_per_epoch * config.epochs)
    history = []
    step = 0
    out_dir = Path(out_dir) if out_dir else None
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(pool))
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            if len(idx) < 2:
                idx = order[:min(config.batch_size, len(order))]
            sources = [pool[i] for i in idx]
            targets = _draw_targets(sources, pool, rng) if config.loss.mode == "targeted" else None
            noise = torch.randn(len(sources), config.noise_dim) if gan else None
            terms, reg, patches = _adversarial_step(attacker, target, cache, sources, targets, config, rng, noise)
            loss = terms["total"].mean() + reg
            if gan:
                real = natural_crops[torch.from_numpy(rng.integers(0, len(natural_crops), len(sources)))]
                d_loss = gan_discriminator_loss(disc(real), disc(patches.detach()))
                d_opt.zero_grad()
                d_loss.backward()
                d_opt.step()
                loss = gan_generator_loss(disc(patches), loss, config.lambda_adv)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            step += 1
            history.append({
                "epoch": epoch, "step": step, "loss_total": loss.item(),
                "loss_pull": terms["pull"].mean().item(), "loss_push": terms["push"].mean().item(),
                "loss_reg": reg.item(),
            })
        mean = np.mean([r["loss_total"] for r in history if r["epoch"] == epoch])
        log.info("generator epoch %d/%d loss %.4f", epoch, config.epochs, mean)
        if out_dir and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_generator(attacker, out_dir / f"generator_e{epoch:03d}.pt", epoch)

    gen.eval()
    ckpt = Checkpoint(attacker, config.epochs, history, config.fingerprint())
    ckpt.probe_loss = probe_batch_loss(attacker, target, data, config)
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_loss_log(history, out_dir / "loss_log.csv")
        ckpt.path = save_generator(attacker, out_dir / "generator.pt", config.epochs,
                                   {"fingerprint": ckpt.fingerprint, "probe_loss": ckpt.probe_loss})
    return ckpt


def write_loss_log(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in LOG_FIELDS})


# ---------------------------------------------------------------- embedders

@dataclass
class EmbedderTrainConfig:
    arch: str = "small-cnn"
    embedding_dim: int | None = None
    epochs: int = 30
    lr: float = 1e-3
    ids_per_batch: int = 8
    images_per_id: int = 4
    triplet_margin: float = 0.3
    erasing_prob: float = 0.5
    seed: int = 0
    image_size: tuple = (256, 128)
    split: str = "train"


def batch_hard_triplet(z: torch.Tensor, labels: torch.Tensor, margin: float) -> torch.Tensor:
    """Hardest positive and negative per anchor on unit-norm embeddings."""
    dist = torch.cdist(z, z)
    same = labels[:, None] == labels[None, :]
    hardest_pos = (dist * same).max(dim=1).values
    hardest_neg = dist.masked_fill(same, float("inf")).min(dim=1).values
    return F.relu(hardest_pos - hardest_neg + margin).mean()


def random_erase(x: torch.Tensor, prob: float, rng: np.random.Generator) -> torch.Tensor:
    """Fill a random rectangle (2-33% of the area) with uniform noise."""
    x = x.clone()
    n, _, H, W = x.shape
    for i in range(n):
        if rng.random() >= prob:
            continue
        for _ in range(10):
            area = rng.uniform(0.02, 0.33) * H * W
            ratio = math.exp(rng.uniform(math.log(0.3), math.log(3.3)))
            h = int(round(math.sqrt(area * ratio)))
            w = int(round(math.sqrt(area / ratio)))
            if 0 < h < H and 0 < w < W:
                y, xx = rng.integers(0, H - h), rng.integers(0, W - w)
                x[i, :, y:y + h, xx:xx + w] = torch.from_numpy(rng.uniform(-1, 1, (3, h, w)).astype(np.float32))
                break
    return x


def train_embedder(config: EmbedderTrainConfig, data: DatasetIndex, *, out_path=None,
                   role="target_whitebox", steps=None) -> EmbedderHandle:
    """Cross-entropy over identities plus batch-hard triplet loss; returns a frozen handle.

    ``steps=0`` returns the untrained (randomly initialized) model.
    """
    pool = _usable(data, config.split)
    ids = sorted({r.identity for r in pool})
    if len(ids) < 2:
        raise InsufficientIdentitiesError("embedder training needs at least two identities")
    label_of = {pid: i for i, pid in enumerate(ids)}
    by_id: dict = {}
    for r in pool:
        by_id.setdefault(r.identity, []).append(r)

    model = build_model(config.arch, config.embedding_dim, len(ids), config.image_size, config.seed)
    rng = np.random.default_rng(config.seed)
    cache = ImageCache(config.image_size)
    batch = config.ids_per_batch * config.images_per_id
    steps_per_epoch = max(1, math.ceil(len(pool) / batch))
    total = steps_per_epoch * config.epochs if steps is None else steps
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=5e-4)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(total, 1))
    model.train()
    for step in range(total):
        chosen = rng.choice(ids, size=min(config.ids_per_batch, len(ids)), replace=False)
        records = []
        for pid in chosen:
            imgs = by_id[pid]
            picks = rng.choice(len(imgs), size=config.images_per_id, replace=len(imgs) < config.images_per_id)
            records.extend(imgs[i] for i in picks)
        x = cache.images(records)
        flip = torch.from_numpy(rng.random(len(records)) < 0.5)
        x = torch.where(flip[:, None, None, None], x.flip(-1), x)
        x = random_erase(x, config.erasing_prob, rng)
        labels = torch.tensor([label_of[r.identity] for r in records])
        feat = model(x)
        z = F.normalize(feat, dim=1)
        loss = F.cross_entropy(model.classifier(feat), labels) + batch_hard_triplet(z, labels, config.triplet_margin)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if (step + 1) % steps_per_epoch == 0:
            log.info("embedder %s step %d/%d loss %.4f", config.arch, step + 1, total, loss.item())
    if out_path:
        save_model(model, out_path, train_dataset=data.layout)
    return handle_from_model(model, role, model_id=f"{config.arch}:trained:{config.seed}")


def generator_config_for_size(config: TrainConfig, size) -> TrainConfig:
    return replace(config, patch_size=tuple(size))
