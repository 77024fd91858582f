"""Cosine pull/push attack objectives.

All functions accept (d,) or (N, d) torch tensors of unit-norm embeddings
and return per-sample values (a 0-d tensor for 1-d inputs).
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import MissingTargetError, ShapeError

PUSH_FORMS = ("prose_hinge", "printed")


@dataclass(frozen=True)
class LossWeights:
    lambda_pull: float = 1.0
    lambda_push: float = 0.5
    tau: float = 0.3
    mode: str = "targeted"
    push_form: str = "prose_hinge"

    def __post_init__(self):
        if self.lambda_pull < 0 or self.lambda_push < 0:
            raise ValueError("loss weights must be non-negative")
        if not -1.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [-1, 1], got {self.tau}")
        if self.mode not in ("targeted", "untargeted"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.push_form not in PUSH_FORMS:
            raise ValueError(f"unknown push_form {self.push_form!r}")


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"embedding dimensions differ: {a.shape[-1]} vs {b.shape[-1]}")
    return (a * b).sum(-1) / (a.norm(dim=-1) * b.norm(dim=-1)).clamp_min(1e-12)


def pull_loss(z_adv, z_t):
    return 1.0 - cosine(z_adv, z_t)


def push_loss_targeted(z_adv, z_s, tau: float, z_t=None, form: str = "prose_hinge"):
    """Hinge on source similarity: max(0, cos(z_adv, z_s) - tau).

    ``form="printed"`` evaluates the alternative
    max(0, 1 - cos(z_adv, z_t)) + tau - (1 - cos(z_adv, z_s)), which needs ``z_t``.
    """
    if form == "prose_hinge":
        return torch.clamp(cosine(z_adv, z_s) - tau, min=0.0)
    if form == "printed":
        if z_t is None:
            raise MissingTargetError("the printed push form needs a target embedding")
        return torch.clamp(1.0 - cosine(z_adv, z_t), min=0.0) + tau - (1.0 - cosine(z_adv, z_s))
    raise ValueError(f"unknown push form {form!r}")


def push_loss_untargeted(z_adv, z_s):
    return cosine(z_adv, z_s)


def loss_terms(weights: LossWeights, z_adv, z_s, z_t=None) -> dict:
    """Per-sample loss components plus their weighted ``total``."""
    if weights.mode == "untargeted":
        push = push_loss_untargeted(z_adv, z_s)
        return {"total": push, "pull": torch.zeros_like(push), "push": push}
    if z_t is None:
        raise MissingTargetError("targeted loss needs a target embedding")
    pull = pull_loss(z_adv, z_t)
    push = push_loss_targeted(z_adv, z_s, weights.tau, z_t, weights.push_form)
    return {"total": weights.lambda_pull * pull + weights.lambda_push * push, "pull": pull, "push": push}


def total_loss(weights: LossWeights, z_adv, z_s, z_t=None):
    """Batch-mean adversarial loss."""
    return loss_terms(weights, z_adv, z_s, z_t)["total"].mean()
