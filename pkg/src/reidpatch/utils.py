from __future__ import annotations

import hashlib
import random

import numpy as np
import torch


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def param_checksum(*modules) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for module in modules:
        for name, tensor in module.state_dict().items():
            h.update(name.encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def to_tensor(images) -> torch.Tensor:
    """H x W x 3 array (or N x H x W x 3 / N x 3 x H x W) to a float32 N x 3 x H x W tensor."""
    if isinstance(images, torch.Tensor):
        t = images
    else:
        t = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if t.dim() == 3:
        t = t.unsqueeze(0)
    if t.shape[-1] == 3 and t.shape[1] != 3:
        t = t.permute(0, 3, 1, 2)
    return t.contiguous().float()
