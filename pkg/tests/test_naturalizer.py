import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from reidpatch.errors import DependencyError, ShapeError
from reidpatch.naturalizer import (
    EPS,
    TinyLatentPipeline,
    decode_latent,
    encode_reference,
    freeze_pipeline,
    gan_discriminator_loss,
    gan_generator_loss,
    latent_regularizer,
    load_latent_pipeline,
    perturb_latent,
    pipeline_checksum,
    save_tiny_pipeline,
)


def test_perturb_latent_identity_and_inverse():
    l = torch.randn(1, 4, 8, 8, dtype=torch.float64)
    assert torch.equal(perturb_latent(l, torch.zeros_like(l)), l)
    assert torch.equal(perturb_latent(l, -l), torch.zeros_like(l))
    with pytest.raises(ShapeError):
        perturb_latent(l, torch.zeros(1, 4, 4, 4, dtype=torch.float64))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_perturbation_norm(seed):
    g = torch.Generator().manual_seed(seed)
    l = torch.randn(2, 4, 3, 3, generator=g, dtype=torch.float64)
    d = torch.randn(2, 4, 3, 3, generator=g, dtype=torch.float64)
    assert float((perturb_latent(l, d) - l).norm()) == pytest.approx(float(d.norm()), rel=1e-12)


def test_latent_regularizer_arithmetic():
    assert float(latent_regularizer(torch.zeros(5, dtype=torch.float64), 1.0)) == 0.0
    assert abs(float(latent_regularizer(torch.ones(4, dtype=torch.float64), 1.0)) - 4.0) < 1e-12
    d = torch.randn(3, 4, dtype=torch.float64)
    assert abs(float(latent_regularizer(2 * d, 0.3)) - 4 * float(latent_regularizer(d, 0.3))) < 1e-12


def test_gan_closed_forms():
    assert abs(float(gan_generator_loss([0.5, 0.5], 0.0, 0.0)) - math.log(2)) < 1e-9
    assert abs(float(gan_discriminator_loss([0.5], [0.5])) - 2 * math.log(2)) < 1e-9
    assert float(gan_discriminator_loss([1 - EPS] * 3, [EPS] * 3)) < 1e-6
    # exact 0/1 scores are clamped and stay finite
    assert math.isfinite(float(gan_discriminator_loss([0.0], [1.0])))
    assert float(gan_generator_loss([0.5], 2.0, 0.25)) == pytest.approx(math.log(2) + 0.5, abs=1e-9)


def test_freeze_and_decode(tmp_path):
    torch.manual_seed(0)
    pipe = freeze_pipeline(TinyLatentPipeline())
    before = pipeline_checksum(pipe)
    ref = np.random.default_rng(0).uniform(-1, 1, (64, 64, 3)).astype(np.float32)
    l = encode_reference(pipe, ref, (64, 64))
    assert l.shape == (1, 4, 8, 8)
    clean = decode_latent(pipe, l, (48, 48))
    assert clean.shape == (1, 3, 48, 48) and clean.abs().max() <= 1
    assert torch.equal(decode_latent(pipe, perturb_latent(l, torch.zeros_like(l)), (48, 48)), clean)
    delta = torch.randn_like(l)
    delta = 0.01 * l.norm() * delta / delta.norm()
    moved = decode_latent(pipe, perturb_latent(l, delta), (48, 48))
    assert (moved - clean).abs().max() > 0
    assert pipeline_checksum(pipe) == before
    assert not any(p.requires_grad for p in pipe.parameters())

    back = load_latent_pipeline(save_tiny_pipeline(pipe, tmp_path / "pipe"))
    assert pipeline_checksum(back) == before


def test_missing_pipeline_is_dependency_error(tmp_path):
    with pytest.raises(DependencyError, match="manifest.json"):
        load_latent_pipeline(tmp_path)
    (tmp_path / "manifest.json").write_text('{"format": "unknown"}')
    with pytest.raises(DependencyError):
        load_latent_pipeline(tmp_path)
