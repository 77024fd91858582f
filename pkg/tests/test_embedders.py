import numpy as np
import pytest
import torch

from reidpatch.embedders import ModelSpec, build_model, embed, features_multiscale, register_embedder, save_model
from reidpatch.errors import RegistryError, RoleViolationError, ShapeError, WeightsLoadError


def _image(seed=0, size=(256, 128)):
    return np.random.default_rng(seed).uniform(-1, 1, (*size, 3)).astype(np.float32)


@pytest.mark.parametrize("arch", ["small-cnn", "osnet-like", "residual-50"])
def test_embedding_unit_norm_and_deterministic(arch):
    h = register_embedder({"arch": arch, "seed": 7})
    a, b = embed(h, _image()), embed(h, _image())
    assert a.vector.shape == (h.embedding_dim,)
    assert abs(np.linalg.norm(a.vector) - 1) < 1e-5
    assert np.array_equal(a.vector, b.vector)
    assert float(a.vector @ a.vector) == pytest.approx(1.0, abs=1e-5)


def test_same_spec_same_embeddings():
    a = register_embedder(ModelSpec("small-cnn", seed=7))
    b = register_embedder(ModelSpec("small-cnn", seed=7))
    assert np.array_equal(embed(a, _image(1)).vector, embed(b, _image(1)).vector)


def test_registry_errors(tmp_path):
    with pytest.raises(RegistryError):
        register_embedder({"arch": "foo"})
    with pytest.raises(WeightsLoadError):
        register_embedder({"arch": "small-cnn", "weights": str(tmp_path / "none.pt")})
    path = save_model(build_model("small-cnn"), tmp_path / "w.pt")
    with pytest.raises(WeightsLoadError):
        register_embedder({"arch": "osnet-like", "weights": str(path)})


def test_weights_roundtrip(tmp_path):
    model = build_model("small-cnn", seed=3)
    path = save_model(model, tmp_path / "w.pt", "fixture")
    h = register_embedder({"arch": "small-cnn", "weights": str(path), "seed": 99})
    ref = register_embedder({"arch": "small-cnn", "seed": 3})
    assert np.array_equal(embed(h, _image()).vector, embed(ref, _image()).vector)


def test_residual50_pyramid_sizes():
    h = register_embedder({"arch": "residual-50"})
    levels = features_multiscale(h, _image()).levels
    assert [lv.shape for lv in levels] == [(512, 32, 16), (1024, 16, 8), (2048, 8, 4)]
    zero = features_multiscale(h, np.zeros((256, 128, 3), np.float32)).levels
    assert all(np.isfinite(lv).all() for lv in zero)


@pytest.mark.parametrize("arch,sizes", [("small-cnn", [(64, 32), (32, 16), (16, 8)]),
                                        ("osnet-like", [(32, 16), (16, 8), (8, 4)])])
def test_pyramids_halve(arch, sizes):
    levels = features_multiscale(register_embedder({"arch": arch}), _image()).levels
    assert [lv.shape[1:] for lv in levels] == sizes


def test_blackbox_role_contract():
    h = register_embedder({"arch": "small-cnn", "role": "auxiliary_blackbox"})
    with pytest.raises(RoleViolationError):
        features_multiscale(h, _image())
    with pytest.raises(RoleViolationError):
        h.embed_batch(torch.zeros(1, 3, 256, 128), grad=True)
    before = h.calls
    embed(h, _image())
    assert h.calls == before + 1


def test_shape_error():
    h = register_embedder({"arch": "small-cnn"})
    with pytest.raises(ShapeError):
        embed(h, _image(size=(128, 64)))


def test_whitebox_gradients_reach_input():
    h = register_embedder({"arch": "small-cnn"})
    x = torch.zeros(1, 3, 256, 128, requires_grad=True)
    h.embed_batch(x, grad=True).sum().backward()
    assert x.grad is not None and torch.isfinite(x.grad).all()
    assert all(p.grad is None for p in h.model.parameters())
