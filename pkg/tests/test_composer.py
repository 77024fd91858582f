import math

import numpy as np
import pytest
import torch

from reidpatch.composer import (
    TransformSpec,
    apply_transform,
    compose,
    compose_batch,
    make_mask,
    sample_placement,
    transform_params,
    transform_patch,
)
from reidpatch.errors import PlacementError, ShapeError


def nearest_rotation_oracle(pattern, degrees):
    """Pixel-by-pixel inverse warp: output(p) = input(R^-1 (p - c) + c), nearest neighbour.

    Rotation is counterclockwise as displayed (rows grow downward); pixels
    mapping outside the input are 0.
    """
    c_, h, w = pattern.shape
    th = math.radians(degrees)
    out = np.zeros_like(pattern)
    cy, cx = h / 2.0, w / 2.0
    for i in range(h):
        for j in range(w):
            px, py = j + 0.5 - cx, i + 0.5 - cy
            # inverse of the counterclockwise-on-screen rotation
            sx = math.cos(th) * px - math.sin(th) * py
            sy = math.sin(th) * px + math.cos(th) * py
            si, sj = int(math.floor(sy + cy)), int(math.floor(sx + cx))
            if 0 <= si < h and 0 <= sj < w:
                out[:, i, j] = pattern[:, si, sj]
    return out


def test_make_mask_examples():
    m = make_mask(4, 4, 2, 2, 0, 0)
    expected = np.zeros((4, 4))
    expected[:2, :2] = 1
    assert np.array_equal(m.M, expected) and m.M.sum() == 4
    assert make_mask(4, 4, 4, 4, 0, 0).M.all()
    with pytest.raises(PlacementError):
        make_mask(4, 4, 2, 2, 4 - 2 + 1, 0)


def test_random_placement_in_bounds():
    rng = np.random.default_rng(0)
    H, W, h, w = 256, 128, 64, 48
    xs = rng.integers(0, W - w + 1, 10**6)
    ys = rng.integers(0, H - h + 1, 10**6)
    assert xs.min() >= 0 and xs.max() + w <= W and ys.min() >= 0 and ys.max() + h <= H
    for _ in range(1000):
        x, y = sample_placement(H, W, h, w, rng)
        make_mask(H, W, h, w, x, y)


def test_identity_transform_is_exact():
    P = torch.rand(3, 8, 8) * 2 - 1
    out = transform_patch(P, TransformSpec.identity(), seed=3)
    assert torch.equal(out, P)


def test_brightness_shift_on_zero_patch():
    P = torch.zeros(1, 3, 4, 4)
    out = apply_transform(P, transform_params(1, brightness=0.1))
    assert torch.allclose(out, torch.full_like(P, 0.1))
    out = apply_transform(torch.ones(1, 3, 2, 2), transform_params(1, brightness=0.5))
    assert out.max() == 1.0


@pytest.mark.parametrize("degrees", [90, 180, -90])
def test_rotation_matches_nearest_neighbour_oracle(degrees):
    pattern = np.arange(12, dtype=np.float64).reshape(3, 2, 2) / 12.0
    out = apply_transform(torch.from_numpy(pattern)[None], transform_params(1, rotation=degrees), "nearest")
    assert np.array_equal(out[0].numpy(), nearest_rotation_oracle(pattern, degrees))


def test_rotation_90_is_counterclockwise():
    pattern = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).expand(1, 3, 2, 2)
    out = apply_transform(pattern, transform_params(1, rotation=90), "nearest")
    assert torch.equal(out[0, 0], torch.tensor([[2.0, 4.0], [1.0, 3.0]]))


def test_transform_deterministic_and_in_range():
    P = torch.rand(4, 3, 16, 16) * 2 - 1
    a = transform_patch(P, TransformSpec(), seed=11)
    b = transform_patch(P, TransformSpec(), seed=11)
    assert torch.equal(a, b)
    assert a.shape == P.shape and a.min() >= -1 and a.max() <= 1


def test_transform_spec_must_contain_identity():
    with pytest.raises(ValueError):
        TransformSpec(rotation=(5.0, 10.0))


def test_compose_zero_mask_and_window():
    I = torch.rand(3, 8, 8)
    m = make_mask(8, 8, 3, 2, 1, 4)
    P = torch.rand(3, 3, 2)
    out = compose(I, P, m)
    assert torch.equal(out[:, 4:7, 1:3], P)
    outside = torch.as_tensor(m.M == 0)
    assert torch.equal(out[:, outside], I[:, outside])
    with pytest.raises(ShapeError):
        compose(I, torch.rand(3, 2, 2), m)


def test_compose_all_zero_mask_passthrough():
    from reidpatch.composer import PlacementMask

    I = torch.rand(3, 5, 5)
    m = PlacementMask(np.zeros((5, 5), dtype=np.float32), 0, 0, 2, 2)
    assert torch.equal(compose(I, torch.rand(3, 2, 2), m), I)


def test_compose_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    I = torch.from_numpy(rng.uniform(-1, 1, (3, 8, 8)))
    m = make_mask(8, 8, 3, 4, 2, 1)
    P = torch.from_numpy(rng.uniform(-1, 1, (3, 3, 4))).requires_grad_(True)
    out = compose(I, P, m)
    # dI_adv/dP: identity inside the window, nothing outside
    jac = torch.autograd.functional.jacobian(lambda p: compose(I, p, m), P.detach())
    inside = jac[:, 2 - 1:2 - 1 + 3, 2:2 + 4]  # rows y..y+h, cols x..x+w
    assert torch.equal(inside.reshape(36, 36), torch.eye(36, dtype=torch.float64))
    assert jac.sum() == 36
    w = torch.from_numpy(rng.normal(size=(3, 8, 8)))
    loss = (torch.sin(out) * w).sum()
    (grad,) = torch.autograd.grad(loss, P)
    eps = 1e-6
    fd = np.zeros(P.shape)
    base = P.detach().numpy()
    for idx in np.ndindex(*P.shape):
        hi, lo = base.copy(), base.copy()
        hi[idx] += eps
        lo[idx] -= eps
        f = lambda arr: float((torch.sin(compose(I, torch.from_numpy(arr), m)) * w).sum())
        fd[idx] = (f(hi) - f(lo)) / (2 * eps)
    rel = np.abs(fd - grad.numpy()) / np.maximum(np.abs(fd), 1e-12)
    assert rel.max() < 1e-6


def test_compose_batch_matches_compose():
    I = torch.rand(2, 3, 10, 6)
    P = torch.rand(2, 3, 4, 3)
    out = compose_batch(I, P, [(0, 0), (3, 6)])
    for i, (x, y) in enumerate([(0, 0), (3, 6)]):
        assert torch.equal(out[i], compose(I[i], P[i], make_mask(10, 6, 4, 3, x, y)))
    with pytest.raises(PlacementError):
        compose_batch(I, P, [(0, 0), (4, 0)])
