import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from enspatch.compositor import (
    CutoutSpec,
    PlacementSpec,
    TransformParams,
    composite,
    cutout_patch,
    footprint_side,
    place_patch,
    replay,
    sample_placements,
    to_chw,
)
from enspatch.core import BBox, Detection, DetectionSet, Image, init_patch
from enspatch.errors import ConfigError, ContractError

STILL = PlacementSpec(relative_scale=0.3, rotation_range=0.0)


def _dets(*boxes, cls=0):
    scores = (0.9, 0.1) if cls == 0 else (0.1, 0.9)
    return DetectionSet([Detection(b, cls, 0.9, scores) for b in boxes], "img")


def _black(size=200):
    return Image(np.zeros((size, size, 3)), "img")


def test_footprint_geometry_example():
    box = BBox(75, 85, 125, 115)  # center (100, 100), 50 x 30
    assert footprint_side(box, 0.3) == round(0.3 * math.sqrt(1500)) == 12
    out, params = place_patch(_black(), _dets(box), init_patch(16, "gray"), STILL, seed=0)
    changed = np.argwhere(np.any(out.pixels != 0.0, axis=2))
    assert changed[:, 0].min() == 94 and changed[:, 0].max() == 105
    assert changed[:, 1].min() == 94 and changed[:, 1].max() == 105
    assert params[0].side == 12 and params[0].origin == (94, 94)


def test_constant_patch_blend_semantics():
    box = BBox(40, 40, 120, 120)
    out, params = place_patch(_black(), _dets(box), init_patch(24, "gray"), STILL, seed=1)
    side = params[0].side
    r0, c0 = params[0].origin
    inside = out.pixels[r0 : r0 + side, c0 : c0 + side]
    assert np.allclose(inside, 0.5, atol=1e-12)
    mask = np.zeros(out.pixels.shape[:2], bool)
    mask[r0 : r0 + side, c0 : c0 + side] = True
    assert np.all(out.pixels[~mask] == 0.0)


def test_place_is_deterministic_and_replayable():
    spec = PlacementSpec(relative_scale=0.4, rotation_range=20.0, brightness_jitter=0.1, contrast_jitter=0.2)
    x = Image(np.random.default_rng(0).uniform(size=(96, 96, 3)), "img")
    dets = _dets(BBox(10, 10, 50, 60), BBox(40, 30, 90, 80))
    p = init_patch(16, "random", 2)
    a, pa = place_patch(x, dets, p, spec, seed=5)
    b, pb = place_patch(x, dets, p, spec, seed=5)
    assert np.array_equal(a.pixels, b.pixels) and pa == pb
    assert np.array_equal(replay(x, dets, p, pa, spec).pixels, a.pixels)
    roundtrip = [TransformParams.from_dict(t.to_dict()) for t in pa]
    assert np.array_equal(replay(x, dets, p, roundtrip, spec).pixels, a.pixels)


def test_empty_detections_and_empty_replay():
    x = _black(64)
    out, params = place_patch(x, DetectionSet(), init_patch(16, "gray"), STILL, seed=0)
    assert out is x and params == []
    assert replay(x, DetectionSet(), init_patch(16, "gray"), []) is x


def test_replay_length_mismatch():
    x = _black(64)
    dets = _dets(BBox(10, 10, 40, 40))
    _, params = place_patch(x, dets, init_patch(16, "gray"), STILL, seed=0)
    with pytest.raises(ContractError):
        replay(x, _dets(BBox(10, 10, 40, 40), BBox(20, 20, 50, 50)), init_patch(16, "gray"), params)


def test_target_class_filter():
    spec = PlacementSpec(relative_scale=0.3, rotation_range=0.0, target_classes=(1,))
    dets = DetectionSet(list(_dets(BBox(10, 10, 60, 60))) + list(_dets(BBox(100, 100, 160, 160), cls=1)))
    out, params = place_patch(_black(), dets, init_patch(16, "gray"), spec, seed=0)
    assert len(params) == 1 and params[0].origin[0] > 100


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 15), st.integers(0, 15))
def test_replay_locality(seed, i, j):
    spec = PlacementSpec(relative_scale=0.5, rotation_range=30.0)
    x = Image(np.full((80, 80, 3), 0.2), "img")
    dets = _dets(BBox(20, 20, 60, 60))
    p = init_patch(16, "random", seed)
    a, params = place_patch(x, dets, p, spec, seed=seed)
    q = p.copy()
    q.pixels[i, j] = 1.0 - q.pixels[i, j]
    b = replay(x, dets, q, params, spec)
    diff = np.any(a.pixels != b.pixels, axis=2)
    tp = params[0]
    # rotated footprint lies within the circumscribed square of the unrotated one
    half = tp.side * math.sqrt(2) / 2
    cy, cx = tp.origin[0] + tp.side / 2, tp.origin[1] + tp.side / 2
    rows, cols = np.nonzero(diff)
    assert np.all(np.abs(rows + 0.5 - cy) <= half + 1) and np.all(np.abs(cols + 0.5 - cx) <= half + 1)


def test_cutout_noop_when_probability_zero():
    p = init_patch(32, "random", 0)
    for seed in range(5):
        q, tp = cutout_patch(p, CutoutSpec(p_crop=0.0), seed)
        assert np.array_equal(q.pixels, p.pixels) and not tp.cutout_applied


def test_cutout_square_count():
    p = init_patch(300, "random", 1)
    q, tp = cutout_patch(p, CutoutSpec(p_crop=1.0, side_fraction_range=(0.2, 0.2)), seed=3)
    changed = np.any(q.pixels != p.pixels, axis=2)
    assert changed.sum() == 3600 and tp.cutout_side == 60
    r0, c0 = tp.cutout_origin
    block = q.pixels[r0 : r0 + 60, c0 : c0 + 60]
    assert np.all(block == block[0, 0, 0])
    assert block[0, 0, 0] == pytest.approx(p.pixels.mean())


def test_cutout_patch_mean_on_constant_patch():
    p = init_patch(64, "gray")
    q, tp = cutout_patch(p, CutoutSpec(p_crop=1.0, fill_mode="patch_mean"), seed=9)
    assert tp.cutout_applied
    assert np.array_equal(q.pixels, p.pixels)


def test_spec_validation():
    with pytest.raises(ConfigError):
        PlacementSpec(relative_scale=0.0)
    with pytest.raises(ConfigError):
        PlacementSpec(rotation_range=60.0)
    with pytest.raises(ConfigError):
        CutoutSpec(side_fraction_range=(0.3, 0.1))
    with pytest.raises(ConfigError):
        CutoutSpec(fill_mode="noise")


def test_zero_size_placement_is_noop():
    box = BBox(10, 10, 12, 12)
    spec = PlacementSpec(relative_scale=0.1, rotation_range=0.0)
    assert footprint_side(box, 0.1) == 0
    x = _black(32)
    out, params = place_patch(x, _dets(box), init_patch(8, "white"), spec, seed=0)
    assert np.array_equal(out.pixels, x.pixels) and params[0].side == 0


def test_composite_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    img = to_chw(rng.uniform(size=(40, 40, 3)))
    patch = to_chw(rng.uniform(size=(12, 12, 3))).requires_grad_(True)
    spec = PlacementSpec(relative_scale=0.5, rotation_range=25.0, contrast_jitter=0.1)
    cut = CutoutSpec(p_crop=1.0, side_fraction_range=(0.2, 0.2))
    params = sample_placements([BBox(5, 5, 35, 35)], 12, spec, 4, cut)
    w = to_chw(rng.normal(size=(40, 40, 3)))

    def f(t):
        return (composite(img, t, params) * w).sum()

    f(patch).backward()
    eps = 1e-6
    for c, i, j in [(0, 1, 1), (1, 6, 6), (2, 10, 3), (0, 5, 9)]:
        plus, minus = patch.detach().clone(), patch.detach().clone()
        plus[c, i, j] += eps
        minus[c, i, j] -= eps
        fd = (f(plus) - f(minus)).item() / (2 * eps)
        assert patch.grad[c, i, j].item() == pytest.approx(fd, rel=1e-4, abs=1e-7)


def test_composite_leaves_outside_pixels_bitwise():
    img = torch.rand(3, 50, 50, dtype=torch.float64)
    params = sample_placements([BBox(10, 10, 30, 30)], 8, PlacementSpec(rotation_range=0.0), 0)
    out = composite(img, torch.ones(3, 8, 8, dtype=torch.float64), params)
    tp = params[0]
    r0, c0 = tp.origin
    mask = torch.ones(50, 50, dtype=torch.bool)
    mask[r0 : r0 + tp.side, c0 : c0 + tp.side] = False
    assert torch.equal(out[:, mask], img[:, mask])
