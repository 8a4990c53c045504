import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from matplotlib.colors import hsv_to_rgb as mpl_hsv_to_rgb
from matplotlib.colors import rgb_to_hsv as mpl_rgb_to_hsv

from enspatch.augmentation import AugmentSpec, augment, hsv_to_rgb, rgb_to_hsv
from enspatch.core import Image
from enspatch.errors import ConfigError, ContractError


def _image(seed, size=32):
    return Image(np.random.default_rng(seed).uniform(size=(size, size, 3)), f"im{seed}")


def test_identity_spec_is_bitwise():
    x = _image(0)
    out = augment(x, AugmentSpec.identity(), seed=3)
    assert np.array_equal(out.pixels, x.pixels)


def test_flip_only_mirrors_columns_and_is_involution():
    spec = AugmentSpec(1.0, 0.0, 0.0, 0.0, 0.0, (1.0, 1.0))
    x = _image(1)
    once = augment(x, spec, seed=0)
    assert np.array_equal(once.pixels, x.pixels[:, ::-1])
    assert np.array_equal(augment(once, spec, seed=5).pixels, x.pixels)


def test_seeded_determinism():
    x = _image(2)
    a = augment(x, AugmentSpec(), seed=11)
    b = augment(x, AugmentSpec(), seed=11)
    assert np.array_equal(a.pixels, b.pixels)
    assert not np.array_equal(a.pixels, augment(x, AugmentSpec(), seed=12).pixels)


@settings(max_examples=1000, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    flip=st.floats(0, 1),
    rot=st.floats(0, 15),
    hue=st.floats(0, 0.5),
    sat=st.floats(0, 0.99),
    val=st.floats(0, 0.99),
    lo=st.floats(0.05, 1.0),
)
def test_output_range_and_shape(seed, flip, rot, hue, sat, val, lo):
    spec = AugmentSpec(flip, rot, hue, sat, val, (lo, 1.0))
    x = _image(seed % 7, size=12)
    out = augment(x, spec, seed)
    assert out.pixels.shape == x.pixels.shape
    assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0


def test_hsv_matches_matplotlib():
    rgb = np.random.default_rng(0).uniform(size=(20, 20, 3))
    rgb[0, 0] = [0.3, 0.3, 0.3]
    rgb[0, 1] = [0.0, 0.0, 0.0]
    t = torch.from_numpy(rgb.transpose(2, 0, 1))
    ours = rgb_to_hsv(t).numpy().transpose(1, 2, 0)
    assert np.allclose(ours, mpl_rgb_to_hsv(rgb), atol=1e-12)
    back = hsv_to_rgb(torch.from_numpy(ours.transpose(2, 0, 1))).numpy().transpose(1, 2, 0)
    assert np.allclose(back, mpl_hsv_to_rgb(ours), atol=1e-12)
    assert np.allclose(back, rgb, atol=1e-12)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"flip_prob": 1.5},
        {"rotation_max": -1.0},
        {"hue_jitter": 0.7},
        {"saturation_jitter": 1.0},
        {"crop_scale_range": (0.9, 0.5)},
        {"crop_scale_range": (0.0, 1.0)},
    ],
)
def test_invalid_specs_rejected(kwargs):
    with pytest.raises(ConfigError):
        AugmentSpec(**kwargs)


def test_non_square_image_rejected():
    with pytest.raises(ContractError):
        augment(Image(np.zeros((8, 10, 3))), AugmentSpec(), 0)
