import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enspatch.core import (
    BBox,
    Detection,
    DetectionSet,
    Patch,
    PatchMeta,
    clamp_patch,
    config_digest,
    derive_seed,
    init_patch,
    load_patch,
    make_rng,
    save_patch,
)
from enspatch.errors import ContractError, PatchFormatError, PatchSizeError


def test_init_modes():
    assert np.all(init_patch(300, "gray").pixels == 0.5)
    assert np.all(init_patch(300, "white").pixels == 1.0)
    a = init_patch(8, "random", 7)
    b = init_patch(8, "random", 7)
    c = init_patch(8, "random", 8)
    assert np.array_equal(a.pixels, b.pixels)
    assert not np.array_equal(a.pixels, c.pixels)
    assert a.pixels.shape == (8, 8, 3)
    assert a.pixels.min() >= 0.0 and a.pixels.max() <= 1.0


def test_init_rejects_small_and_unknown_mode():
    with pytest.raises(PatchSizeError):
        init_patch(7, "gray")
    with pytest.raises(ContractError):
        init_patch(16, "checkerboard")


def test_clamp_projects_out_of_range_pixels():
    px = np.full((8, 8, 3), 0.4)
    px[0, 0, 0] = 1.3
    px[1, 1, 1] = -0.2
    out = clamp_patch(Patch(px)).pixels
    assert out[0, 0, 0] == 1.0
    assert out[1, 1, 1] == 0.0
    assert out[2, 2, 2] == 0.4


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_clamp_idempotent(seed):
    px = make_rng(seed).normal(0.5, 1.0, size=(8, 8, 3))
    once = clamp_patch(Patch(px))
    assert np.array_equal(clamp_patch(once).pixels, once.pixels)
    assert once.pixels.min() >= 0.0 and once.pixels.max() <= 1.0


def test_save_load_roundtrip_within_quantization(tmp_path):
    p = init_patch(32, "gray")
    p.meta = PatchMeta(seed=4, lambda_tv=2.5, surrogate_ids=["a", "b"], epochs_trained=3, config_digest="x")
    save_patch(p, tmp_path / "patch.png")
    q = load_patch(tmp_path / "patch.png")
    assert np.max(np.abs(q.pixels - 0.5)) <= 1 / 510
    assert q.meta == p.meta
    assert json.loads((tmp_path / "patch.meta.json").read_text())["size"] == 32


def test_random_patch_roundtrip_quantization(tmp_path):
    p = init_patch(16, "random", 3)
    save_patch(p, tmp_path / "r.png")
    assert np.max(np.abs(load_patch(tmp_path / "r.png").pixels - p.pixels)) <= 1 / 510 + 1e-12


def test_truncated_file_is_format_error(tmp_path):
    save_patch(init_patch(32, "random", 1), tmp_path / "p.png")
    blob = (tmp_path / "p.png").read_bytes()
    (tmp_path / "p.png").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(PatchFormatError):
        load_patch(tmp_path / "p.png")


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(OSError):
        load_patch(tmp_path / "nothing.png")


def test_meta_size_mismatch(tmp_path):
    save_patch(init_patch(16, "gray"), tmp_path / "p.png")
    meta = json.loads((tmp_path / "p.meta.json").read_text())
    meta["size"] = 20
    (tmp_path / "p.meta.json").write_text(json.dumps(meta))
    with pytest.raises(PatchFormatError):
        load_patch(tmp_path / "p.png")


def test_patch_shape_validation():
    with pytest.raises(PatchSizeError):
        Patch(np.zeros((8, 9, 3)))
    with pytest.raises(PatchSizeError):
        Patch(np.zeros((8, 8)))
    with pytest.raises(ContractError):
        PatchMeta(lambda_tv=-1.0)


def test_bbox_and_detection_invariants():
    with pytest.raises(ContractError):
        BBox(5, 0, 5, 10)
    with pytest.raises(ContractError):
        BBox(0, 0, float("nan"), 1)
    b = BBox(0, 0, 10, 20)
    assert b.area == 200 and b.center == (5, 10)
    assert b.clip(5, 5) == BBox(0, 0, 5, 5)
    assert BBox(10, 10, 20, 20).clip(5, 5) is None
    with pytest.raises(ContractError):
        Detection(b, 0, 0.5, (0.1, 0.9))
    with pytest.raises(ContractError):
        Detection(b, 0, 1.5, (0.9, 0.1))
    ds = DetectionSet([Detection(b, 0, 0.5, (0.9, 0.1)), Detection(b, 1, 0.5, (0.1, 0.9))])
    assert len(ds.filter_classes([1])) == 1
    assert ds.filter_classes(None) is ds


def test_seed_helpers():
    with pytest.raises(ContractError):
        make_rng(None)
    g = np.random.default_rng(0)
    assert make_rng(g) is g
    assert derive_seed(1, "a") == derive_seed(1, "a") != derive_seed(1, "b")
    assert config_digest({"b": 1, "a": (1, 2)}) == config_digest({"a": [1, 2], "b": 1})
