"""Patch application operator: placement, warping, blending and cutout.

The geometry of a placement is fully described by a :class:`TransformParams`
record, so any placement can be replayed bit-for-bit on a different patch
(used for gradient checks and for evaluating control patches on the exact
same footprints as the trained patch).

Every function here works on torch tensors laid out ``3 x H x W`` internally;
the public numpy-facing wrappers convert at the boundary.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import BBox, DetectionSet, Image, Patch, make_rng
from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class PlacementSpec:
    relative_scale: float = 0.3
    rotation_range: float = 20.0
    brightness_jitter: float = 0.0
    contrast_jitter: float = 0.0
    target_classes: tuple | None = None

    def __post_init__(self):
        if not 0.0 < self.relative_scale <= 1.0:
            raise ConfigError("relative_scale", "must lie in (0, 1]")
        if not 0.0 <= self.rotation_range <= 45.0:
            raise ConfigError("rotation_range", "must lie in [0, 45] degrees")
        if self.brightness_jitter < 0:
            raise ConfigError("brightness_jitter", "must be >= 0")
        if not 0.0 <= self.contrast_jitter < 1.0:
            raise ConfigError("contrast_jitter", "must lie in [0, 1)")
        if self.target_classes is not None:
            object.__setattr__(self, "target_classes", tuple(int(c) for c in self.target_classes))


@dataclass(frozen=True)
class CutoutSpec:
    p_crop: float = 0.5
    side_fraction_range: tuple = (0.1, 0.3)
    fill_mode: str = "patch_mean"

    def __post_init__(self):
        if not 0.0 <= self.p_crop <= 1.0:
            raise ConfigError("p_crop", "must lie in [0, 1]")
        lo, hi = (float(v) for v in self.side_fraction_range)
        if not 0.0 < lo <= hi < 1.0:
            raise ConfigError("side_fraction_range", "need 0 < lo <= hi < 1")
        object.__setattr__(self, "side_fraction_range", (lo, hi))
        if self.fill_mode not in ("zero", "patch_mean"):
            raise ConfigError("fill_mode", "must be 'zero' or 'patch_mean'")


@dataclass(frozen=True)
class TransformParams:
    """One placement exactly as applied.

    ``side`` is the on-image footprint side in pixels (0 means no-op),
    ``origin`` the (row, col) of the unrotated footprint's top-left corner.
    """

    angle: float = 0.0
    scale: float = 1.0
    side: int = 0
    origin: tuple = (0, 0)
    brightness_delta: float = 0.0
    contrast_factor: float = 1.0
    cutout_applied: bool = False
    cutout_origin: tuple = (0, 0)
    cutout_side: int = 0
    cutout_fill: float = 0.0
    cutout_fill_mode: str = "zero"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["origin"] = list(self.origin)
        d["cutout_origin"] = list(self.cutout_origin)
        return d

    @classmethod
    def from_dict(cls, d) -> "TransformParams":
        d = dict(d)
        d["origin"] = tuple(d.get("origin", (0, 0)))
        d["cutout_origin"] = tuple(d.get("cutout_origin", (0, 0)))
        return cls(**d)


def footprint_side(box: BBox, relative_scale: float) -> int:
    """Side of the square footprint: ``r * sqrt(box area)`` rounded half up."""
    return int(math.floor(relative_scale * math.sqrt(box.area) + 0.5))


def footprint_origin(box: BBox, side: int) -> tuple:
    cx, cy = box.center
    return (int(math.floor(cy - side / 2 + 0.5)), int(math.floor(cx - side / 2 + 0.5)))


def _sample_cutout(patch_size: int, cutout: CutoutSpec, rng) -> dict:
    if rng.uniform() >= cutout.p_crop:
        return {}
    lo, hi = cutout.side_fraction_range
    f = lo if lo == hi else rng.uniform(lo, hi)
    side = max(1, int(math.floor(f * patch_size + 0.5)))
    side = min(side, patch_size)
    r0 = int(rng.integers(0, patch_size - side + 1))
    c0 = int(rng.integers(0, patch_size - side + 1))
    return dict(
        cutout_applied=True,
        cutout_origin=(r0, c0),
        cutout_side=side,
        cutout_fill_mode=cutout.fill_mode,
    )


def sample_placements(boxes, patch_size: int, spec: PlacementSpec, rng, cutout: CutoutSpec | None = None):
    """Draw one :class:`TransformParams` per box (in box order)."""
    rng = make_rng(rng)
    out = []
    for box in boxes:
        side = footprint_side(box, spec.relative_scale)
        angle = rng.uniform(-spec.rotation_range, spec.rotation_range) if spec.rotation_range > 0 else 0.0
        bright = rng.uniform(-spec.brightness_jitter, spec.brightness_jitter) if spec.brightness_jitter > 0 else 0.0
        contrast = (
            rng.uniform(1.0 - spec.contrast_jitter, 1.0 + spec.contrast_jitter) if spec.contrast_jitter > 0 else 1.0
        )
        cut = _sample_cutout(patch_size, cutout, rng) if cutout is not None else {}
        out.append(
            TransformParams(
                angle=float(angle),
                scale=side / patch_size,
                side=side,
                origin=footprint_origin(box, side),
                brightness_delta=float(bright),
                contrast_factor=float(contrast),
                **cut,
            )
        )
    return out


def apply_cutout_tensor(patch: torch.Tensor, tp: TransformParams) -> torch.Tensor:
    """Overwrite the recorded cutout square of a ``3 x H x W`` patch."""
    if not tp.cutout_applied:
        return patch
    r0, c0 = tp.cutout_origin
    s = tp.cutout_side
    if tp.cutout_fill_mode == "patch_mean":
        fill = patch.mean()
    else:
        fill = patch.new_tensor(tp.cutout_fill)
    out = patch.clone()
    out[:, r0 : r0 + s, c0 : c0 + s] = fill
    return out


def _photometric(patch: torch.Tensor, tp: TransformParams) -> torch.Tensor:
    if tp.contrast_factor == 1.0 and tp.brightness_delta == 0.0:
        return patch
    return torch.clamp((patch - 0.5) * tp.contrast_factor + 0.5 + tp.brightness_delta, 0.0, 1.0)


def warp_patch(patch: torch.Tensor, tp: TransformParams):
    """Resize and rotate a patch into its on-image footprint.

    Returns ``(tile, mask, (row0, col0))``: the ``3 x h x w`` resampled
    pixels, the boolean footprint mask over the same window, and the
    window's top-left image coordinate. ``None`` for zero-size placements.
    """
    side = tp.side
    if side <= 0:
        return None
    q = _photometric(apply_cutout_tensor(patch, tp), tp)
    if q.shape[-1] != side:
        q = F.interpolate(q[None], size=(side, side), mode="bilinear", align_corners=False, antialias=True)[0]
    r0, c0 = tp.origin
    if tp.angle == 0.0:
        mask = torch.ones((side, side), dtype=torch.bool)
        return q, mask, (r0, c0)
    cy = r0 + side / 2.0
    cx = c0 + side / 2.0
    half = side * math.sqrt(2.0) / 2.0
    wr0 = int(math.floor(cy - half))
    wc0 = int(math.floor(cx - half))
    n = int(math.ceil(cy + half)) - wr0
    m = int(math.ceil(cx + half)) - wc0
    dtype = patch.dtype
    ys = torch.arange(n, dtype=dtype) + (wr0 + 0.5) - cy
    xs = torch.arange(m, dtype=dtype) + (wc0 + 0.5) - cx
    dy, dx = torch.meshgrid(ys, xs, indexing="ij")
    th = math.radians(tp.angle)
    cos, sin = math.cos(th), math.sin(th)
    # inverse rotation: image offset -> tile coordinates
    u = cos * dx + sin * dy + side / 2.0
    v = -sin * dx + cos * dy + side / 2.0
    mask = (u >= 0) & (u < side) & (v >= 0) & (v < side)
    grid = torch.stack([2.0 * u / side - 1.0, 2.0 * v / side - 1.0], dim=-1)[None]
    tile = F.grid_sample(q[None], grid, mode="bilinear", padding_mode="border", align_corners=False)[0]
    return tile, mask, (wr0, wc0)


def composite(image: torch.Tensor, patch: torch.Tensor, params) -> torch.Tensor:
    """Opaque-blend the patch into ``image`` (``3 x H x W``) for each placement.

    Pixels outside every footprint are returned untouched (same storage values).
    """
    out = image
    H, W = image.shape[-2:]
    for tp in params:
        warped = warp_patch(patch, tp)
        if warped is None:
            continue
        tile, mask, (r0, c0) = warped
        h, w = mask.shape
        ir0, ic0 = max(r0, 0), max(c0, 0)
        ir1, ic1 = min(r0 + h, H), min(c0 + w, W)
        if ir0 >= ir1 or ic0 >= ic1:
            continue
        tr0, tc0 = ir0 - r0, ic0 - c0
        sub_t = tile[:, tr0 : tr0 + ir1 - ir0, tc0 : tc0 + ic1 - ic0]
        sub_m = mask[tr0 : tr0 + ir1 - ir0, tc0 : tc0 + ic1 - ic0]
        if out is image:
            out = image.clone()
        region = out[:, ir0:ir1, ic0:ic1]
        out[:, ir0:ir1, ic0:ic1] = torch.where(sub_m, sub_t.to(out.dtype), region)
    return out


def to_chw(pixels: np.ndarray, dtype=torch.float64) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.asarray(pixels).transpose(2, 0, 1))).to(dtype)


def to_hwc(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().transpose(1, 2, 0).astype(np.float64)


def _placement_boxes(dets: DetectionSet, spec: PlacementSpec):
    return [d.box for d in dets.filter_classes(spec.target_classes)]


def place_patch(x: Image, dets: DetectionSet, p: Patch, spec: PlacementSpec, seed):
    """Apply ``p`` at the center of every (class-filtered) detection in ``dets``."""
    boxes = _placement_boxes(dets, spec)
    if not boxes:
        return x, []
    params = sample_placements(boxes, p.width, spec, seed)
    return replay(x, dets, p, params, spec), params


def replay(x: Image, dets: DetectionSet, p: Patch, params, spec: PlacementSpec | None = None) -> Image:
    """Re-apply recorded placements; bitwise-equal to the original ``place_patch`` output."""
    params = list(params)
    n = len(dets.filter_classes(spec.target_classes)) if spec is not None else len(dets)
    if params and n != len(params):
        raise ContractError("params", f"{len(params)} transform records for {n} detections")
    if not params:
        return x
    out = composite(to_chw(x.pixels), to_chw(p.pixels), params)
    return Image(to_hwc(out), x.source_id)


def cutout_patch(p: Patch, spec: CutoutSpec, seed):
    """Random square cutout on a copy of ``p``; returns ``(patch, params)``."""
    rng = make_rng(seed)
    cut = _sample_cutout(p.width, spec, rng)
    if not cut:
        return p.copy(), TransformParams(scale=1.0, side=p.width)
    r0, c0 = cut["cutout_origin"]
    s = cut["cutout_side"]
    fill = float(p.pixels.mean()) if spec.fill_mode == "patch_mean" else 0.0
    px = p.pixels.copy()
    px[r0 : r0 + s, c0 : c0 + s, :] = fill
    out = Patch(px, p.meta)
    out.meta = type(p.meta)(**asdict(p.meta))
    return out, TransformParams(scale=1.0, side=p.width, cutout_fill=fill, **cut)
