"""Scene augmentation applied before detection: flip, small rotation, HSV jitter, scale crop.

Geometric steps are fused into one bilinear resample (reflection padding);
the color step works in HSV. :func:`augment` handles a single image and
:func:`augment_tensor` a ``B x 3 x H x W`` batch, sharing one implementation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import Image, make_rng
from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class AugmentSpec:
    flip_prob: float = 0.5
    rotation_max: float = 5.0
    hue_jitter: float = 0.02
    saturation_jitter: float = 0.2
    value_jitter: float = 0.2
    crop_scale_range: tuple = (0.8, 1.0)

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("flip_prob", "must lie in [0, 1]")
        if not 0.0 <= self.rotation_max <= 15.0:
            raise ConfigError("rotation_max", "must lie in [0, 15] degrees")
        for name in ("hue_jitter", "saturation_jitter", "value_jitter"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        if self.hue_jitter > 0.5:
            raise ConfigError("hue_jitter", "must be <= 0.5")
        if self.saturation_jitter >= 1.0 or self.value_jitter >= 1.0:
            raise ConfigError("value_jitter" if self.value_jitter >= 1 else "saturation_jitter", "must be < 1")
        lo, hi = (float(v) for v in self.crop_scale_range)
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError("crop_scale_range", "need 0 < lo <= hi <= 1")
        object.__setattr__(self, "crop_scale_range", (lo, hi))

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, (1.0, 1.0))

    @property
    def has_color(self) -> bool:
        return self.hue_jitter > 0 or self.saturation_jitter > 0 or self.value_jitter > 0


def sample_augment_params(spec: AugmentSpec, rng) -> dict:
    """Draw one image's parameters. The draw order is fixed whatever the spec."""
    rng = make_rng(rng)
    flip = bool(rng.uniform() < spec.flip_prob)
    angle = float(rng.uniform(-spec.rotation_max, spec.rotation_max))
    dh = float(rng.uniform(-spec.hue_jitter, spec.hue_jitter))
    ds = float(rng.uniform(-spec.saturation_jitter, spec.saturation_jitter))
    dv = float(rng.uniform(-spec.value_jitter, spec.value_jitter))
    lo, hi = spec.crop_scale_range
    scale = float(rng.uniform(lo, hi))
    off = (float(rng.uniform()), float(rng.uniform()))
    return {"flip": flip, "angle": angle, "hsv": (dh, ds, dv), "scale": scale, "offset": off}


def rgb_to_hsv(rgb: torch.Tensor) -> torch.Tensor:
    r, g, b = rgb.unbind(-3)
    maxc, _ = rgb.max(-3)
    minc, _ = rgb.min(-3)
    delta = maxc - minc
    s = torch.where(maxc > 0, delta / maxc.clamp_min(1e-12), torch.zeros_like(maxc))
    d = delta.clamp_min(1e-12)
    h = torch.where(
        maxc == r, ((g - b) / d) % 6.0, torch.where(maxc == g, (b - r) / d + 2.0, (r - g) / d + 4.0)
    )
    h = torch.where(delta > 0, h / 6.0, torch.zeros_like(h))
    return torch.stack([h, s, maxc], dim=-3)


def hsv_to_rgb(hsv: torch.Tensor) -> torch.Tensor:
    h, s, v = hsv.unbind(-3)
    k = lambda n: (n + h * 6.0) % 6.0  # noqa: E731
    f = lambda n: v - v * s * torch.clamp(torch.minimum(k(n), 4.0 - k(n)), 0.0, 1.0)  # noqa: E731
    return torch.stack([f(5.0), f(3.0), f(1.0)], dim=-3)


def _geometry_grid(params, H, W, dtype):
    """Sampling grid mapping output pixels to source pixels (normalized coordinates)."""
    th = math.radians(params["angle"])
    s = params["scale"]
    ox, oy = params["offset"]
    # source = Flip . Rot . (s * q + c): crop window, rotated scene, flipped original
    c = np.array([(1.0 - s) * (2.0 * ox - 1.0), (1.0 - s) * (2.0 * oy - 1.0)])
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    flip = np.diag([-1.0 if params["flip"] else 1.0, 1.0])
    A = flip @ rot
    theta = torch.tensor(np.hstack([s * A, (A @ c)[:, None]]), dtype=dtype)
    return F.affine_grid(theta[None], (1, 3, H, W), align_corners=False)


def augment_tensor(x: torch.Tensor, params: dict, spec: AugmentSpec) -> torch.Tensor:
    """Apply one image's sampled parameters to a ``3 x H x W`` tensor."""
    H, W = x.shape[-2:]
    out = x
    geometric = params["scale"] != 1.0 or (spec.rotation_max > 0 and params["angle"] != 0.0)
    if geometric:
        grid = _geometry_grid(params, H, W, x.dtype)
        out = F.grid_sample(out[None], grid, mode="bilinear", padding_mode="reflection", align_corners=False)[0]
    elif params["flip"]:
        out = out.flip(-1)
    if spec.has_color:
        dh, ds, dv = params["hsv"]
        hsv = rgb_to_hsv(out.clamp(0.0, 1.0))
        h = (hsv[0] + dh) % 1.0
        s = (hsv[1] * (1.0 + ds)).clamp(0.0, 1.0)
        v = (hsv[2] * (1.0 + dv)).clamp(0.0, 1.0)
        out = hsv_to_rgb(torch.stack([h, s, v]))
    if out is x:
        return x
    return out.clamp(0.0, 1.0)


def augment(x: Image, spec: AugmentSpec, seed) -> Image:
    """Randomly transform a scene image. Output keeps the input shape and range."""
    if x.pixels.shape[0] != x.pixels.shape[1]:
        raise ContractError("image", f"expected a square image, got {x.pixels.shape[:2]}")
    params = sample_augment_params(spec, seed)
    t = torch.from_numpy(np.ascontiguousarray(x.pixels.transpose(2, 0, 1)))
    out = augment_tensor(t, params, spec)
    if out is t:
        return x
    return Image(np.ascontiguousarray(out.numpy().transpose(1, 2, 0)), x.source_id)
