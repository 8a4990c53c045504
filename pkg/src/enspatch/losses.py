"""Attack losses and the ensemble objective.

Per surrogate ``m`` the objective is ``L_m = L_obj * L_cls + lambda_tv * L_tv``
(or ``L_obj + ...`` under the ablation couplings), and the ensemble loss is
``sum_m alpha_m * L_m``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .augmentation import AugmentSpec, augment_tensor, sample_augment_params
from .compositor import CutoutSpec, PlacementSpec, composite, sample_placements, to_chw
from .core import BBox, DetectionSet, Patch, derive_seed, make_rng
from .errors import ConfigError, ContractError, EnspatchError, NumericError

TV_FLOOR = 0.1
COUPLINGS = ("product", "additive", "obj_only")


@dataclass
class LossBreakdown:
    l_obj: float
    l_cls: float
    l_tv: float
    l_total: float
    per_model: list = field(default_factory=list)
    n_detections: int = 0


@dataclass(frozen=True)
class AttackSpec:
    """Everything the objective needs besides the patch, images and models."""

    placement: PlacementSpec = PlacementSpec()
    cutout: CutoutSpec | None = CutoutSpec()
    augment: AugmentSpec | None = AugmentSpec()
    lambda_tv: float = 2.5
    tv_floor: float = TV_FLOOR
    coupling: str = "product"
    target_classes: tuple | None = None
    obj_threshold: float = 0.1

    def __post_init__(self):
        if self.lambda_tv < 0:
            raise ConfigError("lambda_tv", "must be >= 0")
        if self.tv_floor < 0:
            raise ConfigError("tv_floor", "must be >= 0")
        if self.coupling not in COUPLINGS:
            raise ConfigError("coupling", f"must be one of {COUPLINGS}")
        if not 0.0 <= self.obj_threshold < 1.0:
            raise ConfigError("obj_threshold", "must lie in [0, 1)")
        if self.target_classes is not None:
            object.__setattr__(self, "target_classes", tuple(int(c) for c in self.target_classes))


# ---------------------------------------------------------------------------
# individual terms


def obj_loss(dets: DetectionSet, target_classes=None, min_objectness: float = 0.0) -> float:
    """Mean objectness over target-class detections above ``min_objectness``; 0 if none."""
    vals = [d.objectness for d in dets.filter_classes(target_classes) if d.objectness > min_objectness]
    return float(np.mean(vals)) if vals else 0.0


def cls_loss(class_scores, target_class: int) -> float:
    """Cross-entropy ``-log softmax(scores)[target]`` for one prediction."""
    f = np.asarray(class_scores, dtype=np.float64)
    if f.ndim != 1 or f.size < 2:
        raise ContractError("class_scores", "need a vector of at least two logits")
    if not np.all(np.isfinite(f)):
        raise NumericError("non-finite class logits")
    if not 0 <= target_class < f.size:
        raise ContractError("target_class", f"{target_class} outside [0, {f.size})")
    m = f.max()
    return float(m + math.log(np.exp(f - m).sum()) - f[target_class])


def cls_loss_set(dets: DetectionSet, target_class: int | None = None) -> float:
    """Mean cross-entropy over a detection set; each detection's own class when
    ``target_class`` is None. 0 for an empty set."""
    vals = [cls_loss(d.class_scores, d.class_id if target_class is None else target_class) for d in dets]
    return float(np.mean(vals)) if vals else 0.0


def tv_raw(pixels: np.ndarray) -> float:
    """Sum of absolute horizontal and vertical neighbor differences over all channels."""
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim == 2:
        px = px[..., None]
    return float(np.abs(np.diff(px, axis=1)).sum() + np.abs(np.diff(px, axis=0)).sum())


def tv_loss(p, floor: float = TV_FLOOR, normalize: bool = True) -> float:
    """Total variation of a patch (or ``H x W [x C]`` array), floored at ``floor``.

    With ``normalize`` the raw sum is divided by ``C * H * W``.
    """
    px = p.pixels if isinstance(p, Patch) else np.asarray(p, dtype=np.float64)
    if px.ndim == 2:
        px = px[..., None]
    raw = tv_raw(px)
    if normalize:
        raw /= px.size
    return max(raw, floor)


def tv_loss_tensor(patch: torch.Tensor, floor: float = TV_FLOOR, normalize: bool = True) -> torch.Tensor:
    """Differentiable TV of a ``C x H x W`` tensor; zero gradient below the floor."""
    raw = (patch[:, :, 1:] - patch[:, :, :-1]).abs().sum() + (patch[:, 1:, :] - patch[:, :-1, :]).abs().sum()
    if normalize:
        raw = raw / patch.numel()
    return torch.clamp(raw, min=floor)


# ---------------------------------------------------------------------------
# ensemble objective


def couple(l_obj, l_cls, l_tv, spec: AttackSpec):
    if spec.coupling == "product":
        attack = l_obj * l_cls
    elif spec.coupling == "additive":
        attack = l_obj + l_cls
    else:
        attack = l_obj
    return attack + spec.lambda_tv * l_tv


def _boxes_from_raw(adapter, raw, picked, b, target_classes):
    boxes_t = raw["boxes"][b].reshape(-1, 4).detach().double().numpy()
    cls_t = raw["class_scores"][b].reshape(-1, adapter.num_classes).detach().numpy()
    size = raw["image_size"]
    out = []
    for i in picked[b]:
        if target_classes is not None and int(np.argmax(cls_t[i])) not in target_classes:
            continue
        x1, y1, x2, y2 = np.clip(boxes_t[i], 0.0, size)
        if x2 > x1 and y2 > y1:
            out.append(BBox(x1, y1, x2, y2))
    return out


def model_objective(adapter, patch: torch.Tensor, batch: torch.Tensor, spec: AttackSpec, rng):
    """``(L_m tensor, l_obj, l_cls, n_dets, params)`` for one surrogate on one batch.

    Clean detections on ``batch`` decide where the patch goes; the patched
    batch is re-detected and its surviving target-class cells form the loss.
    """
    with torch.no_grad():
        raw = adapter.forward(batch)
    picked = adapter.select(raw)
    adv, all_params = [], []
    for b in range(batch.shape[0]):
        boxes = _boxes_from_raw(adapter, raw, picked, b, spec.target_classes)
        params = sample_placements(boxes, patch.shape[-1], spec.placement, rng, spec.cutout)
        all_params.append(params)
        adv.append(composite(batch[b], patch, params))
    adv = torch.stack(adv)
    raw_adv = adapter.forward(adv)
    picked_adv = adapter.select(raw_adv, conf_thresh=spec.obj_threshold)
    C = adapter.num_classes
    objs, logits = [], []
    for b, idx in enumerate(picked_adv):
        if len(idx) == 0:
            continue
        idx_t = torch.as_tensor(idx, dtype=torch.long)
        o = raw_adv["objectness"][b].reshape(-1)[idx_t]
        c = raw_adv["class_scores"][b].reshape(-1, C)[idx_t]
        if spec.target_classes is not None:
            keep = torch.as_tensor([int(k) in spec.target_classes for k in c.argmax(-1).tolist()])
            o, c = o[keep], c[keep]
        objs.append(o)
        logits.append(c)
    l_tv = tv_loss_tensor(patch, spec.tv_floor)
    n = sum(len(o) for o in objs)
    if n == 0:
        return spec.lambda_tv * l_tv, 0.0, 0.0, 0, all_params
    o = torch.cat(objs)
    c = torch.cat(logits)
    l_obj = o.mean()
    l_cls = F.cross_entropy(c, c.argmax(-1).detach())
    return couple(l_obj, l_cls, l_tv, spec), float(l_obj.detach()), float(l_cls.detach()), n, all_params


def augment_batch(images, spec: AugmentSpec | None, rng, dtype=torch.float32) -> torch.Tensor:
    """Stack a list of :class:`Image` to ``B x 3 x H x W`` and augment each (seeds drawn from ``rng``)."""
    rng = make_rng(rng)
    x = torch.from_numpy(np.ascontiguousarray(np.stack([im.pixels.transpose(2, 0, 1) for im in images]))).to(dtype)
    if spec is None:
        return x
    return torch.stack([augment_tensor(x[b], sample_augment_params(spec, int(rng.integers(2**62))), spec) for b in range(len(x))])


def ensemble_objective(patch: torch.Tensor, batch: torch.Tensor, adapters, alphas, spec: AttackSpec, seed):
    """Weighted ensemble loss tensor plus its :class:`LossBreakdown`.

    Surrogates are evaluated in list order; each draws placements from its own
    stream derived from ``seed`` so results do not depend on the ensemble size.
    """
    if not adapters:
        raise ContractError("adapters", "need at least one surrogate")
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.shape != (len(adapters),) or abs(alphas.sum() - 1.0) > 1e-9 or (alphas < 0).any():
        raise ContractError("alphas", "weights must lie on the probability simplex")
    total = patch.new_zeros(())
    per_model, l_obj, l_cls, n_total = [], 0.0, 0.0, 0
    for a, adapter in zip(alphas, adapters):
        rng = make_rng(derive_seed(seed, adapter.model_id))
        try:
            l_m, lo, lc, n, _ = model_objective(adapter, patch, batch, spec, rng)
        except EnspatchError:
            raise
        except Exception as exc:  # adapter failure: re-raise tagged with the model id
            raise EnspatchError(f"surrogate {adapter.model_id!r} failed: {exc}") from exc
        total = total + float(a) * l_m
        per_model.append((adapter.model_id, float(l_m.detach())))
        l_obj += float(a) * lo
        l_cls += float(a) * lc
        n_total += n
    l_tv = float(tv_loss_tensor(patch.detach(), spec.tv_floor))
    return total, LossBreakdown(l_obj, l_cls, l_tv, float(total.detach()), per_model, n_total)


def total_loss(p: Patch, batch, adapters, weights, spec: AttackSpec, seed, dtype=torch.float64):
    """Evaluate the ensemble objective for a patch and return ``(breakdown, grad)``.

    ``batch`` is a list of :class:`Image`; ``grad`` is d(l_total)/d(pixels)
    with the patch's ``H x W x 3`` layout.
    """
    rng = make_rng(seed)
    x = augment_batch(batch, spec.augment, rng, dtype)
    for a in adapters:
        if not getattr(a, "supports_gradients", False):
            raise ContractError("adapters", f"{a.model_id} is not gradient-capable")
    pt = to_chw(p.pixels, dtype).requires_grad_(True)
    loss, breakdown = ensemble_objective(pt, x, adapters, weights, spec, int(rng.integers(2**62)))
    if not math.isfinite(breakdown.l_total):
        raise NumericError(f"non-finite loss {breakdown.l_total}")
    (g,) = torch.autograd.grad(loss, pt)
    return breakdown, g.detach().numpy().transpose(1, 2, 0).astype(np.float64)
