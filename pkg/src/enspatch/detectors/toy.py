"""A compact differentiable anchor-free grid detector.

Each grid cell predicts one objectness logit, ``C`` class logits and four box
terms ``(tx, ty, tw, th)``: the box center is ``(cell + sigmoid(t)) * stride``
and the size ``prior * exp(t)``. Thresholding and NMS pick cells in the
forward pass; gradients flow through the picked cells only.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core import BBox, Detection, DetectionSet, Image, make_rng
from ..errors import ContractError, TrainingError
from .base import DetectorAdapter, GradientHandle, check_image


@dataclass(frozen=True)
class GridArch:
    channels: tuple = (16, 32, 64)
    kernel_size: int = 3
    stride: int = 8
    input_size: int = 64
    num_classes: int = 3
    box_prior: float = 20.0
    conf_thresh: float = 0.25
    nms_iou: float = 0.45

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        n_down = int(round(math.log2(self.stride)))
        if 2**n_down != self.stride or n_down > len(self.channels):
            raise ContractError("stride", "must be a power of two reachable with the given layers")
        if self.input_size % self.stride:
            raise ContractError("input_size", "must be divisible by stride")
        if self.kernel_size % 2 == 0:
            raise ContractError("kernel_size", "must be odd")


class GridNet(nn.Module):
    def __init__(self, arch: GridArch):
        super().__init__()
        n_down = int(round(math.log2(arch.stride)))
        layers, c_in = [], 3
        for i, c in enumerate(arch.channels):
            layers += [
                nn.Conv2d(c_in, c, arch.kernel_size, stride=2 if i < n_down else 1, padding=arch.kernel_size // 2),
                nn.SiLU(),
            ]
            c_in = c
        self.features = nn.Sequential(*layers)
        self.head = nn.Conv2d(c_in, 5 + arch.num_classes, 1)

    def forward(self, x):
        return self.head(self.features(x))


def _init_weights(net: nn.Module, seed: int):
    g = torch.Generator().manual_seed(int(seed))
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5), generator=g)
            bound = 1.0 / math.sqrt(m.weight[0].numel())
            nn.init.uniform_(m.bias, -bound, bound, generator=g)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list:
    """Greedy class-agnostic NMS; returns kept indices in descending score order."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        if order.size == 1:
            break
        rest = order[1:]
        xx1 = np.maximum(boxes[i, 0], boxes[rest, 0])
        yy1 = np.maximum(boxes[i, 1], boxes[rest, 1])
        xx2 = np.minimum(boxes[i, 2], boxes[rest, 2])
        yy2 = np.minimum(boxes[i, 3], boxes[rest, 3])
        inter = np.clip(xx2 - xx1, 0, None) * np.clip(yy2 - yy1, 0, None)
        area_i = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
        area_r = (boxes[rest, 2] - boxes[rest, 0]) * (boxes[rest, 3] - boxes[rest, 1])
        iou = inter / np.maximum(area_i + area_r - inter, 1e-12)
        order = rest[iou <= iou_thresh]
    return keep


class ToyGridDetector(DetectorAdapter):
    supports_gradients = True

    def __init__(self, model_id: str = "toy", arch: GridArch | None = None, seed: int = 0):
        self.model_id = model_id
        self.arch = arch or GridArch()
        self.seed = int(seed)
        self.num_classes = self.arch.num_classes
        self.input_size = self.arch.input_size
        self.net = GridNet(self.arch)
        _init_weights(self.net, self.seed)
        self.net.eval()
        for prm in self.net.parameters():
            prm.requires_grad_(False)

    @property
    def dtype(self):
        return next(self.net.parameters()).dtype

    def to(self, dtype) -> "ToyGridDetector":
        self.net.to(dtype)
        return self

    # --- batched tensor interface -------------------------------------------------

    def forward(self, batch: torch.Tensor) -> dict:
        """Raw grid predictions for a ``B x 3 x H x W`` batch in ``[0, 1]``.

        Boxes are returned in the batch's own pixel coordinates.
        """
        H = batch.shape[-1]
        x = batch.to(self.dtype)
        if H != self.input_size or batch.shape[-2] != self.input_size:
            x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False)
        out = self.net((x - 0.5) / 0.25)
        return self.decode(out, scale=H / self.input_size)

    def decode(self, out: torch.Tensor, scale: float = 1.0) -> dict:
        C = self.num_classes
        B, _, G, _ = out.shape
        out = out.permute(0, 2, 3, 1)
        stride = self.arch.stride
        gy, gx = torch.meshgrid(torch.arange(G, dtype=out.dtype), torch.arange(G, dtype=out.dtype), indexing="ij")
        cx = (gx + torch.sigmoid(out[..., 1 + C])) * stride
        cy = (gy + torch.sigmoid(out[..., 2 + C])) * stride
        w = self.arch.box_prior * torch.exp(out[..., 3 + C].clamp(-4, 4))
        h = self.arch.box_prior * torch.exp(out[..., 4 + C].clamp(-4, 4))
        boxes = torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1) * scale
        return {
            "obj_logit": out[..., 0],
            "objectness": torch.sigmoid(out[..., 0]),
            "class_scores": out[..., 1 : 1 + C],
            "box_terms": out[..., 1 + C :],
            "boxes": boxes,
            "image_size": self.input_size * scale,
        }

    def select(self, raw: dict, conf_thresh: float | None = None) -> list:
        """Cells surviving the confidence threshold and NMS, per image (flat indices)."""
        thr = self.arch.conf_thresh if conf_thresh is None else conf_thresh
        obj = raw["objectness"].detach().reshape(raw["objectness"].shape[0], -1).numpy()
        boxes = raw["boxes"].detach().reshape(obj.shape[0], -1, 4).numpy()
        picked = []
        for b in range(obj.shape[0]):
            cand = np.flatnonzero(obj[b] > thr)
            if cand.size == 0:
                picked.append(np.zeros(0, dtype=np.int64))
                continue
            keep = nms(boxes[b, cand], obj[b, cand], self.arch.nms_iou)
            picked.append(cand[keep])
        return picked

    def to_detection_sets(self, raw: dict, picked: list, image_ids) -> list:
        size = raw["image_size"]
        B = raw["objectness"].shape[0]
        obj = raw["objectness"].detach().reshape(B, -1).double().numpy()
        cls = raw["class_scores"].detach().reshape(B, -1, self.num_classes).double().numpy()
        boxes = raw["boxes"].detach().reshape(B, -1, 4).double().numpy()
        sets = []
        for b, idx in enumerate(picked):
            dets = []
            for i in idx:
                x1, y1, x2, y2 = np.clip(boxes[b, i], 0.0, size)
                if x2 <= x1 or y2 <= y1:
                    continue
                scores = tuple(cls[b, i])
                dets.append(Detection(BBox(x1, y1, x2, y2), int(np.argmax(scores)), float(obj[b, i]), scores))
            sets.append(DetectionSet(dets, image_ids[b]))
        return sets

    # --- adapter contract -------------------------------------------------------

    def detect(self, x: Image) -> DetectionSet:
        return self.detect_batch([x])[0]

    def detect_batch(self, images, conf_thresh=None) -> list:
        for x in images:
            check_image(x)
        sets = []
        for start in range(0, len(images), 64):
            chunk = images[start : start + 64]
            batch = torch.from_numpy(np.stack([im.pixels.transpose(2, 0, 1) for im in chunk]))
            with torch.no_grad():
                raw = self.forward(batch)
            picked = self.select(raw, conf_thresh)
            sets += self.to_detection_sets(raw, picked, [im.source_id for im in chunk])
        return sets

    def detect_with_grads(self, x: Image, conf_thresh=None):
        check_image(x)
        inp = torch.from_numpy(np.ascontiguousarray(x.pixels.transpose(2, 0, 1))).to(self.dtype)
        inp.requires_grad_(True)
        raw = self.forward(inp[None])
        picked = self.select(raw, conf_thresh)
        dets = self.to_detection_sets(raw, picked, [x.source_id])[0]
        idx = torch.as_tensor(picked[0], dtype=torch.long)
        obj = raw["objectness"].reshape(-1)[idx]
        cls = raw["class_scores"].reshape(-1, self.num_classes)[idx]
        return dets, GradientHandle(inp, obj, cls)

    # --- persistence ------------------------------------------------------------

    def descriptor(self) -> dict:
        return {"model_id": self.model_id, "seed": self.seed, "arch": asdict(self.arch)}

    def save(self, path) -> None:
        path = Path(path).with_suffix("")
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.net.state_dict(), path.with_suffix(".pt"))
        path.with_suffix(".json").write_text(json.dumps(self.descriptor(), indent=2))

    @classmethod
    def load(cls, path) -> "ToyGridDetector":
        path = Path(path).with_suffix("")
        desc = json.loads(path.with_suffix(".json").read_text())
        det = cls(desc["model_id"], GridArch(**desc["arch"]), desc["seed"])
        det.net.load_state_dict(torch.load(path.with_suffix(".pt"), weights_only=True))
        return det


# ---------------------------------------------------------------------------
# training


def _targets(samples_boxes, samples_labels, arch: GridArch, size: int, flip):
    G = arch.input_size // arch.stride
    s = arch.input_size / size
    B = len(samples_boxes)
    obj = torch.zeros(B, G, G)
    cls = torch.full((B, G, G), -1, dtype=torch.long)
    box = torch.zeros(B, G, G, 4)
    for b, (boxes, labels) in enumerate(zip(samples_boxes, samples_labels)):
        for bx, c in zip(boxes, labels):
            x1, y1, x2, y2 = (v * s for v in bx.as_tuple())
            if flip[b]:
                x1, x2 = arch.input_size - x2, arch.input_size - x1
            cx, cy, w, h = (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1
            gj = min(int(cx // arch.stride), G - 1)
            gi = min(int(cy // arch.stride), G - 1)
            obj[b, gi, gj] = 1.0
            cls[b, gi, gj] = int(c)
            box[b, gi, gj] = torch.tensor(
                [cx / arch.stride - gj, cy / arch.stride - gi, math.log(w / arch.box_prior), math.log(h / arch.box_prior)]
            )
    return obj, cls, box


def _occlude(xb, boxes_list, arch, size, flip, prob, rng):
    """Random-erasing augmentation: paste constant or noise squares over objects (in place)."""
    s = arch.input_size / size
    for b, boxes in enumerate(boxes_list):
        for bx in boxes:
            if rng.uniform() >= prob:
                continue
            x1, y1, x2, y2 = (v * s for v in bx.as_tuple())
            if flip[b]:
                x1, x2 = arch.input_size - x2, arch.input_size - x1
            side = max(1, int(round(rng.uniform(0.2, 0.6) * math.sqrt((x2 - x1) * (y2 - y1)))))
            cx = (x1 + x2) / 2 + rng.uniform(-0.15, 0.15) * (x2 - x1)
            cy = (y1 + y2) / 2 + rng.uniform(-0.15, 0.15) * (y2 - y1)
            r0, c0 = int(round(cy - side / 2)), int(round(cx - side / 2))
            r0, c0 = max(r0, 0), max(c0, 0)
            r1, c1 = min(r0 + side, arch.input_size), min(c0 + side, arch.input_size)
            if r1 <= r0 or c1 <= c0:
                continue
            if rng.uniform() < 0.5:
                fill = torch.from_numpy(rng.uniform(0, 1, size=(3, 1, 1)).astype(np.float32))
            else:
                fill = torch.from_numpy(rng.uniform(0, 1, size=(3, r1 - r0, c1 - c0)).astype(np.float32))
            xb[b, :, r0:r1, c0:c1] = fill


def train_toy_detector(
    dataset,
    seed: int = 0,
    epochs: int = 30,
    arch: GridArch | None = None,
    model_id: str = "toy",
    lr: float = 3e-3,
    batch_size: int = 32,
    held_out=None,
    min_map: float | None = None,
    occlusion_prob: float = 0.0,
    log=None,
) -> ToyGridDetector:
    """Fit a :class:`ToyGridDetector` on a labeled manifest (seeded, single-threaded).

    With ``held_out`` and ``min_map`` set, a clean mAP@0.45 below ``min_map``
    on the held-out manifest raises :class:`TrainingError`.
    """
    if len(dataset) < 100:
        raise ContractError("dataset", f"need >= 100 labeled images, got {len(dataset)}")
    arch = arch or GridArch(num_classes=len(dataset.class_names))
    det = ToyGridDetector(model_id, arch, seed)
    rng = make_rng(seed)
    images = np.stack([dataset.image(i).pixels.transpose(2, 0, 1) for i in range(len(dataset))]).astype(np.float32)
    size = images.shape[-1]
    x_all = torch.from_numpy(images)
    if size != arch.input_size:
        x_all = F.interpolate(x_all, size=(arch.input_size,) * 2, mode="bilinear", align_corners=False)
    net = det.net
    for prm in net.parameters():
        prm.requires_grad_(True)
    net.train()
    steps_per_epoch = math.ceil(len(dataset) / batch_size)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=max(1, epochs * steps_per_epoch))
    history = []
    for epoch in range(epochs):
        perm = rng.permutation(len(dataset))
        ep_loss = 0.0
        for start in range(0, len(perm), batch_size):
            idx = perm[start : start + batch_size]
            flip = rng.uniform(size=len(idx)) < 0.5
            xb = x_all[idx].clone()
            xb[torch.from_numpy(flip)] = xb[torch.from_numpy(flip)].flip(-1)
            if occlusion_prob > 0:
                _occlude(xb, [dataset.samples[i].boxes for i in idx], arch, size, flip, occlusion_prob, rng)
            t_obj, t_cls, t_box = _targets(
                [dataset.samples[i].boxes for i in idx], [dataset.samples[i].labels for i in idx], arch, size, flip
            )
            out = net((xb - 0.5) / 0.25).permute(0, 2, 3, 1)
            C = arch.num_classes
            pos = t_obj > 0
            l_obj = F.binary_cross_entropy_with_logits(out[..., 0], t_obj, pos_weight=torch.tensor(4.0))
            if pos.any():
                l_cls = F.cross_entropy(out[..., 1 : 1 + C][pos], t_cls[pos])
                pb = out[..., 1 + C :][pos]
                tb = t_box[pos]
                l_box = F.mse_loss(torch.sigmoid(pb[:, :2]), tb[:, :2]) * 10 + F.mse_loss(pb[:, 2:], tb[:, 2:])
            else:
                l_cls = l_box = out.sum() * 0
            loss = l_obj + l_cls + l_box
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            ep_loss += float(loss.detach()) * len(idx)
        history.append(ep_loss / len(dataset))
        if log is not None:
            log(f"[{model_id}] epoch {epoch + 1}/{epochs} loss {history[-1]:.4f}")
    net.eval()
    for prm in net.parameters():
        prm.requires_grad_(False)
    if held_out is not None and min_map is not None:
        from ..evaluation import compute_map

        res = compute_map(det.detect_batch(held_out.images()), held_out.ground_truth(), 0.45)
        if res.map is None or res.map < min_map:
            raise TrainingError(
                f"{model_id}: held-out mAP {res.map} below {min_map}",
                {"loss_history": history, "map": res.map, "per_class": res.per_class},
            )
    det.train_history = history
    return det
