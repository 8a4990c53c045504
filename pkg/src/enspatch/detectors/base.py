"""Detector adapter contract."""

from __future__ import annotations

import numpy as np
import torch

from ..core import BBox, Detection, DetectionSet, Image
from ..errors import CapabilityError, DetectorInputError


class GradientHandle:
    """Differentiable view of the detections selected in a forward pass.

    ``objectness`` (N,) and ``class_scores`` (N, C) are tensors attached to
    ``input`` (``3 x H x W``); build any scalar loss from them and call
    :meth:`grad` to obtain d(loss)/d(pixels) as an ``H x W x 3`` array.
    """

    def __init__(self, input, objectness, class_scores):
        self.input = input
        self.objectness = objectness
        self.class_scores = class_scores

    def grad(self, loss: torch.Tensor) -> np.ndarray:
        (g,) = torch.autograd.grad(loss, self.input, allow_unused=True)
        if g is None:
            return np.zeros(tuple(self.input.shape[1:]) + (3,))
        return g.detach().numpy().transpose(1, 2, 0).astype(np.float64)


class DetectorAdapter:
    """Uniform interface over surrogate (white-box) and evaluation detectors.

    Subclasses implement :meth:`detect`. Gradient-capable adapters also
    implement :meth:`forward` and :meth:`select`, which the loss and trainer
    use on batched tensors.
    """

    model_id: str = "detector"
    num_classes: int = 0
    input_size: int = 0
    supports_gradients: bool = False

    def detect(self, x: Image) -> DetectionSet:
        raise NotImplementedError

    def detect_batch(self, images) -> list:
        return [self.detect(x) for x in images]

    def detect_with_grads(self, x: Image):
        raise CapabilityError(f"{self.model_id} does not expose gradients")

    def forward(self, batch: torch.Tensor):
        raise CapabilityError(f"{self.model_id} does not expose gradients")

    def select(self, raw, conf_thresh=None):
        raise CapabilityError(f"{self.model_id} does not expose gradients")


class CallableDetector(DetectorAdapter):
    """Black-box adapter around ``fn(pixels HxWx3) -> iterable of
    (x1, y1, x2, y2, class_id, objectness, class_scores)``.

    Intended for plugging external detectors into evaluation.
    """

    def __init__(self, model_id, fn, num_classes, input_size=416):
        self.model_id = model_id
        self.fn = fn
        self.num_classes = num_classes
        self.input_size = input_size

    def detect(self, x: Image) -> DetectionSet:
        check_image(x)
        dets = []
        for x1, y1, x2, y2, cls, obj, scores in self.fn(x.pixels):
            dets.append(Detection(BBox(x1, y1, x2, y2), int(cls), float(obj), tuple(scores)))
        return DetectionSet(dets, x.source_id)


def check_image(x):
    if not isinstance(x, Image):
        raise DetectorInputError(f"expected Image, got {type(x).__name__}")
    px = x.pixels
    if px.shape[0] < 8 or px.shape[1] < 8 or not np.isfinite(px).all():
        raise DetectorInputError(f"malformed image {x.source_id!r} with shape {px.shape}")
