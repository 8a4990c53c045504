"""Detector adapters, the toy grid detector and a small registry keyed by model id."""

from ..errors import ConfigError
from .base import CallableDetector, DetectorAdapter, GradientHandle, check_image
from .toy import GridArch, ToyGridDetector, nms, train_toy_detector

# Three architecturally distinct toy detectors: deeper with wide kernels,
# shallow, and a finer stride-4 grid (used as the held-out transfer target).
TOY_ARCHS = {
    "toy_a": GridArch(channels=(16, 32, 48, 48), kernel_size=5, stride=8),
    "toy_b": GridArch(channels=(16, 32, 64), kernel_size=3, stride=8),
    "toy_c": GridArch(channels=(16, 24, 32, 32), kernel_size=3, stride=4),
}

_REGISTRY: dict = {}


def register(adapter: DetectorAdapter) -> DetectorAdapter:
    _REGISTRY[adapter.model_id] = adapter
    return adapter


def get_adapter(model_id: str) -> DetectorAdapter:
    try:
        return _REGISTRY[model_id]
    except KeyError:
        raise ConfigError("model_id", f"unknown detector {model_id!r}") from None


def registered_ids():
    return sorted(_REGISTRY)


def clear_registry():
    _REGISTRY.clear()


def detect(adapter: DetectorAdapter, x):
    return adapter.detect(x)


def detect_with_grads(adapter: DetectorAdapter, x):
    return adapter.detect_with_grads(x)


__all__ = [
    "CallableDetector",
    "DetectorAdapter",
    "GradientHandle",
    "GridArch",
    "TOY_ARCHS",
    "ToyGridDetector",
    "check_image",
    "clear_registry",
    "detect",
    "detect_with_grads",
    "get_adapter",
    "nms",
    "register",
    "registered_ids",
    "train_toy_detector",
]
