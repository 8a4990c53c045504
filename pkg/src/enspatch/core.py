"""Domain types, patch lifecycle and the RNG contract.

All pixel data lives in the normalized domain ``[0, 1]`` (1.0 is 8-bit 255).
Images and patches are ``H x W x 3`` float arrays; the torch code paths use
``3 x H x W`` tensors and convert at the module boundary.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage

from .errors import ContractError, PatchFormatError, PatchSizeError

DEFAULT_PATCH_SIZE = 300
DEFAULT_IMAGE_SIZE = 416
MIN_PATCH_SIZE = 8


def make_rng(seed) -> np.random.Generator:
    """Return a numpy Generator. Accepts an int seed or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        raise ContractError("seed", "an explicit seed is required")
    return np.random.default_rng(seed)


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from an arbitrary tuple of ints/strings."""
    h = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def config_digest(config) -> str:
    """sha256 over a canonical JSON rendering of ``config``."""
    if hasattr(config, "to_dict"):
        config = config.to_dict()
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(blob.encode()).hexdigest()


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (tuple, set)):
        return list(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


@dataclass
class PatchMeta:
    seed: int = 0
    lambda_tv: float = 0.0
    surrogate_ids: list = field(default_factory=list)
    epochs_trained: int = 0
    config_digest: str = ""

    def __post_init__(self):
        if self.lambda_tv < 0:
            raise ContractError("lambda_tv", "must be nonnegative")
        if self.epochs_trained < 0:
            raise ContractError("epochs_trained", "must be nonnegative")
        self.surrogate_ids = list(self.surrogate_ids)


@dataclass
class Patch:
    """Learnable square RGB pixel grid, the optimization variable."""

    pixels: np.ndarray
    meta: PatchMeta = field(default_factory=PatchMeta)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise PatchSizeError(f"patch must be HxWx3, got shape {px.shape}")
        if px.shape[0] != px.shape[1]:
            raise PatchSizeError("only square patches are supported")
        if px.shape[0] < MIN_PATCH_SIZE:
            raise PatchSizeError(f"patch side {px.shape[0]} < {MIN_PATCH_SIZE}")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def copy(self) -> "Patch":
        return Patch(self.pixels.copy(), PatchMeta(**asdict(self.meta)))


@dataclass(frozen=True)
class Image:
    pixels: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ContractError("pixels", f"image must be HxWx3, got {px.shape}")
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ContractError("bbox", f"non-finite coordinates {vals}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ContractError("bbox", f"degenerate box {vals}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center(self):
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)

    def clip(self, width, height) -> "BBox | None":
        """Clip to image bounds; None if nothing is left."""
        x1, y1 = max(0.0, self.x1), max(0.0, self.y1)
        x2, y2 = min(float(width), self.x2), min(float(height), self.y2)
        if x1 >= x2 or y1 >= y2:
            return None
        return BBox(x1, y1, x2, y2)


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_id: int
    objectness: float
    class_scores: tuple

    def __post_init__(self):
        scores = tuple(float(s) for s in self.class_scores)
        object.__setattr__(self, "class_scores", scores)
        if not 0.0 <= self.objectness <= 1.0:
            raise ContractError("objectness", f"{self.objectness} outside [0, 1]")
        if not 0 <= self.class_id < len(scores):
            raise ContractError("class_id", f"{self.class_id} outside [0, {len(scores)})")
        if int(np.argmax(scores)) != self.class_id:
            raise ContractError("class_id", "class_id must equal argmax(class_scores)")


@dataclass(frozen=True)
class DetectionSet:
    detections: tuple = ()
    image_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))

    def __len__(self):
        return len(self.detections)

    def __iter__(self):
        return iter(self.detections)

    def filter_classes(self, classes: Sequence[int] | None) -> "DetectionSet":
        if classes is None:
            return self
        keep = set(int(c) for c in classes)
        return DetectionSet([d for d in self.detections if d.class_id in keep], self.image_id)


def init_patch(size: int = DEFAULT_PATCH_SIZE, mode: str = "random", seed=0) -> Patch:
    """Create a control or starting patch: ``gray`` (0.5), ``white`` (1.0) or ``random``."""
    if int(size) < MIN_PATCH_SIZE:
        raise PatchSizeError(f"patch size must be >= {MIN_PATCH_SIZE}, got {size}")
    size = int(size)
    if mode == "gray":
        px = np.full((size, size, 3), 0.5)
    elif mode == "white":
        px = np.ones((size, size, 3))
    elif mode == "random":
        px = make_rng(seed).uniform(0.0, 1.0, size=(size, size, 3))
    else:
        raise ContractError("mode", f"unknown init mode {mode!r}")
    seed_val = int(seed) if isinstance(seed, (int, np.integer)) else 0
    return Patch(px, PatchMeta(seed=seed_val))


def clamp_patch(p: Patch) -> Patch:
    return Patch(np.clip(p.pixels, 0.0, 1.0), p.meta)


def _meta_path(path: Path) -> Path:
    name = path.name
    stem = name[: -len(".png")] if name.endswith(".png") else name
    return path.with_name(stem + ".meta.json")


def save_patch(p: Patch, path) -> None:
    """Write ``<name>.png`` (8-bit RGB) plus the ``<name>.meta.json`` sidecar.

    Both files are written to temporaries and renamed into place.
    """
    path = Path(path)
    if path.suffix != ".png":
        path = path.with_suffix(".png")
    path.parent.mkdir(parents=True, exist_ok=True)
    q = np.round(np.clip(p.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    PILImage.fromarray(q, mode="RGB").save(tmp, format="PNG")
    os.replace(tmp, path)
    meta = asdict(p.meta)
    meta["size"] = p.height
    mpath = _meta_path(path)
    mtmp = mpath.with_name(mpath.name + ".tmp")
    mtmp.write_text(json.dumps(meta, indent=2, sort_keys=True))
    os.replace(mtmp, mpath)


def load_patch(path) -> Patch:
    path = Path(path)
    if path.suffix != ".png":
        path = path.with_suffix(".png")
    mpath = _meta_path(path)
    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode != "RGB":
                raise PatchFormatError(f"{path}: expected RGB, got {im.mode}")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise
    except PatchFormatError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise PatchFormatError(f"{path}: unreadable patch image ({exc})") from exc
    try:
        meta = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise PatchFormatError(f"{mpath}: corrupt metadata ({exc})") from exc
    size = meta.pop("size", None)
    if size is not None and (arr.shape[0] != size or arr.shape[1] != size):
        raise PatchFormatError(f"{path}: metadata size {size} != image {arr.shape[:2]}")
    try:
        pm = PatchMeta(**meta)
    except TypeError as exc:
        raise PatchFormatError(f"{mpath}: bad metadata fields ({exc})") from exc
    return Patch(arr, pm)


def read_image(path, size: int | None = None, source_id: str | None = None) -> Image:
    """Load an RGB image file into the normalized domain, optionally resized square."""
    with PILImage.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), PILImage.BILINEAR)
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return Image(arr, source_id if source_id is not None else Path(path).stem)


def write_image(img, path) -> None:
    px = img.pixels if isinstance(img, Image) else np.asarray(img)
    q = np.round(np.clip(px, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    PILImage.fromarray(q, mode="RGB").save(tmp, format="PNG")
    os.replace(tmp, path)
