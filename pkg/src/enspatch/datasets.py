"""Dataset manifests, annotation loaders and the synthetic shapes generator."""

from __future__ import annotations

import json
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .core import BBox, Image, make_rng, read_image, write_image
from .errors import AnnotationParseError, ConfigError, DatasetError

SHAPE_CLASSES = ("rectangle", "disk", "triangle")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class Sample:
    image_id: str
    path: str | None
    boxes: list
    labels: list
    pixels: np.ndarray | None = field(default=None, repr=False)

    @property
    def annotations(self):
        return list(zip(self.boxes, self.labels))


@dataclass
class DatasetManifest:
    split: str
    samples: list
    class_names: list
    source_format: str
    skipped: int = 0

    def __len__(self):
        return len(self.samples)

    def ground_truth(self):
        """Per-image lists of ``(BBox, class_id)``, aligned with ``samples``."""
        return [s.annotations for s in self.samples]

    def image(self, i, size=None) -> Image:
        s = self.samples[i]
        if s.pixels is not None:
            return Image(s.pixels, s.image_id)
        if s.path is None:
            raise DatasetError(f"sample {s.image_id} has neither pixels nor a path")
        return read_image(s.path, size=size, source_id=s.image_id)

    def images(self, size=None):
        return [self.image(i, size) for i in range(len(self))]

    def subset(self, indices, split=None) -> "DatasetManifest":
        return DatasetManifest(
            split or self.split,
            [self.samples[i] for i in indices],
            list(self.class_names),
            self.source_format,
        )

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "class_names": list(self.class_names),
            "source_format": self.source_format,
            "skipped": self.skipped,
            "samples": [
                {
                    "image_id": s.image_id,
                    "path": s.path,
                    "boxes": [[float(v) for v in b.as_tuple()] for b in s.boxes],
                    "labels": [int(c) for c in s.labels],
                }
                for s in self.samples
            ],
        }

    @classmethod
    def from_dict(cls, d) -> "DatasetManifest":
        samples = [
            Sample(s["image_id"], s["path"], [BBox(*b) for b in s["boxes"]], list(s["labels"]))
            for s in d["samples"]
        ]
        return cls(d["split"], samples, list(d["class_names"]), d["source_format"], d.get("skipped", 0))

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=1))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# loaders


def _find_image(directory: Path, stem_or_name: str):
    cand = directory / stem_or_name
    if cand.suffix.lower() in IMAGE_SUFFIXES and cand.exists():
        return cand
    for suf in IMAGE_SUFFIXES:
        cand = directory / (Path(stem_or_name).stem + suf)
        if cand.exists():
            return cand
    return None


def _class_index(name, class_names, path):
    try:
        return class_names.index(name)
    except ValueError:
        raise AnnotationParseError(path, f"class {name!r} not in class table") from None


def _load_voc(root: Path, class_names):
    ann_dir = root / "Annotations"
    img_dir = root / "JPEGImages"
    if not ann_dir.is_dir():
        raise DatasetError(f"{root}: missing Annotations/ directory")
    records = []
    for xml_path in sorted(ann_dir.glob("*.xml")):
        try:
            tree = ET.parse(xml_path).getroot()
            fname = tree.findtext("filename") or (xml_path.stem + ".jpg")
            objs = []
            for obj in tree.iter("object"):
                name = obj.findtext("name").strip()
                bb = obj.find("bndbox")
                xs = [float(bb.findtext(k)) for k in ("xmin", "ymin", "xmax", "ymax")]
                # VOC pixel indices are 1-based and inclusive
                objs.append((name, (xs[0] - 1.0, xs[1] - 1.0, xs[2], xs[3])))
        except (ET.ParseError, AttributeError, TypeError, ValueError) as exc:
            raise AnnotationParseError(xml_path, f"malformed VOC annotation ({exc})") from exc
        records.append((xml_path, _find_image(img_dir, fname), objs))
    return records, class_names


def _load_coco(root: Path, class_names):
    ann = root if root.is_file() else None
    if ann is None:
        for cand in ("annotations.json", "instances.json"):
            if (root / cand).exists():
                ann = root / cand
                break
        else:
            found = sorted((root / "annotations").glob("*.json")) if (root / "annotations").is_dir() else []
            if not found:
                raise DatasetError(f"{root}: no COCO annotation json found")
            ann = found[0]
    base = ann.parent if ann.parent.name != "annotations" else ann.parent.parent
    img_dir = base / "images" if (base / "images").is_dir() else base
    try:
        doc = json.loads(ann.read_text())
        cats = {c["id"]: c["name"] for c in doc["categories"]}
        per_image = {im["id"]: [] for im in doc["images"]}
        for a in doc.get("annotations", []):
            x, y, w, h = (float(v) for v in a["bbox"])
            per_image[a["image_id"]].append((cats[a["category_id"]], (x, y, x + w, y + h)))
        images = [(im["file_name"], per_image[im["id"]]) for im in doc["images"]]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise AnnotationParseError(ann, f"malformed COCO annotation ({exc})") from exc
    if class_names is None:
        class_names = [cats[k] for k in sorted(cats)]
    records = [(ann, _find_image(img_dir, fname), objs) for fname, objs in images]
    return records, class_names


def _load_folder(root: Path, class_names):
    img_dir = root / "images"
    lab_dir = root / "labels"
    if not img_dir.is_dir() or not lab_dir.is_dir():
        raise DatasetError(f"{root}: expected images/ and labels/ subdirectories")
    if class_names is None and (root / "classes.txt").exists():
        class_names = [ln.strip() for ln in (root / "classes.txt").read_text().splitlines() if ln.strip()]
    records = []
    for txt in sorted(lab_dir.glob("*.txt")):
        img_path = _find_image(img_dir, txt.stem)
        objs = []
        for ln_no, line in enumerate(txt.read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 5:
                raise AnnotationParseError(txt, f"line {ln_no}: expected 'class cx cy w h'")
            try:
                cls = int(parts[0])
                cx, cy, w, h = (float(v) for v in parts[1:])
            except ValueError as exc:
                raise AnnotationParseError(txt, f"line {ln_no}: {exc}") from exc
            # normalized coordinates; scaled once the image size is known
            objs.append((cls, (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)))
        records.append((txt, img_path, objs))
    return records, class_names


def load_dataset(root, fmt: str, class_names=None, split: str = "all") -> DatasetManifest:
    """Load ``voc-xml``, ``coco-json`` or ``folder+txt`` annotations into a manifest.

    Entries whose image file is missing or undecodable are skipped and
    counted in ``manifest.skipped``.
    """
    root = Path(root)
    if not root.exists():
        raise DatasetError(f"{root}: does not exist")
    loaders = {"voc-xml": _load_voc, "coco-json": _load_coco, "folder+txt": _load_folder}
    if fmt not in loaders:
        raise ConfigError("format", f"unknown dataset format {fmt!r}")
    records, class_names = loaders[fmt](root, list(class_names) if class_names else None)
    if class_names is None:
        names = set()
        for _, _, objs in records:
            names.update(n for n, _ in objs if isinstance(n, str))
        class_names = sorted(names)

    samples, skipped = [], 0
    for ann_path, img_path, objs in records:
        if img_path is None:
            skipped += 1
            continue
        try:
            with PILImage.open(img_path) as im:
                W, H = im.size
        except OSError:
            skipped += 1
            continue
        boxes, labels = [], []
        for name, (x1, y1, x2, y2) in objs:
            if fmt == "folder+txt":
                x1, x2, y1, y2 = x1 * W, x2 * W, y1 * H, y2 * H
                cls = int(name)
                if class_names and not 0 <= cls < len(class_names):
                    raise AnnotationParseError(ann_path, f"class id {cls} out of range")
            else:
                cls = _class_index(name, class_names, ann_path)
            try:
                box = BBox(x1, y1, x2, y2).clip(W, H)
            except ValueError as exc:
                raise AnnotationParseError(ann_path, str(exc)) from exc
            if box is None:
                continue
            boxes.append(box)
            labels.append(cls)
        samples.append(Sample(Path(img_path).stem, str(img_path), boxes, labels))
    if not samples:
        raise DatasetError(f"{root}: no valid entries ({skipped} skipped)")
    if fmt == "folder+txt" and not class_names:
        n = 1 + max((c for s in samples for c in s.labels), default=0)
        class_names = [str(i) for i in range(n)]
    return DatasetManifest(split, samples, list(class_names), fmt, skipped)


# ---------------------------------------------------------------------------
# synthetic shapes


@dataclass(frozen=True)
class SyntheticSpec:
    num_images: int = 100
    image_size: int = 64
    shapes_per_image: tuple = (1, 3)
    classes: tuple = SHAPE_CLASSES
    size_range: tuple = (14, 28)
    noise_amplitude: float = 0.08
    min_color_distance: float = 0.45
    background_range: tuple = (0.0, 0.3)
    object_range: tuple = (0.55, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.num_images < 1:
            raise ConfigError("num_images", "must be >= 1")
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi:
            raise ConfigError("shapes_per_image", "need 1 <= lo <= hi")
        slo, shi = self.size_range
        if not 4 <= slo <= shi <= self.image_size:
            raise ConfigError("size_range", "need 4 <= lo <= hi <= image_size")
        for name in ("background_range", "object_range"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not 0.0 <= lo <= hi <= 1.0:
                raise ConfigError(name, "need 0 <= lo <= hi <= 1")
            object.__setattr__(self, name, (lo, hi))
        unknown = set(self.classes) - set(SHAPE_CLASSES)
        if unknown:
            raise ConfigError("classes", f"unknown shape classes {sorted(unknown)}")


def _shape_mask(kind, h, w, rng):
    """Boolean mask of a shape inscribed in an ``h x w`` window."""
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    if kind == "rectangle":
        return np.ones((h, w), dtype=bool)
    if kind == "disk":
        return ((yy - h / 2) / (h / 2)) ** 2 + ((xx - w / 2) / (w / 2)) ** 2 <= 1.0
    # upright triangle: apex at top center, base along the bottom row
    apex_x = w / 2
    left = xx >= apex_x - (yy / h) * (w / 2)
    right = xx <= apex_x + (yy / h) * (w / 2)
    return left & right


def _render_sample(spec: SyntheticSpec, rng):
    S = spec.image_size
    base = rng.uniform(*spec.background_range, size=3)
    bg = base + spec.noise_amplitude * rng.standard_normal((S, S, 3))
    img = np.clip(bg, 0.0, 1.0)
    n = int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))
    occupied = np.zeros((S, S), dtype=bool)
    boxes, labels = [], []
    for _ in range(n):
        cls = int(rng.integers(0, len(spec.classes)))
        kind = spec.classes[cls]
        for _attempt in range(50):
            w = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
            h = w if kind == "disk" else int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
            r0 = int(rng.integers(0, S - h + 1))
            c0 = int(rng.integers(0, S - w + 1))
            if not occupied[max(r0 - 2, 0) : r0 + h + 2, max(c0 - 2, 0) : c0 + w + 2].any():
                break
        else:
            continue
        for _attempt in range(1000):
            color = rng.uniform(*spec.object_range, size=3)
            if np.linalg.norm(color - base) >= spec.min_color_distance:
                break
        else:
            raise ConfigError("min_color_distance", "unreachable with the given color ranges")
        mask = _shape_mask(kind, h, w, rng)
        window = img[r0 : r0 + h, c0 : c0 + w]
        window[mask] = color
        occupied[r0 : r0 + h, c0 : c0 + w] = True
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        boxes.append(BBox(float(c0 + cols[0]), float(r0 + rows[0]), float(c0 + cols[-1] + 1), float(r0 + rows[-1] + 1)))
        labels.append(cls)
    return img, boxes, labels


def generate_synthetic(spec: SyntheticSpec, root=None, split: str = "synthetic") -> DatasetManifest:
    """Colored shapes on noisy backgrounds with exact boxes; deterministic in ``spec.seed``.

    When ``root`` is given the images are also written there as PNG files.
    """
    rng = make_rng(spec.seed)
    samples = []
    for i in range(spec.num_images):
        img, boxes, labels = _render_sample(spec, rng)
        image_id = f"{split}_{i:05d}"
        path = None
        if root is not None:
            path = str(Path(root) / f"{image_id}.png")
            write_image(img, path)
        samples.append(Sample(image_id, path, boxes, labels, img))
    return DatasetManifest(split, samples, list(spec.classes), "synthetic")
