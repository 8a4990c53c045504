"""mAP@IoU evaluation and attack-strength reporting."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .compositor import PlacementSpec, composite, sample_placements, to_chw, to_hwc
from .core import BBox, Image, Patch, init_patch, make_rng
from .errors import ConfigError, EnspatchError

NO_GROUND_TRUTH = "no_ground_truth"


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass
class MapResult:
    map: float | None
    per_class: dict = field(default_factory=dict)
    status: str = "ok"

    def __iter__(self):
        return iter((self.map, self.per_class))


def average_precision(tp_flags, scores, n_gt: int) -> float:
    """All-point interpolated AP from per-prediction TP flags already in rank order.

    Precision/recall are only sampled after complete groups of tied scores, so
    the result does not depend on how ties happen to be ordered.
    """
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    tp_flags = np.asarray(tp_flags, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if tp_flags.size == 0:
        return 0.0
    ctp = np.cumsum(tp_flags)
    n = np.arange(1, tp_flags.size + 1, dtype=np.float64)
    last_of_group = np.append(scores[1:] != scores[:-1], True)
    rec = ctp[last_of_group] / n_gt
    prec = ctp[last_of_group] / n[last_of_group]
    # precision envelope: max precision at any recall >= r
    env = np.maximum.accumulate(prec[::-1])[::-1]
    prev = np.concatenate([[0.0], rec[:-1]])
    return float(np.sum((rec - prev) * env))


def _match_class(preds, gts, iou_thresh):
    """Greedy matching for one class.

    ``preds``: list of (score, image_idx, BBox); ``gts``: dict image_idx -> list of BBox.
    Returns (tp flags, scores) in rank order.
    """
    order = sorted(range(len(preds)), key=lambda k: (-preds[k][0], preds[k][1], preds[k][2].as_tuple()))
    used = {img: [False] * len(boxes) for img, boxes in gts.items()}
    flags, scores = [], []
    for k in order:
        score, img, box = preds[k]
        best, best_iou = -1, -1.0
        for g, gbox in enumerate(gts.get(img, ())):
            if used[img][g]:
                continue
            v = iou(box, gbox)
            if v >= iou_thresh and v > best_iou:
                best, best_iou = g, v
        if best >= 0:
            used[img][best] = True
        flags.append(best >= 0)
        scores.append(score)
    return flags, scores


def compute_map(preds, gt, iou_thresh: float = 0.45, num_classes: int | None = None) -> MapResult:
    """Mean AP over classes that have at least one ground-truth box.

    ``preds`` is a sequence of DetectionSet, ``gt`` an aligned sequence of
    ``[(BBox, class_id), ...]`` lists. Predictions are ranked by objectness.
    Returns a :class:`MapResult`; ``map`` is a fraction in ``[0, 1]`` and is
    ``None`` (status ``no_ground_truth``) if there is no ground truth at all.
    """
    preds = list(preds)
    gt = list(gt)
    if len(preds) != len(gt):
        raise ConfigError("preds", f"{len(preds)} prediction sets for {len(gt)} images")
    gt_by_class: dict = {}
    for img, anns in enumerate(gt):
        for box, c in anns:
            if num_classes is not None and not 0 <= c < num_classes:
                raise ConfigError("class_id", f"ground-truth class {c} outside [0, {num_classes})")
            gt_by_class.setdefault(int(c), {}).setdefault(img, []).append(box)
    pred_by_class: dict = {}
    for img, dets in enumerate(preds):
        for d in dets:
            if num_classes is not None and not 0 <= d.class_id < num_classes:
                raise ConfigError("class_id", f"predicted class {d.class_id} outside [0, {num_classes})")
            pred_by_class.setdefault(d.class_id, []).append((d.objectness, img, d.box))
    if not gt_by_class:
        return MapResult(None, {}, NO_GROUND_TRUTH)
    per_class = {}
    for c in sorted(gt_by_class):
        n_gt = sum(len(v) for v in gt_by_class[c].values())
        flags, scores = _match_class(pred_by_class.get(c, []), gt_by_class[c], iou_thresh)
        per_class[c] = average_precision(flags, scores, n_gt)
    return MapResult(float(np.mean(list(per_class.values()))), per_class)


# ---------------------------------------------------------------------------
# attack reports

CONTROL_MODES = ("gray", "noise", "white")


def control_patch(mode: str, size: int, seed=0) -> Patch:
    """Non-optimized reference patch: uniform gray, uniform noise or white."""
    if mode not in CONTROL_MODES:
        raise ConfigError("control", f"must be one of {CONTROL_MODES}")
    return init_patch(size, "random" if mode == "noise" else mode, seed)


def _pct(v):
    return None if v is None else 100.0 * float(v)


@dataclass
class DetectorEval:
    """One evaluation detector's numbers, all mAP values in percent."""

    model_id: str
    clean: float | None
    patched: float | None
    controls: dict = field(default_factory=dict)
    per_class_clean: dict = field(default_factory=dict)
    per_class_patched: dict = field(default_factory=dict)

    @property
    def drop(self):
        if self.clean is None or self.patched is None:
            return None
        return self.clean - self.patched


@dataclass
class EvalReport:
    detectors: dict = field(default_factory=dict)
    transfer: dict = field(default_factory=dict)
    config_digest: str = ""
    status: str = "ok"

    def to_dict(self) -> dict:
        dets = {}
        for mid, d in self.detectors.items():
            dets[mid] = {
                "clean": d.clean,
                "patched": d.patched,
                "drop": d.drop,
                "controls": dict(d.controls),
                "per_class_clean": {str(k): v for k, v in d.per_class_clean.items()},
                "per_class_patched": {str(k): v for k, v in d.per_class_patched.items()},
            }
        return {
            "detectors": dets,
            "transfer": {k: dict(v) for k, v in self.transfer.items()},
            "config_digest": self.config_digest,
            "status": self.status,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> "ResultTable":
        cols = ["clean", "patch"] + list(CONTROL_MODES) + ["drop"]
        rows = []
        for mid, d in self.detectors.items():
            rows.append((mid, [d.clean, d.patched] + [d.controls.get(m) for m in CONTROL_MODES] + [d.drop]))
        return ResultTable("detector", cols, rows)

    def render_text(self) -> str:
        return self.table().to_text()

    def to_csv(self) -> str:
        return self.table().to_csv()


@dataclass
class ResultTable:
    """Row-labelled numeric grid rendered as text, CSV or JSON."""

    row_header: str
    columns: list
    rows: list  # [(label, [value or None, ...])]
    status: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "columns": list(self.columns),
            "rows": [{"label": lab, "values": list(vals), "status": self.status.get(lab, "ok")} for lab, vals in self.rows],
        }

    def to_text(self, precision: int = 2) -> str:
        def fmt(v):
            return "-" if v is None else f"{v:.{precision}f}"

        cells = [[self.row_header] + [str(c) for c in self.columns]]
        for lab, vals in self.rows:
            note = self.status.get(lab)
            cells.append([lab] + ([note] + [""] * (len(self.columns) - 1) if note else [fmt(v) for v in vals]))
        widths = [max(len(r[i]) for r in cells) for i in range(len(cells[0]))]
        lines = []
        for n, r in enumerate(cells):
            lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
            if n == 0:
                lines.append("-" * len(lines[0]))
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.row_header] + list(self.columns))
        for lab, vals in self.rows:
            w.writerow([lab] + ["" if v is None else f"{v:.6f}" for v in vals])
        return buf.getvalue()

    def value(self, row, column):
        j = list(self.columns).index(column)
        for lab, vals in self.rows:
            if lab == row:
                return vals[j]
        raise KeyError(row)


def _as_images_and_gt(dataset, gt):
    if hasattr(dataset, "images") and callable(dataset.images):
        images = dataset.images()
        if gt is None:
            gt = dataset.ground_truth()
    else:
        images = list(dataset)
    if gt is None:
        raise ConfigError("gt", "ground truth required for evaluation")
    gt = list(gt)
    if len(gt) != len(images):
        raise ConfigError("gt", f"{len(gt)} annotation lists for {len(images)} images")
    return images, gt


def eval_placements(gt, patch_size: int, spec: PlacementSpec, seed=0) -> list:
    """Per-image placement parameters drawn at the ground-truth boxes."""
    rng = make_rng(seed)
    out = []
    for anns in gt:
        boxes = [b for b, c in anns if spec.target_classes is None or c in spec.target_classes]
        out.append(sample_placements(boxes, patch_size, spec, rng))
    return out


def apply_placements(images, p: Patch, placements) -> list:
    """Composite ``p`` into every image with pre-drawn parameters (no gradients)."""
    pt = to_chw(p.pixels)
    out = []
    with torch.no_grad():
        for im, params in zip(images, placements):
            if not any(tp.side > 0 for tp in params):
                out.append(im)
                continue
            adv = composite(to_chw(im.pixels), pt, params)
            out.append(Image(np.ascontiguousarray(to_hwc(adv)), im.source_id))
    return out


def evaluate_attack(
    p: Patch,
    dataset,
    gt=None,
    adapters=(),
    spec: PlacementSpec | None = None,
    seed=0,
    controls=CONTROL_MODES,
    config_digest: str = "",
) -> EvalReport:
    """Clean, patched and control-patch mAP for every evaluation detector.

    Placements are drawn once at the ground-truth boxes and replayed for the
    control patches so every row uses the same footprints.
    """
    images, gt = _as_images_and_gt(dataset, gt)
    spec = spec or PlacementSpec()
    placements = eval_placements(gt, p.width, spec, seed)
    patched = apply_placements(images, p, placements)
    ctl_images = {m: apply_placements(images, control_patch(m, p.width, seed), placements) for m in controls}
    max_cls = max((c for anns in gt for _, c in anns), default=-1)
    report = EvalReport(config_digest=config_digest or (p.meta.config_digest if p.meta else ""))
    for adapter in adapters:
        nc = getattr(adapter, "num_classes", None)
        if nc is not None and max_cls >= nc:
            raise ConfigError("adapters", f"{adapter.model_id} has {nc} classes, dataset uses class {max_cls}")
        clean = compute_map(adapter.detect_batch(images), gt)
        adv = compute_map(adapter.detect_batch(patched), gt)
        ctl = {m: _pct(compute_map(adapter.detect_batch(ims), gt).map) for m, ims in ctl_images.items()}
        report.detectors[adapter.model_id] = DetectorEval(
            adapter.model_id,
            _pct(clean.map),
            _pct(adv.map),
            ctl,
            {k: _pct(v) for k, v in clean.per_class.items()},
            {k: _pct(v) for k, v in adv.per_class.items()},
        )
        if clean.map is None:
            report.status = NO_GROUND_TRUTH
    return report


# ---------------------------------------------------------------------------
# ensemble comparison and ablation


def _label(ids) -> str:
    return "+".join(ids)


def _train_and_eval(config, train_set, eval_set, gt, surrogates, eval_adapters, spec, seed):
    from .trainer import train

    patch, _ = train(config, train_set, surrogates)
    rep = evaluate_attack(patch, eval_set, gt, eval_adapters, spec or config.placement, seed, controls=())
    return [rep.detectors[a.model_id].patched for a in eval_adapters]


def _grid(row_header, labels, runs, eval_adapters):
    cols = [a.model_id for a in eval_adapters] + ["average"]
    rows, status = [], {}
    for lab, vals in zip(labels, runs):
        if isinstance(vals, str):
            rows.append((lab, [None] * len(cols)))
            status[lab] = vals
        else:
            rows.append((lab, list(vals) + [float(np.mean(vals))]))
    return ResultTable(row_header, cols, rows, status)


def compare_ensembles(
    configs, train_set, eval_set, gt=None, eval_adapters=(), base_config=None, surrogates=None, spec=None, seed=0
) -> ResultTable:
    """Train one patch per surrogate subset under the same budget and evaluate each.

    ``configs`` lists surrogate subsets as model-id sequences resolved through
    ``surrogates`` (a dict id -> adapter). A failing subset is reported as a
    failed row; the others still run.
    """
    from .trainer import TrainConfig

    configs = [tuple(c) for c in configs]
    if len(configs) < 2:
        raise ConfigError("configs", "need at least two ensemble configurations")
    surrogates = dict(surrogates or {})
    base_config = base_config or TrainConfig()
    eval_adapters = list(eval_adapters)
    runs = []
    for ids in configs:
        try:
            missing = [i for i in ids if i not in surrogates]
            if missing:
                raise ConfigError("surrogates", f"unknown surrogate ids {missing}")
            cfg = replace(base_config, surrogate_ids=ids)
            runs.append(_train_and_eval(cfg, train_set, eval_set, gt, [surrogates[i] for i in ids], eval_adapters, spec, seed))
        except EnspatchError as exc:
            runs.append(f"failed: {exc}")
    return _grid("surrogates", [_label(c) for c in configs], runs, eval_adapters)


ABLATIONS = (
    ("full", {}),
    ("-dynamic weight", {"dynamic_weights": False}),
    ("-patch cutout", {"cutout": None}),
    ("-classification loss", {"coupling": "obj_only"}),
    ("-total variation loss", {"lambda_tv": 0.0}),
)


def run_ablation(base_config, train_set, eval_set, gt=None, surrogates=(), eval_adapters=(), spec=None, seed=0) -> ResultTable:
    """Train the full method and each single-module ablation; one row per variant."""
    surrogates = list(surrogates)
    eval_adapters = list(eval_adapters)
    labels, runs = [], []
    for name, change in ABLATIONS:
        labels.append(name)
        try:
            cfg = replace(base_config, **change)
            runs.append(_train_and_eval(cfg, train_set, eval_set, gt, surrogates, eval_adapters, spec, seed))
        except EnspatchError as exc:
            runs.append(f"failed: {exc}")
    return _grid("variant", labels, runs, eval_adapters)
