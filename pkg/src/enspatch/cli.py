"""Command-line entry point: ``enspatch {train,apply,evaluate,compare,ablate}``.

Every command reads one YAML run config. The whole config is validated
before any work starts; a bad field exits with status 2 and a message that
names the field and its line. Training failures exit with status 1.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .augmentation import AugmentSpec
from .compositor import CutoutSpec, PlacementSpec, place_patch
from .core import Image, config_digest, derive_seed, load_patch, read_image, save_patch, write_image
from .datasets import SyntheticSpec, generate_synthetic, load_dataset
from .detectors import TOY_ARCHS, GridArch, ToyGridDetector, train_toy_detector
from .errors import ConfigError, EnspatchError, TrainingError
from .evaluation import compare_ensembles, evaluate_attack, run_ablation
from .trainer import TrainConfig, train

CACHE_ENV = "ENSPATCH_CACHE"

# ---------------------------------------------------------------------------
# YAML with line numbers


def _compose(node, path, lines):
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = str(yaml.safe_load(yaml.serialize(k)))
            out[key] = _compose(v, path + (key,), lines)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_compose(v, path + (i,), lines) for i, v in enumerate(node.value)]
    return yaml.safe_load(yaml.serialize(node))


def read_config(path):
    """Parse a YAML file into ``(dict, {key path: line})``."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from None
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError("config", f"invalid YAML: {getattr(exc, 'problem', exc)}", mark.line + 1 if mark else None) from None
    lines = {}
    data = _compose(node, (), lines) if node is not None else {}
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be a mapping", 1)
    return data, lines


# ---------------------------------------------------------------------------
# run config


@dataclass
class DetectorSpec:
    model_id: str
    arch: GridArch | None = None
    path: str | None = None
    init_seed: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    dataset: dict = field(default_factory=dict)
    eval_dataset: dict = field(default_factory=dict)
    detector_training: dict = field(default_factory=dict)
    detectors: dict = field(default_factory=dict)
    surrogates: tuple = ()
    eval_detectors: tuple = ()
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_placement: PlacementSpec = field(default_factory=PlacementSpec)
    compare: tuple = ()
    apply_detector: str | None = None
    source: dict = field(default_factory=dict)


TOP_KEYS = {
    "seed", "dataset", "eval_dataset", "detector_training", "detectors", "surrogates",
    "eval_detectors", "train", "placement", "eval_placement", "augment", "cutout", "compare", "apply",
}
DATASET_KEYS = {"synthetic", "root", "format", "class_names"}
DETECTOR_TRAINING_KEYS = {"synthetic", "epochs", "lr", "batch_size", "min_map", "occlusion_prob", "held_out"}
DETECTOR_KEYS = {"arch", "path", "init_seed"}
TRAIN_SKIP = {"augment", "placement", "cutout", "surrogate_ids", "seed", "target_classes"}


class _Ctx:
    def __init__(self, lines):
        self.lines = lines

    def error(self, path, message):
        line = None
        p = tuple(path)
        while p and line is None:
            line = self.lines.get(p)
            p = p[:-1]
        return ConfigError(".".join(str(x) for x in path), message, line)

    def mapping(self, value, path, allowed=None):
        if value is None:
            return {}
        if not isinstance(value, dict):
            raise self.error(path, "expected a mapping")
        if allowed is not None:
            for k in value:
                if k not in allowed:
                    raise self.error(tuple(path) + (k,), f"unknown key (allowed: {', '.join(sorted(allowed))})")
        return value

    def build(self, cls, value, path, skip=()):
        """Instantiate dataclass ``cls`` from a mapping, mapping every failure to a field-named error."""
        names = [f.name for f in dataclasses.fields(cls) if f.name not in skip]
        value = self.mapping(value, path, set(names))
        defaults = {f.name: f.default for f in dataclasses.fields(cls)}
        for k, v in value.items():
            if isinstance(v, list):
                value[k] = v = tuple(v)
            d = defaults.get(k)
            if isinstance(d, (int, float)) and not isinstance(d, bool):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise self.error(tuple(path) + (k,), f"expected a number, got {v!r}")
                if isinstance(d, int) and not isinstance(v, int):
                    raise self.error(tuple(path) + (k,), f"expected an integer, got {v!r}")
            elif isinstance(d, bool) and not isinstance(v, bool):
                raise self.error(tuple(path) + (k,), f"expected true or false, got {v!r}")
        try:
            return cls(**value)
        except ConfigError as exc:
            raise self.error(tuple(path) + (exc.field,), exc.message) from None
        except (TypeError, ValueError) as exc:
            bad = next((k for k in value if k in str(exc)), None)
            raise self.error(tuple(path) + ((bad,) if bad else ()), f"invalid value: {exc}") from None


def _int(ctx, v, path):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ctx.error(path, f"expected an integer, got {v!r}")
    return v


def _ids(ctx, v, path):
    if isinstance(v, str):
        v = [v]
    if not isinstance(v, list) or not all(isinstance(x, str) for x in v):
        raise ctx.error(path, "expected a list of detector ids")
    return tuple(v)


def _dataset(ctx, raw, path):
    raw = ctx.mapping(raw, path, DATASET_KEYS)
    if "synthetic" in raw:
        if "root" in raw:
            raise ctx.error(path, "give either synthetic or root, not both")
        spec = ctx.build(SyntheticSpec, dict(ctx.mapping(raw["synthetic"], path + ("synthetic",))), path + ("synthetic",))
        return {"synthetic": spec}
    if "root" not in raw:
        raise ctx.error(path, "needs a synthetic section or a root directory")
    fmt = raw.get("format", "folder+txt")
    if fmt not in ("voc-xml", "coco-json", "folder+txt"):
        raise ctx.error(path + ("format",), "must be voc-xml, coco-json or folder+txt")
    return {"root": str(raw["root"]), "format": fmt, "class_names": raw.get("class_names")}


def parse_run_config(data: dict, lines: dict, seed_override=None) -> RunConfig:
    ctx = _Ctx(lines)
    ctx.mapping(data, (), TOP_KEYS)
    rc = RunConfig(source=data)
    rc.seed = _int(ctx, data.get("seed", 0), ("seed",))
    if seed_override is not None:
        rc.seed = int(seed_override)
    if "dataset" in data:
        rc.dataset = _dataset(ctx, data["dataset"], ("dataset",))
    if "eval_dataset" in data:
        rc.eval_dataset = _dataset(ctx, data["eval_dataset"], ("eval_dataset",))

    dt = dict(ctx.mapping(data.get("detector_training"), ("detector_training",), DETECTOR_TRAINING_KEYS))
    if "synthetic" in dt:
        dt["synthetic"] = ctx.build(SyntheticSpec, dict(ctx.mapping(dt["synthetic"], ("detector_training", "synthetic"))), ("detector_training", "synthetic"))
    if "held_out" in dt:
        dt["held_out"] = ctx.build(SyntheticSpec, dict(ctx.mapping(dt["held_out"], ("detector_training", "held_out"))), ("detector_training", "held_out"))
    for k in ("epochs", "batch_size"):
        if k in dt and (_int(ctx, dt[k], ("detector_training", k)) <= 0):
            raise ctx.error(("detector_training", k), "must be positive")
    for k, lo, hi in (("lr", 0.0, 1.0), ("min_map", 0.0, 1.0), ("occlusion_prob", 0.0, 1.0)):
        if k in dt:
            v = dt[k]
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not lo <= v <= hi or (k == "lr" and v <= 0):
                raise ctx.error(("detector_training", k), f"must lie in [{lo}, {hi}]")
    rc.detector_training = dt

    dets = ctx.mapping(data.get("detectors"), ("detectors",))
    for mid, spec in dets.items():
        p = ("detectors", mid)
        if spec is None:
            spec = {}
        if isinstance(spec, str):
            spec = {"arch": spec}
        spec = ctx.mapping(spec, p, DETECTOR_KEYS)
        arch = spec.get("arch", mid if mid in TOY_ARCHS else None)
        if isinstance(arch, str):
            if arch not in TOY_ARCHS:
                raise ctx.error(p + ("arch",), f"unknown architecture {arch!r} (known: {', '.join(TOY_ARCHS)})")
            arch = TOY_ARCHS[arch]
        elif isinstance(arch, dict):
            arch = ctx.build(GridArch, dict(arch), p + ("arch",))
        elif arch is not None:
            raise ctx.error(p + ("arch",), "expected an architecture name or mapping")
        if arch is None and "path" not in spec:
            raise ctx.error(p, "needs an arch or a weights path")
        rc.detectors[mid] = DetectorSpec(mid, arch, spec.get("path"), _int(ctx, spec.get("init_seed", 1), p + ("init_seed",)))

    rc.surrogates = _ids(ctx, data.get("surrogates", []), ("surrogates",))
    rc.eval_detectors = _ids(ctx, data.get("eval_detectors", list(rc.detectors)), ("eval_detectors",))
    for key, ids in (("surrogates", rc.surrogates), ("eval_detectors", rc.eval_detectors)):
        for i, mid in enumerate(ids):
            if mid not in rc.detectors:
                raise ctx.error((key, i), f"unknown detector id {mid!r}")

    placement = ctx.build(PlacementSpec, dict(ctx.mapping(data.get("placement"), ("placement",))), ("placement",))
    if "eval_placement" in data:
        merged = dataclasses.asdict(placement)
        merged.update(ctx.mapping(data["eval_placement"], ("eval_placement",), set(merged)))
        rc.eval_placement = ctx.build(PlacementSpec, merged, ("eval_placement",))
    else:
        rc.eval_placement = placement
    augment = None
    if "augment" not in data or data["augment"] is not None:
        augment = ctx.build(AugmentSpec, dict(ctx.mapping(data.get("augment"), ("augment",))), ("augment",))
    cutout = None
    if "cutout" not in data or data["cutout"] is not None:
        cutout = ctx.build(CutoutSpec, dict(ctx.mapping(data.get("cutout"), ("cutout",))), ("cutout",))
    tr = dict(ctx.mapping(data.get("train"), ("train",)))
    tr.update(placement=placement, augment=augment, cutout=cutout, seed=rc.seed, surrogate_ids=rc.surrogates)
    if placement.target_classes is not None:
        tr["target_classes"] = placement.target_classes
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)} - TRAIN_SKIP
    for k in data.get("train") or {}:
        if k not in train_fields:
            raise ctx.error(("train", k), f"unknown key (allowed: {', '.join(sorted(train_fields))})")
    rc.train = ctx.build(TrainConfig, tr, ("train",))

    cmp_raw = data.get("compare", [])
    if not isinstance(cmp_raw, list):
        raise ctx.error(("compare",), "expected a list of surrogate lists")
    rc.compare = tuple(_ids(ctx, c, ("compare", i)) for i, c in enumerate(cmp_raw))
    for i, ids in enumerate(rc.compare):
        for mid in ids:
            if mid not in rc.detectors:
                raise ctx.error(("compare", i), f"unknown detector id {mid!r}")
    apply_raw = ctx.mapping(data.get("apply"), ("apply",), {"detector"})
    rc.apply_detector = apply_raw.get("detector")
    if rc.apply_detector is not None and rc.apply_detector not in rc.detectors:
        raise ctx.error(("apply", "detector"), f"unknown detector id {rc.apply_detector!r}")
    return rc


def load_run_config(path, seed_override=None) -> RunConfig:
    data, lines = read_config(path)
    return parse_run_config(data, lines, seed_override)


# ---------------------------------------------------------------------------
# resources


def cache_dir() -> Path:
    root = os.environ.get(CACHE_ENV) or os.path.join(os.path.expanduser("~"), ".cache", "enspatch")
    return Path(root)


def load_manifest(spec: dict, split: str):
    """Dataset section of a run config (synthetic spec or on-disk root) to a manifest."""
    if not spec:
        raise ConfigError("dataset", "this command needs a dataset section")
    if "synthetic" in spec:
        return generate_synthetic(spec["synthetic"], split=split)
    return load_dataset(spec["root"], spec["format"], spec.get("class_names"), split=split)


def build_detector(rc: RunConfig, mid: str, log=None):
    """Load a detector from its weights path, or train it (cached by spec digest)."""
    ds = rc.detectors[mid]
    if ds.path:
        return ToyGridDetector.load(ds.path)
    dt = rc.detector_training
    train_spec = dt.get("synthetic", SyntheticSpec(num_images=1500, seed=11))
    held = dt.get("held_out")
    kw = {k: dt[k] for k in ("epochs", "lr", "batch_size", "occlusion_prob") if k in dt}
    kw.setdefault("epochs", 20)
    key = config_digest({"arch": dataclasses.asdict(ds.arch), "data": dataclasses.asdict(train_spec), "seed": ds.init_seed, **kw})[:16]
    path = cache_dir() / "detectors" / f"{mid}-{key}"
    if path.with_suffix(".pt").exists():
        det = ToyGridDetector.load(path)
        det.model_id = mid
        return det
    if log:
        log(f"training detector {mid} (cached at {path})")
    data = generate_synthetic(train_spec, split="detector-train")
    det = train_toy_detector(
        data,
        seed=ds.init_seed,
        arch=ds.arch,
        model_id=mid,
        held_out=generate_synthetic(held, split="detector-held-out") if held else None,
        min_map=dt.get("min_map") if held else None,
        **kw,
    )
    det.save(path)
    return det


# ---------------------------------------------------------------------------
# output helpers


def _atomic_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _atomic_fig(fig, path: Path):
    tmp = path.with_name(path.name + ".tmp")
    fig.savefig(tmp, format="png", dpi=110, metadata={"Software": None})
    os.replace(tmp, path)


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _prepare_out(out, rc: RunConfig, command: str, config_path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_text(out / "config.yaml", yaml.safe_dump(rc.source, sort_keys=True))
    manifest = {
        "command": command,
        "config": str(config_path),
        "seed": rc.seed,
        "started": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    _atomic_text(out / "run_manifest.json", json.dumps(manifest, indent=2))
    return out


def _finish_manifest(out: Path, status: str):
    path = out / "run_manifest.json"
    m = json.loads(path.read_text())
    m.update(finished=_dt.datetime.now(_dt.timezone.utc).isoformat(), status=status)
    _atomic_text(path, json.dumps(m, indent=2))


def plot_losses(log, path: Path):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    it = log.column("iteration")
    ax.plot(it, log.column("l_total"), label="total", lw=1)
    ax.plot(it, log.column("l_obj"), label="objectness", lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    _atomic_fig(fig, path)
    plt.close(fig)


def plot_report(report, path: Path):
    plt = _plt()
    rows = list(report.detectors.values())
    labels = ["clean", "patch", "gray", "noise", "white"]
    fig, ax = plt.subplots(figsize=(1.8 + 1.6 * len(rows), 3.5))
    width = 0.8 / len(labels)
    for j, lab in enumerate(labels):
        vals = []
        for d in rows:
            v = {"clean": d.clean, "patch": d.patched}.get(lab, d.controls.get(lab))
            vals.append(np.nan if v is None else v)
        ax.bar(np.arange(len(rows)) + j * width, vals, width, label=lab)
    ax.set_xticks(np.arange(len(rows)) + 0.4 - width / 2)
    ax.set_xticklabels([d.model_id for d in rows])
    ax.set_ylabel("mAP@0.45 (%)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _atomic_fig(fig, path)
    plt.close(fig)


def _write_table(table, out: Path, stem: str):
    _atomic_text(out / f"{stem}.txt", table.to_text() + "\n")
    _atomic_text(out / f"{stem}.csv", table.to_csv())
    _atomic_text(out / f"{stem}.json", json.dumps(table.to_dict(), indent=2))


# ---------------------------------------------------------------------------
# commands


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def cmd_train(rc: RunConfig, out: Path) -> int:
    if not rc.surrogates:
        raise ConfigError("surrogates", "train needs at least one surrogate")
    data = load_manifest(rc.dataset, "train")
    adapters = [build_detector(rc, m, _log) for m in rc.surrogates]

    def progress(rec):
        if rec["iteration"] % 50 == 0:
            _log(f"iter {rec['iteration']:5d}  loss {rec['l_total']:.4f}  lr {rec['lr']:.2e}")

    patch, log = train(rc.train, data, adapters, progress)
    save_patch(patch, out / "patch.png")
    log.write_jsonl(out / "train_log.jsonl")
    plot_losses(log, out / "loss_curve.png")
    return 0


def _image_paths(target: Path):
    if target.is_dir():
        paths = sorted(p for p in target.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
        if not paths:
            raise ConfigError("images", f"no images in {target}")
        return paths
    if not target.exists():
        raise ConfigError("images", f"{target} does not exist")
    return [target]


def cmd_apply(rc: RunConfig, out: Path, patch_path, images) -> int:
    p = load_patch(patch_path)
    mid = rc.apply_detector or (rc.surrogates[0] if rc.surrogates else None)
    if mid is None:
        raise ConfigError("apply.detector", "name a detector to localize objects")
    paths = _image_paths(Path(images))
    det = build_detector(rc, mid, _log)
    records = []
    for path in paths:
        x = read_image(path, source_id=path.name)
        dets = det.detect(x)
        adv, params = place_patch(x, dets, p, rc.eval_placement, derive_seed(rc.seed, path.name))
        write_image(adv, out / f"{path.stem}_patched.png")
        pair = Image(np.concatenate([x.pixels, adv.pixels], axis=1), x.source_id)
        write_image(pair, out / f"{path.stem}_pair.png")
        rec = {"image": path.name, "placements": [tp.to_dict() for tp in params]}
        if not params:
            rec["note"] = "no placement"
        records.append(rec)
    _atomic_text(out / "transforms.jsonl", "".join(json.dumps(r) + "\n" for r in records))
    return 0


def cmd_evaluate(rc: RunConfig, out: Path, patch_path) -> int:
    p = load_patch(patch_path)
    data = load_manifest(rc.eval_dataset or rc.dataset, "eval")
    adapters = [build_detector(rc, m, _log) for m in rc.eval_detectors]
    report = evaluate_attack(p, data, None, adapters, rc.eval_placement, rc.seed)
    _atomic_text(out / "report.json", report.to_json())
    _atomic_text(out / "report.txt", report.render_text() + "\n")
    _atomic_text(out / "report.csv", report.to_csv())
    plot_report(report, out / "map_bars.png")
    print(report.render_text())
    return 0


def cmd_compare(rc: RunConfig, out: Path) -> int:
    if len(rc.compare) < 2:
        raise ConfigError("compare", "list at least two surrogate sets")
    train_set = load_manifest(rc.dataset, "train")
    eval_set = load_manifest(rc.eval_dataset or rc.dataset, "eval")
    ids = sorted({m for c in rc.compare for m in c})
    surrogates = {m: build_detector(rc, m, _log) for m in ids}
    evals = [build_detector(rc, m, _log) for m in rc.eval_detectors]
    table = compare_ensembles(rc.compare, train_set, eval_set, None, evals, rc.train, surrogates, rc.eval_placement, rc.seed)
    _write_table(table, out, "compare")
    print(table.to_text())
    return 1 if table.status else 0


def cmd_ablate(rc: RunConfig, out: Path) -> int:
    if not rc.surrogates:
        raise ConfigError("surrogates", "ablate needs at least one surrogate")
    train_set = load_manifest(rc.dataset, "train")
    eval_set = load_manifest(rc.eval_dataset or rc.dataset, "eval")
    surrogates = [build_detector(rc, m, _log) for m in rc.surrogates]
    evals = [build_detector(rc, m, _log) for m in rc.eval_detectors]
    table = run_ablation(rc.train, train_set, eval_set, None, surrogates, evals, rc.eval_placement, rc.seed)
    _write_table(table, out, "ablation")
    print(table.to_text())
    return 1 if table.status else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="enspatch", description="Ensemble adversarial patch attacks on object detectors.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("train", "optimize a patch against the surrogate ensemble"),
        ("apply", "paste a patch onto images at detected objects"),
        ("evaluate", "clean / patched / control mAP per detector"),
        ("compare", "train and evaluate several surrogate sets"),
        ("ablate", "train and evaluate the single-module ablations"),
    ):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int, default=None)
        if name in ("apply", "evaluate"):
            sp.add_argument("--patch", required=True)
        if name == "apply":
            sp.add_argument("--images", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = load_run_config(args.config, args.seed)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return 2
    out = None
    try:
        out = _prepare_out(args.out, rc, args.command, args.config)
        if args.command == "train":
            code = cmd_train(rc, out)
        elif args.command == "apply":
            code = cmd_apply(rc, out, args.patch, args.images)
        elif args.command == "evaluate":
            code = cmd_evaluate(rc, out, args.patch)
        elif args.command == "compare":
            code = cmd_compare(rc, out)
        else:
            code = cmd_ablate(rc, out)
    except TrainingError as exc:
        _log(f"training failed: {exc}")
        code = 1
    except ConfigError as exc:
        _log(f"config error: {exc}")
        code = 2
    except (EnspatchError, OSError) as exc:
        _log(f"error: {exc}")
        code = 2
    if out is not None:
        _finish_manifest(out, "ok" if code == 0 else f"exit {code}")
    return code


if __name__ == "__main__":
    sys.exit(main())
