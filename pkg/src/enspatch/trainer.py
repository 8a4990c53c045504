"""Ensemble patch optimization with dynamic per-surrogate loss weighting."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augmentation import AugmentSpec
from .compositor import CutoutSpec, PlacementSpec, to_chw, to_hwc
from .core import Image, Patch, PatchMeta, config_digest, derive_seed, init_patch, make_rng, save_patch
from .errors import ConfigError, ContractError, TrainingError
from .losses import AttackSpec, augment_batch, ensemble_objective


def init_weights(M: int) -> np.ndarray:
    if M < 1:
        raise ConfigError("surrogates", "need at least one surrogate model")
    return np.full(M, 1.0 / M)


def update_weights(alphas, per_model_losses, eta: float) -> np.ndarray:
    """One gradient step on the mixture weights followed by projection to the simplex.

    d(sum_m alpha_m L_m)/d(alpha_m) = L_m, so ``raw = alpha - eta * L``; negative
    entries are floored at zero and the result renormalized. If every entry
    floors out the weights reset to uniform.
    """
    a = np.asarray(alphas, dtype=np.float64)
    L = np.asarray(per_model_losses, dtype=np.float64)
    if a.shape != L.shape:
        raise ContractError("per_model_losses", f"{L.shape} does not match weights {a.shape}")
    if eta < 0:
        raise ContractError("eta", "must be >= 0")
    if a.size == 1:
        return np.ones(1)
    raw = np.maximum(a - eta * L, 0.0)
    s = raw.sum()
    if not s > 0 or not math.isfinite(s):
        return init_weights(a.size)
    out = raw / s
    return out / out.sum()


@dataclass
class PlateauScheduler:
    """Halve the learning rate when the loss stops improving.

    ``step`` counts calls since the best loss last improved by more than
    ``threshold`` (relative); after ``patience`` such calls the rate is
    multiplied by ``factor`` (not below ``lr_min``) and the count restarts.
    """

    lr: float = 0.03
    lr_min: float = 1e-4
    factor: float = 0.5
    patience: int = 50
    threshold: float = 1e-3
    best: float = math.inf
    num_bad: int = 0

    def step(self, loss: float) -> float:
        if math.isinf(self.best) or loss < self.best - self.threshold * abs(self.best):
            self.best = loss
            self.num_bad = 0
        else:
            self.num_bad += 1
            if self.num_bad >= self.patience:
                self.lr = max(self.lr * self.factor, self.lr_min)
                self.num_bad = 0
        return self.lr


@dataclass
class EnsembleState:
    alphas: np.ndarray
    eta: float
    scheduler: PlateauScheduler
    iteration: int = 0
    loss_history: list = field(default_factory=list)
    history_limit: int = 1000

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=np.float64)

    @property
    def lr(self) -> float:
        return self.scheduler.lr

    def record(self, loss: float):
        self.loss_history.append(float(loss))
        if len(self.loss_history) > self.history_limit:
            del self.loss_history[: -self.history_limit]


def scheduler_step(state: EnsembleState, current_loss: float) -> EnsembleState:
    state.scheduler.step(current_loss)
    return state


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 16
    lr_init: float = 0.03
    lr_min: float = 1e-4
    plateau_patience: int = 50
    plateau_factor: float = 0.5
    plateau_threshold: float = 1e-3
    lambda_tv: float = 2.5
    tv_floor: float = 0.1
    eta: float = 0.01
    dynamic_weights: bool = True
    patch_size: int = 300
    init_mode: str = "random"
    seed: int = 0
    max_iterations: int | None = None
    coupling: str = "product"
    target_classes: tuple | None = None
    obj_threshold: float = 0.1
    surrogate_ids: tuple = ()
    augment: AugmentSpec | None = field(default_factory=AugmentSpec)
    placement: PlacementSpec = field(default_factory=PlacementSpec)
    cutout: CutoutSpec | None = field(default_factory=CutoutSpec)
    checkpoint_every: int = 100

    def __post_init__(self):
        for name in ("epochs", "batch_size", "patch_size", "plateau_patience", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(name, "must be positive")
        for name in ("lr_init", "lr_min"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be positive")
        if self.lr_min > self.lr_init:
            raise ConfigError("lr_min", "must not exceed lr_init")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError("plateau_factor", "must lie in (0, 1)")
        if self.eta < 0:
            raise ConfigError("eta", "must be >= 0")
        if self.max_iterations is not None and (not isinstance(self.max_iterations, int) or self.max_iterations <= 0):
            raise ConfigError("max_iterations", "must be positive")
        if self.init_mode not in ("random", "gray", "white"):
            raise ConfigError("init_mode", "must be random, gray or white")
        self.surrogate_ids = tuple(self.surrogate_ids)
        if self.target_classes is not None:
            self.target_classes = tuple(int(c) for c in self.target_classes)
        self.attack_spec()  # validates the loss-related fields

    def attack_spec(self) -> AttackSpec:
        return AttackSpec(
            placement=self.placement,
            cutout=self.cutout,
            augment=self.augment,
            lambda_tv=self.lambda_tv,
            tv_floor=self.tv_floor,
            coupling=self.coupling,
            target_classes=self.target_classes,
            obj_threshold=self.obj_threshold,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    def digest(self) -> str:
        return config_digest(self.to_dict())


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, rec: dict):
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def column(self, key):
        return [r[key] for r in self.records]

    def write_jsonl(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")
        os.replace(tmp, path)

    @classmethod
    def read_jsonl(cls, path) -> "TrainLog":
        with open(path) as fh:
            return cls([json.loads(ln) for ln in fh if ln.strip()])


def _as_images(dataset):
    if hasattr(dataset, "images") and callable(dataset.images):
        return dataset.images()
    images = list(dataset)
    if not all(isinstance(im, Image) for im in images):
        raise ContractError("dataset", "expected a manifest or a list of Image")
    return images


def _batches(n: int, batch_size: int, rng):
    """Endless cyclic stream of index batches, reshuffled each pass."""
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start : start + batch_size]


def save_checkpoint(path, patch: Patch, state: EnsembleState, optimizer) -> None:
    path = Path(path)
    save_patch(patch, path.with_suffix(".png"))
    blob = {
        "alphas": state.alphas.tolist(),
        "eta": state.eta,
        "iteration": state.iteration,
        "scheduler": asdict(state.scheduler),
        "loss_history": list(state.loss_history),
        "optimizer": optimizer.state_dict(),
    }
    tmp = path.with_name(path.name + ".state.tmp")
    torch.save(blob, tmp)
    os.replace(tmp, path.with_suffix(".state.pt"))


def train(config: TrainConfig, dataset, adapters, log_fn=None, checkpoint_dir=None):
    """Optimize one patch against the ensemble ``adapters``; returns ``(patch, TrainLog)``.

    Per iteration: draw a batch, augment, evaluate the weighted objective, take
    an Adam step on the pixels, clamp to [0, 1], update the mixture weights
    from the per-model losses, then step the plateau scheduler.
    """
    adapters = list(adapters)
    if not adapters:
        raise ConfigError("surrogates", "need at least one surrogate model")
    for a in adapters:
        if not getattr(a, "supports_gradients", False):
            raise ConfigError("surrogates", f"{a.model_id} is not gradient-capable")
    images = _as_images(dataset)
    if not images:
        raise ContractError("dataset", "empty training set")
    spec = config.attack_spec()
    rng = make_rng(config.seed)
    patch0 = init_patch(config.patch_size, config.init_mode, derive_seed(config.seed, "init"))
    pt = to_chw(patch0.pixels, torch.float32).requires_grad_(True)
    optimizer = torch.optim.Adam([pt], lr=config.lr_init)
    state = EnsembleState(
        init_weights(len(adapters)),
        config.eta,
        PlateauScheduler(
            config.lr_init, config.lr_min, config.plateau_factor, config.plateau_patience, config.plateau_threshold
        ),
    )
    steps_per_epoch = math.ceil(len(images) / config.batch_size)
    n_iter = config.epochs * steps_per_epoch
    if config.max_iterations is not None:
        n_iter = min(n_iter, config.max_iterations)
    log = TrainLog()
    batches = _batches(len(images), config.batch_size, rng)
    digest = config.digest()
    for it in range(n_iter):
        idx = next(batches)
        it_seed = int(rng.integers(2**62))
        x = augment_batch([images[i] for i in idx], spec.augment, it_seed)
        alphas_used = state.alphas.copy()
        loss, br = ensemble_objective(pt, x, adapters, alphas_used, spec, derive_seed(it_seed, "place"))
        if not math.isfinite(br.l_total):
            raise TrainingError(
                f"non-finite loss at iteration {it}",
                {"iteration": it, "alphas": alphas_used.tolist(), "per_model": br.per_model},
            )
        optimizer.zero_grad()
        loss.backward()
        if not torch.isfinite(pt.grad).all():
            raise TrainingError(f"non-finite gradient at iteration {it}", {"iteration": it, "loss": br.l_total})
        optimizer.step()
        with torch.no_grad():
            pt.clamp_(0.0, 1.0)
        if config.dynamic_weights:
            state.alphas = update_weights(state.alphas, [l for _, l in br.per_model], state.eta)
        state.record(br.l_total)
        # plateau detection on the mean loss over the last epoch's worth of batches
        state.scheduler.step(float(np.mean(state.loss_history[-steps_per_epoch:])))
        for group in optimizer.param_groups:
            group["lr"] = state.lr
        state.iteration = it + 1
        with torch.no_grad():
            pmin, pmax = float(pt.min()), float(pt.max())
        rec = {
            "iteration": it,
            "l_total": br.l_total,
            "l_obj": br.l_obj,
            "l_cls": br.l_cls,
            "l_tv": br.l_tv,
            "n_detections": br.n_detections,
            "per_model": {mid: l for mid, l in br.per_model},
            "alphas": alphas_used.tolist(),
            "alphas_next": state.alphas.tolist(),
            "lr": state.lr,
            "patch_min": pmin,
            "patch_max": pmax,
        }
        log.append(rec)
        if log_fn is not None:
            log_fn(rec)
        if checkpoint_dir is not None and (it + 1) % config.checkpoint_every == 0:
            ck = _finish(pt, config, digest, adapters, (it + 1) / steps_per_epoch)
            save_checkpoint(Path(checkpoint_dir) / f"ckpt_{it + 1:06d}", ck, state, optimizer)
    return _finish(pt, config, digest, adapters, n_iter / steps_per_epoch), log


def _finish(pt, config, digest, adapters, epochs_done) -> Patch:
    meta = PatchMeta(
        seed=int(config.seed),
        lambda_tv=float(config.lambda_tv),
        surrogate_ids=[a.model_id for a in adapters],
        epochs_trained=int(math.floor(epochs_done)),
        config_digest=digest,
    )
    return Patch(np.clip(to_hwc(pt), 0.0, 1.0), meta)
