"""Two-phase training: fit the Evaluator, then fit the Manager through the frozen Evaluator."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tape, backward, no_tape
from .data import WindowSet
from .errors import ConfigError, ContractError, NonFiniteError, TrainingError
from .losses import Thresholds, evaluator_loss, flood_loss, total_loss, wastage_loss
from .models import EvaluatorModel, ManagerModel

Progress = Callable[[str], None]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    decay_rate: float = 0.95
    decay_steps: int = 10_000
    batch_size: int = 512
    max_epochs: int = 30
    patience: int = 5
    alpha: float = 1.0
    beta: float = 1.0
    seed: int = 0
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float | None = 5.0
    validation_fraction: float = 0.1
    # draw this many training windows per epoch (None: every window)
    epoch_samples: int | None = None
    violations_only: bool = False

    def __post_init__(self):
        positive = ("learning_rate", "decay_rate", "decay_steps", "batch_size", "max_epochs", "patience")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.patience > self.max_epochs:
            raise ConfigError("patience cannot exceed max_epochs")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must be in [0, 1)")
        if self.alpha < 0 or self.beta < 0 or self.alpha == self.beta == 0:
            raise ConfigError("alpha and beta must be non-negative and not both zero")
        if self.epoch_samples is not None and self.epoch_samples <= 0:
            raise ConfigError("epoch_samples must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def learning_rate(config: TrainConfig, step: int) -> float:
    """Exponentially decayed rate after ``step`` updates."""
    return config.learning_rate * config.decay_rate ** (step / config.decay_steps)


@dataclass
class OptimizerState:
    step: int = 0
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: ParamSet, grads: dict[str, np.ndarray], state: OptimizerState,
                   config: TrainConfig) -> OptimizerState:
    """Apply one Adam (or SGD) update in place and advance the step counter."""
    if params.frozen:
        raise ContractError("refusing to update a frozen parameter set")
    lr = learning_rate(config, state.step)
    state.step += 1
    if config.clip_norm is not None:
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        if norm > config.clip_norm:
            grads = {k: g * (config.clip_norm / norm) for k, g in grads.items()}
    updated = {}
    if config.optimizer == "sgd":
        for name, g in grads.items():
            updated[name] = params[name].data - lr * g
    else:
        b1, b2 = config.adam_beta1, config.adam_beta2
        t = state.step
        for name, g in grads.items():
            m = state.first.get(name)
            v = state.second.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            state.first[name], state.second[name] = m, v
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            updated[name] = params[name].data - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    params.assign(updated)
    return state


# ---------------------------------------------------------------- manifest


@dataclass
class RunManifest:
    phase: str
    config: dict
    dataset_hash: str = ""
    epochs: list[dict] = field(default_factory=list)
    initial_train_loss: float | None = None
    best_epoch: int | None = None
    best_val_loss: float | None = None
    fingerprints: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- shared loop


def validation_split(train: WindowSet, fraction: float) -> tuple[WindowSet, WindowSet]:
    """Hold out the chronologically last ``fraction`` of windows, purged by k."""
    n = len(train)
    n_val = int(np.floor(fraction * n))
    if n_val == 0:
        return train, train.subset([])
    n_fit = max(n - n_val - train.k, 1)
    return train.subset(np.arange(n_fit)), train.subset(np.arange(n - n_val, n))


def _batches(n: int, size: int, rng: np.random.Generator | None, limit: int | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    if limit is not None:
        order = order[:limit]
    for i in range(0, len(order), size):
        yield order[i:i + size]


def _fit(model, fit_set: WindowSet, val_set: WindowSet, config: TrainConfig, phase: str,
         batch_loss, eval_loss, progress: Progress | None, extra_fingerprints=None) -> tuple[ParamSet, RunManifest]:
    """Minibatch loop with early stopping; returns the best parameters and the manifest."""
    rng = np.random.default_rng(config.seed)
    manifest = RunManifest(phase, config.to_dict())
    state = OptimizerState()
    t_start = time.perf_counter()
    manifest.initial_train_loss = eval_loss(fit_set)
    best = model.params.copy()
    best_val, best_epoch, stale = np.inf, 0, 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        losses, weights = [], []
        try:
            for idx in _batches(len(fit_set), config.batch_size, rng, config.epoch_samples):
                with Tape() as tape:
                    loss = batch_loss(idx)
                if not np.isfinite(loss.item()):
                    raise NonFiniteError("loss is not finite")
                grads = backward(loss, tape, model.params)
                optimizer_step(model.params, grads, state, config)
                losses.append(loss.item())
                weights.append(len(idx))
            train_loss = float(np.average(losses, weights=weights))
            val_loss = eval_loss(val_set) if len(val_set) else train_loss
        except NonFiniteError as exc:
            raise TrainingError(f"{phase} diverged: {exc}", epoch=epoch) from None
        if not np.isfinite(val_loss):
            raise TrainingError(f"{phase} validation loss is not finite", epoch=epoch)
        improved = val_loss < best_val
        if improved:
            best_val, best_epoch, stale = val_loss, epoch, 0
            best = model.params.copy()
        else:
            stale += 1
        manifest.epochs.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                                "lr": learning_rate(config, state.step), "seconds": time.perf_counter() - t0})
        if progress is not None:
            progress(f"{phase} epoch {epoch:3d}  train {train_loss:.6g}  val {val_loss:.6g}{'  *' if improved else ''}")
        if stale >= config.patience:
            break
    manifest.best_epoch, manifest.best_val_loss = best_epoch, float(best_val)
    manifest.timings["train_seconds"] = time.perf_counter() - t_start
    manifest.extra["optimizer_steps"] = state.step
    return best, manifest


def _predict_loss(fn, ws: WindowSet, batch: int = 2048) -> float:
    """Sample-weighted mean of ``fn(idx)`` over ``ws`` without a tape."""
    if len(ws) == 0:
        return float("nan")
    total = 0.0
    with no_tape():
        for idx in _batches(len(ws), batch, None, None):
            total += fn(idx).item() * len(idx)
    return total / len(ws)


# ---------------------------------------------------------------- phase 1


def train_evaluator(train: WindowSet, model: EvaluatorModel, config: TrainConfig = TrainConfig(),
                    progress: Progress | None = None, dataset_hash: str = "") -> tuple[EvaluatorModel, RunManifest]:
    """Fit ``model`` on normalised evaluator-mode windows; returns the best-validation model."""
    if train.mode != "evaluator":
        raise ContractError(f"train_evaluator needs evaluator-mode windows, got {train.mode!r}")
    if model.frozen:
        raise ContractError("evaluator parameters are frozen")
    fit_set, val_set = validation_split(train, config.validation_fraction)

    def loss_on(ws: WindowSet):
        def fn(idx):
            return evaluator_loss(model.forward(ws.past_batch(idx), ws.future_batch(idx)), ws.target_batch(idx))
        return fn

    best, manifest = _fit(model, fit_set, val_set, config, "evaluator", loss_on(fit_set),
                          lambda ws: _predict_loss(loss_on(ws), ws), progress)
    model.params.assign(best.arrays())
    manifest.dataset_hash = dataset_hash
    manifest.fingerprints["evaluator"] = model.fingerprint
    manifest.extra.update(arch=model.arch, model_config=model.net.config_dict(),
                          train_windows=len(fit_set), val_windows=len(val_set))
    return model, manifest


# ---------------------------------------------------------------- phase 2


def manager_levels(manager: ManagerModel, evaluator: EvaluatorModel, past, future_cov):
    """Schedule, then the evaluator's forecast of it in feet (both kept on any active tape)."""
    schedule = manager.forward(past, future_cov)
    levels = evaluator.to_feet(evaluator.forward(past, evaluator.future_inputs(future_cov, schedule)))
    return schedule, levels


def _violating(ws: WindowSet, evaluator: EvaluatorModel, thresholds: Thresholds) -> np.ndarray:
    water = list(ws.layout.water)
    observed = evaluator.normalizer.denormalize(ws.future_batch(None, cols=water), water)
    return np.flatnonzero(((observed > thresholds.flood) | (observed < thresholds.waste)).any(axis=(1, 2)))


def train_manager(train: WindowSet, manager: ManagerModel, evaluator: EvaluatorModel, thresholds: Thresholds,
                  config: TrainConfig = TrainConfig(), progress: Progress | None = None,
                  dataset_hash: str = "") -> tuple[ManagerModel, RunManifest]:
    """Fit ``manager`` by back-propagating the threshold loss through the frozen ``evaluator``."""
    if not evaluator.frozen:
        raise ContractError("train_manager requires a frozen evaluator (freeze the phase-1 model first)")
    if train.mode != "manager":
        raise ContractError(f"train_manager needs manager-mode windows, got {train.mode!r}")
    if manager.frozen:
        raise ContractError("manager parameters are frozen")
    evaluator_fp = evaluator.fingerprint
    fit_set, val_set = validation_split(train, config.validation_fraction)
    if config.violations_only:
        fit_set = fit_set.subset(_violating(fit_set, evaluator, thresholds))
        if len(fit_set) == 0:
            raise ConfigError("violations_only left no training windows")

    def loss_on(ws: WindowSet):
        def fn(idx):
            _, levels = manager_levels(manager, evaluator, ws.past_batch(idx), ws.future_batch(idx))
            loss = total_loss(flood_loss(levels, thresholds), wastage_loss(levels, thresholds),
                              config.alpha, config.beta)
            return ad.mul(loss, 1.0 / len(idx))
        return fn

    best, manifest = _fit(manager, fit_set, val_set, config, "manager", loss_on(fit_set),
                          lambda ws: _predict_loss(loss_on(ws), ws), progress)
    manager.params.assign(best.arrays())
    if evaluator.fingerprint != evaluator_fp:
        raise ContractError("evaluator parameters changed during manager training")
    manifest.dataset_hash = dataset_hash
    manifest.fingerprints.update(manager=manager.fingerprint, evaluator=evaluator_fp)
    manifest.extra.update(arch=manager.arch, model_config=manager.net.config_dict(),
                          train_windows=len(fit_set), val_windows=len(val_set),
                          thresholds={"flood": thresholds.flood.tolist(), "waste": thresholds.waste.tolist()})
    return manager, manifest
