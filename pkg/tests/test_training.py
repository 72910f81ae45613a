import numpy as np
import pytest

from floodplan import autodiff as ad
from floodplan.autodiff import ParamSet, Tape, backward
from floodplan.data import Normalizer, make_windows
from floodplan.errors import ConfigError, ContractError, TrainingError
from floodplan.losses import Thresholds, flood_loss
from floodplan.models import ColumnRoles, EvaluatorModel, ManagerModel, MlpConfig
from floodplan.sim import generate_dataset
from floodplan.training import (
    OptimizerState, RunManifest, TrainConfig, learning_rate, manager_levels, optimizer_step, train_evaluator,
    train_manager,
)

from conftest import Bundle


def test_learning_rate_decay():
    cfg = TrainConfig(learning_rate=2e-3)
    assert learning_rate(cfg, 0) == 2e-3
    assert learning_rate(cfg, 10_000) == pytest.approx(0.95 * 2e-3, rel=1e-15)
    assert learning_rate(cfg, 20_000) == pytest.approx(0.95 ** 2 * 2e-3, rel=1e-15)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(patience=10, max_epochs=5)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(alpha=0.0, beta=0.0)


def test_zero_gradient_leaves_params_but_advances_step():
    p = ParamSet({"w": np.array([1.0, -2.0])})
    state = OptimizerState()
    for opt in ("adam", "sgd"):
        optimizer_step(p, {"w": np.zeros(2)}, state, TrainConfig(optimizer=opt))
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    assert state.step == 2


@pytest.mark.parametrize("opt, lr", [("adam", 0.05), ("sgd", 0.1)])
def test_quadratic_converges(opt, lr):
    p = ParamSet({"x": np.array([1.0])})
    state = OptimizerState()
    cfg = TrainConfig(learning_rate=lr, optimizer=opt, clip_norm=None)
    for _ in range(200):
        with Tape() as tape:
            loss = ad.square(p["x"]).sum()
        optimizer_step(p, backward(loss, tape, p), state, cfg)
    assert abs(p["x"].data[0]) < 1e-2


def test_parameter_sets_update_independently():
    a, b = ParamSet({"w": np.ones(3)}), ParamSet({"w": np.ones(3)})
    sa, sb = OptimizerState(), OptimizerState()
    cfg = TrainConfig()
    optimizer_step(a, {"w": np.ones(3)}, sa, cfg)
    np.testing.assert_array_equal(b["w"].data, 1.0)
    assert sb.step == 0 and not sb.first
    optimizer_step(b, {"w": -np.ones(3)}, sb, cfg)
    assert np.all(a["w"].data < 1.0) and np.all(b["w"].data > 1.0)


def test_frozen_params_cannot_step():
    p = ParamSet({"w": np.ones(2)}, frozen=True)
    with pytest.raises(ContractError):
        optimizer_step(p, {"w": np.ones(2)}, OptimizerState(), TrainConfig())


# ---------------------------------------------------------------- phase 1


@pytest.fixture(scope="module")
def small():
    """200 training windows (plus a test tail) at the default window sizes."""
    # 250 windows, first 80% train
    return Bundle(11, 72 + 24 - 1 + 250, 72, 24)


def _curve(manifest):
    return [(e["train_loss"], e["val_loss"]) for e in manifest.epochs]


def test_evaluator_training_halves_loss(small):
    assert len(small.train) == 200
    cfg = TrainConfig(batch_size=32, max_epochs=50, patience=50, seed=3)
    ev, man = train_evaluator(small.train, small.evaluator("mlp"), cfg)
    assert len(man.epochs) == 50
    final = man.epochs[-1]["train_loss"]
    assert final < 0.5 * man.initial_train_loss
    assert man.fingerprints["evaluator"] == ev.fingerprint


def test_evaluator_training_is_deterministic(small):
    cfg = TrainConfig(batch_size=64, max_epochs=4, patience=4, seed=5)
    runs = [train_evaluator(small.train, small.evaluator("gtn"), cfg) for _ in range(2)]
    assert _curve(runs[0][1]) == _curve(runs[1][1])
    assert runs[0][0].fingerprint == runs[1][0].fingerprint


def test_early_stopping_returns_best_checkpoint(small):
    cfg = TrainConfig(learning_rate=3e-2, batch_size=32, max_epochs=12, patience=2, seed=1)
    ev, man = train_evaluator(small.train, small.evaluator("mlp"), cfg)
    vals = [e["val_loss"] for e in man.epochs]
    assert man.best_val_loss == min(vals)
    assert man.best_epoch == int(np.argmin(vals)) + 1
    assert len(vals) - man.best_epoch <= 2


def test_divergence_reports_epoch(small):
    cfg = TrainConfig(learning_rate=1e12, optimizer="sgd", clip_norm=None, batch_size=32, max_epochs=3, patience=3)
    with np.errstate(all="ignore"), pytest.raises(TrainingError) as info:
        train_evaluator(small.train, small.evaluator("mlp"), cfg)
    epoch = info.value.epoch
    assert 1 <= epoch <= 3 and str(info.value).startswith(f"epoch {epoch}: ")


def test_evaluator_mode_required(small):
    with pytest.raises(ContractError):
        train_evaluator(small.manager_windows(small.train), small.evaluator("mlp"), TrainConfig(max_epochs=1, patience=1))


# ---------------------------------------------------------------- phase 2


GAIN_PER_STEP = 0.2
DRAIN_PER_STEP = 0.3


class Toy:
    """Identity normalisation and a linear evaluator: each hour the level rises by
    GAIN_PER_STEP and drops by DRAIN_PER_STEP times the mean gate opening, so
    holding every gate fully open is the optimum."""

    def __init__(self, toy_frame):
        self.frame = toy_frame
        self.roles = ColumnRoles.from_frame(toy_frame)
        norm = Normalizer.identity(len(toy_frame.columns))
        cfg = MlpConfig(hidden=())
        ev = EvaluatorModel("mlp", self.roles, norm, 72, 24, cfg)
        arrays = {k: np.zeros_like(v) for k, v in ev.params.arrays().items()}
        names = ev.io.covariate_names
        gates = [i for i, c in enumerate(names) if c.startswith("GATE_")]
        C, N = len(names), len(self.roles.water)
        offset = 72 * len(toy_frame.columns)
        for j in range(24):
            for g in gates:
                for n in range(N):
                    arrays["mlp0.w"][offset + j * C + g, j * N + n] = -DRAIN_PER_STEP / len(gates)
        arrays["mlp0.b"][:] = GAIN_PER_STEP
        ev.params.assign(arrays)
        self.evaluator = ev.freeze()
        self.windows = make_windows(toy_frame, 72, 24, "manager")
        self.norm = norm
        start = self.windows.last_water()
        self.thresholds = Thresholds.uniform(N, flood=float(np.quantile(start, 0.9)), waste=-100.0)

    def manager(self, seed=0):
        return ManagerModel("mlp", self.roles, self.norm, 72, 24, MlpConfig(hidden=(8,)), seed=seed)

    def l1(self, manager):
        with ad.no_tape():
            _, levels = manager_levels(manager, self.evaluator, self.windows.past_batch(), self.windows.future_batch())
        return flood_loss(levels, self.thresholds).item()


@pytest.fixture(scope="module")
def toy():
    return Toy(generate_dataset(12, 420))


def test_toy_manager_learns_full_prerelease(toy):
    mg = toy.manager()
    untrained = toy.l1(mg)
    assert untrained > 0
    fp = toy.evaluator.fingerprint
    cfg = TrainConfig(learning_rate=1e-2, batch_size=64, max_epochs=30, patience=30, alpha=1.0, beta=0.0,
                      validation_fraction=0.0)
    # raw inputs are far from unit scale; keep the manager's input weights small
    mg.params.assign({k: v * 0.01 for k, v in mg.params.arrays().items()})
    mg, man = train_manager(toy.windows, mg, toy.evaluator, toy.thresholds, cfg)
    assert toy.l1(mg) < 0.01 * untrained
    assert toy.evaluator.fingerprint == fp == man.fingerprints["evaluator"]
    gates = [i for i, c in enumerate(toy.roles.columns[j] for j in toy.roles.controls) if c.startswith("GATE_")]
    sched = mg.schedule(toy.windows.past_batch(), toy.windows.future_batch())
    assert sched[..., gates].mean() > 0.9


def test_more_epochs_never_worsen_best_validation(toy):
    best = []
    for epochs in (2, 4, 8):
        cfg = TrainConfig(learning_rate=3e-3, batch_size=64, max_epochs=epochs, patience=epochs, beta=0.0, seed=2)
        mg = toy.manager(seed=4)
        mg.params.assign({k: v * 0.01 for k, v in mg.params.arrays().items()})
        _, man = train_manager(toy.windows, mg, toy.evaluator, toy.thresholds, cfg)
        best.append(man.best_val_loss)
    assert best[0] >= best[1] >= best[2]


def test_manager_requires_frozen_evaluator(small):
    ev = small.evaluator("mlp")
    with pytest.raises(ContractError):
        train_manager(small.manager_windows(small.train), small.manager("mlp"), ev, Thresholds.uniform(4),
                      TrainConfig(max_epochs=1, patience=1))


def test_manager_training_freezes_evaluator_and_is_deterministic(small, tmp_path):
    ev = small.evaluator("gtn").freeze()
    fp = ev.fingerprint
    mw = small.manager_windows(small.train)
    cfg = TrainConfig(learning_rate=3e-3, batch_size=64, max_epochs=2, patience=2, seed=9)
    runs = [train_manager(mw, small.manager("gtn"), ev, Thresholds.uniform(4, 1.0, 0.5), cfg) for _ in range(2)]
    assert ev.fingerprint == fp
    assert runs[0][0].fingerprint == runs[1][0].fingerprint
    man = runs[0][1]
    assert man.fingerprints["evaluator"] == fp
    man.save(tmp_path / "m.json")
    assert RunManifest.load(tmp_path / "m.json").to_json() == man.to_json()


def test_violations_only_filter(small):
    ev = small.evaluator("mlp").freeze()
    mw = small.manager_windows(small.train)
    th = Thresholds.uniform(4, 1.5, 0.3)
    cfg = TrainConfig(max_epochs=1, patience=1, validation_fraction=0.0, violations_only=True)
    _, man = train_manager(mw, small.manager("mlp"), ev, th, cfg)
    assert 0 < man.extra["train_windows"] < len(mw)
