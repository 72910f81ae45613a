"""Evaluator and Manager models, schedule assembly and checkpoints."""

from __future__ import annotations

import io as _io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..autodiff import ParamSet, Tensor, no_tape
from ..data import Normalizer, TimeSeriesFrame, layout_for
from ..errors import ConfigError, ContractError, DimensionError, IngestionError
from . import networks as nets

CHECKPOINT_FORMAT = "floodplan-checkpoint/1"


@dataclass(frozen=True)
class ColumnRoles:
    """Which frame columns feed which model slot."""

    columns: tuple[str, ...]
    evaluator_covariates: tuple[int, ...]
    manager_covariates: tuple[int, ...]
    controls: tuple[int, ...]
    water: tuple[int, ...]

    @classmethod
    def from_frame(cls, frame: TimeSeriesFrame) -> "ColumnRoles":
        ev, mg = layout_for(frame, "evaluator"), layout_for(frame, "manager")
        return cls(frame.columns, ev.covariates, mg.covariates, mg.targets, ev.water)

    def to_dict(self) -> dict:
        return {k: list(getattr(self, k)) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnRoles":
        return cls(**{k: tuple(v) for k, v in d.items()})


class _Model:
    role = ""

    def __init__(self, arch: str, roles: ColumnRoles, normalizer: Normalizer, io: nets.IOSpec,
                 config=None, params: ParamSet | dict | None = None, seed: int = 0):
        self.arch = arch
        self.roles = roles
        self.normalizer = normalizer
        self.io = io
        self.net = nets.build_network(arch, io, config)
        if params is None:
            params = ParamSet(self.net.init_params(np.random.default_rng(seed)))
        elif not isinstance(params, ParamSet):
            params = ParamSet(params)
        expected = self.net.init_params(np.random.default_rng(0))
        if set(expected) != set(params) or any(expected[n].shape != params[n].shape for n in expected):
            raise DimensionError(f"parameter set does not fit a {arch} {self.role}")
        self.params = params

    @property
    def config(self):
        return self.net.config

    @property
    def fingerprint(self) -> str:
        return self.params.fingerprint

    @property
    def frozen(self) -> bool:
        return self.params.frozen

    def freeze(self):
        self.params.freeze()
        return self

    def _check(self, past, future) -> tuple[Tensor, Tensor]:
        past, future = ad.as_tensor(past), ad.as_tensor(future)
        self.io.check(past, future)
        return past, future

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        save_checkpoint(self, path, extra)


class EvaluatorModel(_Model):
    """Water-level surrogate.

    Inputs and outputs live in normalised space. The network emits per-step
    level increments that are accumulated onto the last observed level, so an
    all-zero network is the persistence forecast.
    """

    role = "evaluator"

    def __init__(self, arch: str, roles: ColumnRoles, normalizer: Normalizer, w: int = 72, k: int = 24,
                 config=None, adjacency=None, params=None, seed: int = 0):
        past_cov = tuple(roles.evaluator_covariates)
        io = nets.IOSpec(w, k, len(roles.columns), len(past_cov), len(roles.water), past_cov, tuple(roles.water),
                         tuple(roles.columns[i] for i in past_cov),
                         tuple(tuple(float(v) for v in r) for r in (adjacency if adjacency is not None else ())))
        super().__init__(arch, roles, normalizer, io, config, params, seed)
        # cumulative-sum operator over the horizon
        self._accumulate = np.tril(np.ones((k, k)))

    def forward(self, past, future) -> Tensor:
        """(B, w, F), (B, k, C) normalised -> (B, k, N) normalised levels."""
        past, future = self._check(past, future)
        steps = self.net.forward(self.params, past, future)
        last = past.data[:, -1, list(self.roles.water)][:, None, :]
        return ad.add(ad.matmul(self._accumulate, steps), last)

    def to_feet(self, levels: Tensor) -> Tensor:
        water = list(self.roles.water)
        return ad.add(ad.mul(levels, self.normalizer.std[water]), self.normalizer.mean[water])

    def future_inputs(self, manager_future, schedule) -> Tensor:
        """Assemble the evaluator's future block from normalised rain/tide and a raw schedule."""
        roles = self.roles
        ctl = list(roles.controls)
        sched = ad.mul(ad.sub(schedule, self.normalizer.mean[ctl]), 1.0 / self.normalizer.std[ctl])
        joined = ad.concat([ad.as_tensor(manager_future), sched], axis=2)
        source = list(roles.manager_covariates) + ctl
        order = [source.index(c) for c in roles.evaluator_covariates]
        if order != list(range(len(order))):
            joined = joined[:, :, order]
        return joined

    def predict(self, past, future, batch: int = 2048) -> np.ndarray:
        """Forecast in feet from normalised inputs, without recording a tape."""
        out = []
        with no_tape():
            for i in range(0, len(past), batch):
                out.append(self.to_feet(self.forward(past[i:i + batch], future[i:i + batch])).data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.io.k, self.io.n_out))

    def attention(self, past, future) -> dict[str, np.ndarray]:
        """Per-covariate attention matrices (B, k, w + k)."""
        nets.require_attention(self.net)
        past, future = self._check(past, future)
        maps: dict[str, np.ndarray] = {}
        with no_tape():
            self.net.forward(self.params, past, future, capture=maps)
        return maps


class ManagerModel(_Model):
    """Schedule generator.

    The last layer is always a clamp into each structure's bounds; the network
    output is centred at the middle of the range before clamping.
    """

    role = "manager"
    output_layers = ("network", "centre", "clamp")

    def __init__(self, arch: str, roles: ColumnRoles, normalizer: Normalizer, w: int = 72, k: int = 24,
                 config=None, adjacency=None, bounds=None, params=None, seed: int = 0):
        past_cov = tuple(roles.manager_covariates)
        io = nets.IOSpec(w, k, len(roles.columns), len(past_cov), len(roles.controls), past_cov, tuple(roles.water),
                         tuple(roles.columns[i] for i in past_cov),
                         tuple(tuple(float(v) for v in r) for r in (adjacency if adjacency is not None else ())))
        super().__init__(arch, roles, normalizer, io, config, params, seed)
        if bounds is None:
            bounds = [(0.0, 1.0)] * len(roles.controls)
        b = np.asarray(bounds, dtype=np.float64)
        if b.shape != (len(roles.controls), 2) or np.any(b[:, 0] >= b[:, 1]):
            raise ConfigError(f"bounds must be one (min < max) pair per structure, got {b.tolist()}")
        self.lower, self.upper = b[:, 0].copy(), b[:, 1].copy()

    @property
    def bounds(self) -> np.ndarray:
        return np.stack([self.lower, self.upper], axis=1)

    def forward(self, past, future) -> Tensor:
        """(B, w, F), (B, k, 2) normalised -> (B, k, S) schedule within bounds."""
        past, future = self._check(past, future)
        raw = self.net.forward(self.params, past, future)
        centred = ad.add(raw, 0.5 * (self.lower + self.upper))
        return ad.clamp(centred, self.lower, self.upper)

    def schedule(self, past, future, batch: int = 2048) -> np.ndarray:
        out = []
        with no_tape():
            for i in range(0, len(past), batch):
                out.append(self.forward(past[i:i + batch], future[i:i + batch]).data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.io.k, self.io.n_out))


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: _Model, path: str | Path, extra: dict | None = None) -> None:
    """One ``.npz`` holding parameters plus a JSON header with everything needed to rebuild."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "role": model.role,
        "arch": model.arch,
        "config": model.net.config_dict(),
        "roles": model.roles.to_dict(),
        "normalizer": model.normalizer.to_dict(),
        "w": model.io.w,
        "k": model.io.k,
        "adjacency": [list(r) for r in model.io.adjacency],
        "fingerprint": model.fingerprint,
        "extra": extra or {},
    }
    if isinstance(model, ManagerModel):
        meta["bounds"] = model.bounds.tolist()
    arrays = {f"param/{k}": v for k, v in model.params.arrays().items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = _io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint_meta(path: str | Path) -> dict:
    with np.load(Path(path)) as z:
        return json.loads(z["meta"].tobytes().decode())


def load_checkpoint(path: str | Path) -> EvaluatorModel | ManagerModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with np.load(path) as z:
            meta = json.loads(z["meta"].tobytes().decode())
            params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    except (ValueError, KeyError, OSError) as exc:
        raise IngestionError(f"{path} is not a readable checkpoint: {exc}") from None
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise IngestionError(f"{path}: unknown checkpoint format {meta.get('format')!r}")
    kwargs = dict(arch=meta["arch"], roles=ColumnRoles.from_dict(meta["roles"]),
                  normalizer=Normalizer.from_dict(meta["normalizer"]), w=meta["w"], k=meta["k"],
                  config=meta["config"], adjacency=meta["adjacency"] or None, params=ParamSet(params))
    if meta["role"] == "evaluator":
        model = EvaluatorModel(**kwargs)
    elif meta["role"] == "manager":
        model = ManagerModel(bounds=meta["bounds"], **kwargs)
    else:
        raise IngestionError(f"{path}: unknown model role {meta['role']!r}")
    if model.fingerprint != meta["fingerprint"]:
        raise ContractError(f"{path}: parameter fingerprint does not match the recorded one")
    model.checkpoint_meta = meta
    return model
