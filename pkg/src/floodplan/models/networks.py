"""Network bodies shared by the Evaluator and the Manager.

Every network maps a batch of past blocks ``(B, w, F)`` and future covariate
blocks ``(B, k, C)`` to per-step outputs ``(B, k, n_out)``. Wrappers in
:mod:`floodplan.models.wrappers` add output conventions on top.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..errors import CapabilityError, ConfigError, DimensionError
from . import layers as L

ARCHITECTURES = ("mlp", "tcn", "gtn")
# output layers start small so untrained models sit near their neutral output
OUTPUT_INIT_SCALE = 0.1
COMPONENTS = ("graph", "recurrent", "conv", "encoder", "cross_attention")


@dataclass(frozen=True)
class IOSpec:
    """Shapes and column roles a network is built for.

    ``past_covariates`` lists, for every future covariate column, the index of
    the same variable inside the past block, so past and future can be joined
    into one ``w + k`` sequence.
    """

    w: int
    k: int
    n_past: int
    n_future: int
    n_out: int
    past_covariates: tuple[int, ...]
    water: tuple[int, ...]
    covariate_names: tuple[str, ...] = ()
    adjacency: tuple[tuple[float, ...], ...] = ()

    def __post_init__(self):
        if len(self.past_covariates) != self.n_future:
            raise DimensionError("past_covariates must name one past column per future covariate")
        if self.w <= 0 or self.k <= 0:
            raise ConfigError("w and k must be positive")

    def check(self, past: Tensor, future: Tensor) -> None:
        if past.ndim != 3 or past.shape[1:] != (self.w, self.n_past):
            raise DimensionError(f"past block {past.shape} does not match (B, {self.w}, {self.n_past})")
        if future.ndim != 3 or future.shape[1:] != (self.k, self.n_future):
            raise DimensionError(f"future block {future.shape} does not match (B, {self.k}, {self.n_future})")
        if past.shape[0] != future.shape[0]:
            raise DimensionError(f"batch sizes differ: {past.shape[0]} vs {future.shape[0]}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "IOSpec":
        d = dict(d)
        for key in ("past_covariates", "water", "covariate_names"):
            d[key] = tuple(d[key])
        d["adjacency"] = tuple(tuple(r) for r in d.get("adjacency", ()))
        return cls(**d)


def covariate_sequence(past: Tensor, future: Tensor, io: IOSpec) -> Tensor:
    """Join past and future covariates into one (B, w + k, C) sequence."""
    return ad.concat([past[:, :, list(io.past_covariates)], future], axis=1)


class Network:
    arch = ""

    def __init__(self, io: IOSpec, config=None):
        self.io = io
        self.config = config

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def forward(self, params, past: Tensor, future: Tensor, capture: dict | None = None) -> Tensor:
        raise NotImplementedError

    def config_dict(self) -> dict:
        return asdict(self.config) if self.config is not None else {}


# ---------------------------------------------------------------- MLP


@dataclass(frozen=True)
class MlpConfig:
    hidden: tuple[int, ...] = (64, 32)


class MlpNetwork(Network):
    """Flatten the window and map it through relu hidden layers."""

    arch = "mlp"

    def __init__(self, io: IOSpec, config: MlpConfig | None = None):
        super().__init__(io, config or MlpConfig())

    def _sizes(self):
        io = self.io
        return [io.w * io.n_past + io.k * io.n_future, *self.config.hidden, io.k * io.n_out]

    def init_params(self, rng):
        sizes = self._sizes()
        p = {}
        last = len(sizes) - 2
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            p.update(L.init_dense(rng, f"mlp{i}", a, b, scale=OUTPUT_INIT_SCALE if i == last else 1.0))
        return p

    def forward(self, params, past, future, capture=None):
        io = self.io
        B = past.shape[0]
        h = ad.concat([ad.reshape(past, (B, -1)), ad.reshape(future, (B, -1))], axis=1)
        n_layers = len(self._sizes()) - 1
        for i in range(n_layers):
            h = L.dense(h, params, f"mlp{i}")
            if i < n_layers - 1:
                h = ad.relu(h)
        return ad.reshape(h, (B, io.k, io.n_out))


# ---------------------------------------------------------------- TCN


@dataclass(frozen=True)
class TcnConfig:
    dilations: tuple[int, ...] = (1, 2, 4, 8, 16, 32)
    filters: int = 64
    kernel: int = 2
    head_hidden: int = 32


class TcnNetwork(Network):
    """Residual causal dilated convolutions over the joined covariate sequence.

    The past block (including water levels) is summarised by a dense
    encoder and broadcast to every future step before the output head.
    """

    arch = "tcn"

    def __init__(self, io: IOSpec, config: TcnConfig | None = None):
        super().__init__(io, config or TcnConfig())

    def init_params(self, rng):
        io, cfg = self.io, self.config
        p = L.init_dense(rng, "tcn.in", io.n_future, cfg.filters)
        for i, _ in enumerate(cfg.dilations):
            p.update(L.init_conv(rng, f"tcn.conv{i}", cfg.filters, cfg.filters, cfg.kernel))
        p.update(L.init_dense(rng, "tcn.past", io.w * io.n_past, cfg.head_hidden))
        p.update(L.init_dense(rng, "tcn.h1", cfg.filters + cfg.head_hidden + io.n_future, cfg.head_hidden))
        p.update(L.init_dense(rng, "tcn.out", cfg.head_hidden, io.n_out, scale=OUTPUT_INIT_SCALE))
        return p

    def forward(self, params, past, future, capture=None):
        io, cfg = self.io, self.config
        B = past.shape[0]
        h = L.dense(covariate_sequence(past, future, io), params, "tcn.in")
        for i, d in enumerate(cfg.dilations):
            h = ad.add(h, ad.relu(L.causal_conv(h, params, f"tcn.conv{i}", d)))
        steps = h[:, io.w:, :]
        summary = ad.relu(L.dense(ad.reshape(past, (B, -1)), params, "tcn.past"))
        z = ad.concat([steps, L.broadcast_steps(summary, io.k), future], axis=2)
        return L.dense(ad.relu(L.dense(z, params, "tcn.h1")), params, "tcn.out")


# ---------------------------------------------------------------- GTN


@dataclass(frozen=True)
class GtnConfig:
    graph_channels: tuple[int, ...] = (32, 16)
    recurrent_units: int = 16
    conv_filters: int = 96
    heads: int = 1
    d_model: int = 16
    head_hidden: int = 32
    graph: bool = True
    recurrent: bool = True
    conv: bool = True
    encoder: bool = True
    cross_attention: bool = True

    def __post_init__(self):
        if not (self.graph or self.conv):
            raise ConfigError("at least one of graph or conv must stay enabled")
        if self.heads < 1 or self.d_model < 1:
            raise ConfigError("heads and d_model must be positive")

    def enabled(self) -> tuple[str, ...]:
        return tuple(c for c in COMPONENTS if getattr(self, c))


def ablate(config: GtnConfig, toggle: str) -> GtnConfig:
    """Return ``config`` with one component switched off."""
    if toggle not in COMPONENTS:
        raise ConfigError(f"unknown component {toggle!r}; expected one of {COMPONENTS}")
    return replace(config, **{toggle: False})


class GtnNetwork(Network):
    """Graph, recurrent, convolutional and attention branches fused per step.

    * graph: two GCN layers over stations, node features are each station's
      past water levels; flattened into a state summary.
    * recurrent: a GRU over the full past block; final state joins the summary.
    * conv: causal convolution over the joined covariate sequence.
    * encoder: one self-attention block over the embedded covariate sequence.
    * cross_attention: for each covariate, future-step queries (positional
      embedding plus state summary) attend over that covariate's own
      ``w + k`` series, giving one ``k x (w + k)`` attention matrix each.
    """

    arch = "gtn"

    def __init__(self, io: IOSpec, config: GtnConfig | None = None):
        super().__init__(io, config or GtnConfig())
        if self.config.graph:
            if not io.adjacency or len(io.adjacency) != len(io.water):
                raise DimensionError("graph branch needs an adjacency over the water stations")
            self._a_hat = L.normalized_adjacency(np.array(io.adjacency))

    def _state_width(self) -> int:
        cfg = self.config
        width = 0
        if cfg.graph:
            width += len(self.io.water) * cfg.graph_channels[-1]
        if cfg.recurrent:
            width += cfg.recurrent_units
        return width

    def _step_width(self) -> int:
        cfg, io = self.config, self.io
        width = io.n_future + self._state_width()
        if cfg.conv:
            width += cfg.conv_filters
        if cfg.encoder:
            width += cfg.d_model
        if cfg.cross_attention:
            width += io.n_future * cfg.heads * cfg.d_model
        return width

    def init_params(self, rng):
        cfg, io = self.config, self.io
        T, d = io.w + io.k, cfg.d_model
        p: dict[str, np.ndarray] = {}
        if cfg.graph:
            sizes = [io.w, *cfg.graph_channels]
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
                p.update(L.init_dense(rng, f"gtn.gc{i}", a, b))
        if cfg.recurrent:
            p.update(L.init_gru(rng, "gtn.gru", io.n_past, cfg.recurrent_units))
        if cfg.conv:
            p.update(L.init_conv(rng, "gtn.conv", io.n_future, cfg.conv_filters, 2))
        if cfg.encoder:
            p.update(L.init_dense(rng, "gtn.enc_in", io.n_future, d))
            p["gtn.enc_pos"] = rng.normal(0.0, 0.1, size=(T, d))
            p.update(L.init_encoder(rng, "gtn.enc", d, 2 * d))
        if cfg.cross_attention:
            S = self._state_width()
            for c in range(io.n_future):
                base = f"gtn.xa{c}"
                p[f"{base}.embed"] = L.xavier(rng, 1, d, (1, d))
                p[f"{base}.pos"] = rng.normal(0.0, 0.1, size=(T, d))
                p[f"{base}.qpos"] = rng.normal(0.0, 0.1, size=(io.k, d))
                for h in range(cfg.heads):
                    p.update(L.init_dense(rng, f"{base}.h{h}.q", d + S, d))
                    p.update(L.init_dense(rng, f"{base}.h{h}.k", d, d))
                    p.update(L.init_dense(rng, f"{base}.h{h}.v", d, d))
        p.update(L.init_dense(rng, "gtn.h1", self._step_width(), cfg.head_hidden))
        p.update(L.init_dense(rng, "gtn.out", cfg.head_hidden, io.n_out, scale=OUTPUT_INIT_SCALE))
        return p

    def _state(self, params, past: Tensor) -> Tensor | None:
        cfg, io = self.config, self.io
        B = past.shape[0]
        parts = []
        if cfg.graph:
            nodes = ad.transpose(past[:, :, list(io.water)])  # (B, N, w)
            for i in range(len(cfg.graph_channels)):
                nodes = L.graph_conv(nodes, self._a_hat, params[f"gtn.gc{i}.w"], params[f"gtn.gc{i}.b"],
                                     normalized=True)
            parts.append(ad.reshape(nodes, (B, -1)))
        if cfg.recurrent:
            parts.append(L.gru(past, params, "gtn.gru"))
        if not parts:
            return None
        return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)

    def forward(self, params, past, future, capture=None):
        cfg, io = self.config, self.io
        B = past.shape[0]
        seq = covariate_sequence(past, future, io)  # (B, T, C)
        state = self._state(params, past)
        state_steps = L.broadcast_steps(state, io.k) if state is not None else None
        feats = [future]
        if state_steps is not None:
            feats.append(state_steps)
        if cfg.conv:
            conv = ad.relu(L.causal_conv(seq, params, "gtn.conv"))
            feats.append(conv[:, io.w:, :])
        if cfg.encoder:
            e = ad.add(L.dense(seq, params, "gtn.enc_in"), params["gtn.enc_pos"])
            e = L.encoder_block(e, params, "gtn.enc")
            feats.append(e[:, io.w:, :])
        if cfg.cross_attention:
            ones = np.ones((B, 1, 1))
            for c in range(io.n_future):
                base = f"gtn.xa{c}"
                series = seq[:, :, c:c + 1]  # (B, T, 1)
                emb = ad.add(ad.matmul(series, params[f"{base}.embed"]), params[f"{base}.pos"])
                qsrc = ad.mul(params[f"{base}.qpos"], ones)  # (B, k, d)
                if state_steps is not None:
                    qsrc = ad.concat([qsrc, state_steps], axis=2)
                maps = []
                for h in range(cfg.heads):
                    hb = f"{base}.h{h}"
                    out, attn = L.cross_attention(L.dense(qsrc, params, f"{hb}.q"), L.dense(emb, params, f"{hb}.k"),
                                                  L.dense(emb, params, f"{hb}.v"), cfg.d_model)
                    feats.append(out)
                    maps.append(attn.data)
                if capture is not None:
                    capture[io.covariate_names[c] if io.covariate_names else str(c)] = np.mean(maps, axis=0)
        z = ad.concat(feats, axis=2)
        return L.dense(ad.relu(L.dense(z, params, "gtn.h1")), params, "gtn.out")


CONFIG_TYPES = {"mlp": MlpConfig, "tcn": TcnConfig, "gtn": GtnConfig}
NETWORK_TYPES = {"mlp": MlpNetwork, "tcn": TcnNetwork, "gtn": GtnNetwork}


def build_network(arch: str, io: IOSpec, config=None) -> Network:
    if arch not in NETWORK_TYPES:
        raise ConfigError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    if isinstance(config, dict):
        config = config_from_dict(arch, config)
    return NETWORK_TYPES[arch](io, config)


def config_from_dict(arch: str, d: dict):
    cls = CONFIG_TYPES[arch]
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return cls(**d)


def require_attention(net: Network) -> None:
    if not isinstance(net, GtnNetwork) or not net.config.cross_attention:
        raise CapabilityError(f"{net.arch} network has no cross-attention to extract")


def param_count(net: Network) -> int:
    return int(sum(math.prod(v.shape) for v in net.init_params(np.random.default_rng(0)).values()))
