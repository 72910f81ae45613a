"""Functional network layers over :mod:`floodplan.autodiff` tensors.

Layers read their weights from a parameter mapping by prefix, so a model is
just a naming scheme plus an init function.
"""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..errors import DimensionError


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def init_dense(rng, name: str, n_in: int, n_out: int, bias: float = 0.0, scale: float = 1.0) -> dict[str, np.ndarray]:
    return {f"{name}.w": scale * xavier(rng, n_in, n_out), f"{name}.b": np.full(n_out, bias)}


def dense(x: Tensor, p: Mapping[str, Tensor], name: str) -> Tensor:
    return ad.add(ad.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])


def broadcast_steps(x: Tensor, steps: int) -> Tensor:
    """(B, F) -> (B, steps, F)."""
    return ad.mul(ad.reshape(x, (x.shape[0], 1, x.shape[1])), np.ones((1, steps, 1)))


# ---------------------------------------------------------------- recurrent


def init_gru(rng, name: str, n_in: int, hidden: int) -> dict[str, np.ndarray]:
    p = {}
    for gate in ("z", "r", "n"):
        p[f"{name}.w{gate}"] = xavier(rng, n_in, hidden)
        p[f"{name}.u{gate}"] = xavier(rng, hidden, hidden)
        p[f"{name}.b{gate}"] = np.zeros(hidden)
    return p


def gru(x: Tensor, p: Mapping[str, Tensor], name: str) -> Tensor:
    """Run a GRU over (B, T, F) and return the final hidden state (B, H).

    Gates keep separate weight matrices so no step slices a wide tensor.
    """
    B, T, _ = x.shape
    H = p[f"{name}.uz"].shape[0]
    w = {g: (p[f"{name}.w{g}"], p[f"{name}.u{g}"], p[f"{name}.b{g}"]) for g in ("z", "r", "n")}
    h = Tensor(np.zeros((B, H)))
    for t in range(T):
        xt = x[:, t, :]
        z = ad.sigmoid(ad.add(ad.add(ad.matmul(xt, w["z"][0]), ad.matmul(h, w["z"][1])), w["z"][2]))
        r = ad.sigmoid(ad.add(ad.add(ad.matmul(xt, w["r"][0]), ad.matmul(h, w["r"][1])), w["r"][2]))
        n = ad.tanh(ad.add(ad.add(ad.matmul(xt, w["n"][0]), ad.mul(r, ad.matmul(h, w["n"][1]))), w["n"][2]))
        h = ad.add(n, ad.mul(z, ad.sub(h, n)))
    return h


# ---------------------------------------------------------------- convolution


def init_conv(rng, name: str, n_in: int, n_out: int, kernel: int = 2) -> dict[str, np.ndarray]:
    return {f"{name}.w": xavier(rng, n_in * kernel, n_out, (kernel, n_in, n_out)),
            f"{name}.b": np.zeros(n_out)}


def _shift(x: Tensor, s: int) -> Tensor:
    """Delay a (B, T, C) sequence by ``s`` steps, zero-filling the start."""
    if s == 0:
        return x
    B, T, C = x.shape
    if s >= T:
        return Tensor(np.zeros(x.shape))
    return ad.concat([Tensor(np.zeros((B, s, C))), x[:, : T - s, :]], axis=1)


def causal_conv(x: Tensor, p: Mapping[str, Tensor], name: str, dilation: int = 1) -> Tensor:
    """Causal dilated 1-D convolution: y_t = b + sum_j W_j x_{t - (K-1-j) d}."""
    w = p[f"{name}.w"]
    K = w.shape[0]
    out = p[f"{name}.b"]
    for j in range(K):
        out = ad.add(out, ad.matmul(_shift(x, (K - 1 - j) * dilation), w[j]))
    return out


# ---------------------------------------------------------------- graph


def normalized_adjacency(adjacency: np.ndarray) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2."""
    A = np.asarray(adjacency, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"adjacency must be square, got {A.shape}")
    A = A + np.eye(A.shape[0])
    d = 1.0 / np.sqrt(A.sum(axis=1))
    return A * d[:, None] * d[None, :]


def graph_conv(x: Tensor, adjacency: np.ndarray, weight: Tensor, bias: Tensor | None = None,
               activation=ad.relu, normalized: bool = False) -> Tensor:
    """sigma(A_hat x W) over node features x of shape (..., N, F)."""
    A_hat = np.asarray(adjacency) if normalized else normalized_adjacency(adjacency)
    if x.shape[-2] != A_hat.shape[0]:
        raise DimensionError(f"features have {x.shape[-2]} nodes but adjacency has {A_hat.shape[0]}")
    y = ad.matmul(ad.matmul(Tensor(A_hat), x), weight)
    if bias is not None:
        y = ad.add(y, bias)
    return activation(y) if activation is not None else y


# ---------------------------------------------------------------- attention


def cross_attention(q: Tensor, k: Tensor, v: Tensor, d_k: int | None = None) -> tuple[Tensor, Tensor]:
    """softmax(Q K^T / sqrt(d_k)) V.

    Returns the fused output and the row-stochastic attention matrix.
    """
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    d_k = d_k or q.shape[-1]
    if d_k <= 0:
        raise DimensionError("d_k must be positive")
    logits = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d_k))
    attn = ad.softmax_rows(logits)
    return ad.matmul(attn, v), attn


def init_encoder(rng, name: str, d: int, ff: int) -> dict[str, np.ndarray]:
    out = {}
    for part in ("q", "k", "v", "o"):
        out.update(init_dense(rng, f"{name}.{part}", d, d))
    out.update(init_dense(rng, f"{name}.ff1", d, ff))
    out.update(init_dense(rng, f"{name}.ff2", ff, d))
    return out


def encoder_block(x: Tensor, p: Mapping[str, Tensor], name: str) -> Tensor:
    """Single-head self-attention with residual feed-forward."""
    att, _ = cross_attention(dense(x, p, f"{name}.q"), dense(x, p, f"{name}.k"), dense(x, p, f"{name}.v"))
    x = ad.add(x, dense(att, p, f"{name}.o"))
    return ad.add(x, dense(ad.relu(dense(x, p, f"{name}.ff1")), p, f"{name}.ff2"))
