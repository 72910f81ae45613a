"""Evaluator and Manager networks."""

from __future__ import annotations

import numpy as np

from .layers import cross_attention, graph_conv, normalized_adjacency
from .networks import (
    ARCHITECTURES, COMPONENTS, GtnConfig, IOSpec, MlpConfig, TcnConfig, ablate, build_network, param_count,
)
from .wrappers import (
    ColumnRoles, EvaluatorModel, ManagerModel, load_checkpoint, read_checkpoint_meta, save_checkpoint,
)


def extract_attention(model: EvaluatorModel, past: np.ndarray, future: np.ndarray,
                      covariate: str | None = None):
    """Attention of the future steps over each covariate's ``w + k`` series.

    ``past``/``future`` are one normalised sample (2-D) or a batch (3-D).
    Returns ``{covariate: (k, w + k)}`` for a single sample (or the one
    requested matrix when ``covariate`` is given). Column ``w`` is the first
    future hour; columns before it are the look-back window.
    """
    single = np.ndim(past) == 2
    if single:
        past, future = past[None], future[None]
    maps = model.attention(np.asarray(past), np.asarray(future))
    if single:
        maps = {k: v[0] for k, v in maps.items()}
    if covariate is None:
        return maps
    if covariate not in maps:
        raise KeyError(f"no attention for {covariate!r}; available: {sorted(maps)}")
    return maps[covariate]


__all__ = [
    "ARCHITECTURES", "COMPONENTS", "ColumnRoles", "EvaluatorModel", "GtnConfig", "IOSpec", "ManagerModel",
    "MlpConfig", "TcnConfig", "ablate", "build_network", "cross_attention", "extract_attention", "graph_conv",
    "load_checkpoint", "normalized_adjacency", "param_count", "read_checkpoint_meta", "save_checkpoint",
]
