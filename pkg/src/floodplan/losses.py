"""Threshold hinge losses, the supervised forecaster loss, and reporting metrics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError

FLOOD_LEVEL = 3.5
WASTE_LEVEL = 0.0


@dataclass(frozen=True)
class Thresholds:
    flood: np.ndarray
    waste: np.ndarray

    def __post_init__(self):
        flood = np.atleast_1d(np.asarray(self.flood, dtype=np.float64))
        waste = np.atleast_1d(np.asarray(self.waste, dtype=np.float64))
        flood, waste = np.broadcast_arrays(flood, waste)
        if np.any(waste >= flood):
            raise ConfigError("wastage threshold must lie below the flood threshold at every station")
        object.__setattr__(self, "flood", flood.copy())
        object.__setattr__(self, "waste", waste.copy())

    @classmethod
    def uniform(cls, n_stations: int, flood: float = FLOOD_LEVEL, waste: float = WASTE_LEVEL) -> "Thresholds":
        return cls(np.full(n_stations, flood), np.full(n_stations, waste))

    @classmethod
    def parse(cls, text: str, n_stations: int) -> "Thresholds":
        """``"upper,lower"`` as used on the command line."""
        try:
            upper, lower = (float(v) for v in text.split(","))
        except ValueError:
            raise ConfigError(f"thresholds must be 'upper,lower', got {text!r}") from None
        return cls.uniform(n_stations, upper, lower)


def flood_loss(levels, thresholds: Thresholds) -> Tensor:
    """Sum of squared exceedances above the flood level (stations on the last axis)."""
    return ad.square(ad.relu(ad.sub(levels, thresholds.flood))).sum()


def wastage_loss(levels, thresholds: Thresholds) -> Tensor:
    """Sum of squared deficits below the wastage level."""
    return ad.square(ad.relu(ad.sub(thresholds.waste, levels))).sum()


def total_loss(l1, l2, alpha: float = 1.0, beta: float = 1.0) -> Tensor:
    if alpha < 0 or beta < 0:
        raise ConfigError("alpha and beta must be non-negative")
    if alpha == 0 and beta == 0:
        raise ConfigError("alpha and beta cannot both be zero")
    return ad.add(ad.mul(l1, alpha), ad.mul(l2, beta))


def threshold_loss(levels, thresholds: Thresholds, alpha: float = 1.0, beta: float = 1.0) -> Tensor:
    return total_loss(flood_loss(levels, thresholds), wastage_loss(levels, thresholds), alpha, beta)


def evaluator_loss(predicted, observed) -> Tensor:
    """Squared error summed over stations, averaged over horizon steps (and batch)."""
    predicted = ad.as_tensor(predicted)
    observed = np.asarray(observed.data if isinstance(observed, Tensor) else observed)
    if predicted.shape != observed.shape:
        raise DimensionError(f"prediction {predicted.shape} vs observation {observed.shape}")
    per_step = ad.squared_error(predicted, observed).sum(axis=-1)
    return per_step.mean()


def mae_rmse(predicted, observed) -> tuple[float, float]:
    p, o = np.asarray(predicted, dtype=np.float64), np.asarray(observed, dtype=np.float64)
    if p.shape != o.shape:
        raise DimensionError(f"prediction {p.shape} vs observation {o.shape}")
    err = p - o
    return float(np.abs(err).mean()), float(np.sqrt((err * err).mean()))


@dataclass
class MetricsReport:
    """Per-station threshold statistics; areas in ft*h with one-hour steps."""

    stations: list[str]
    over_timesteps: np.ndarray
    over_area: np.ndarray
    under_timesteps: np.ndarray
    under_area: np.ndarray
    mae: np.ndarray | None = None
    rmse: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    FIELDS = ("over_timesteps", "over_area", "under_timesteps", "under_area")

    def totals(self) -> dict[str, float]:
        out = {
            "over_timesteps": int(self.over_timesteps.sum()),
            "over_area": float(self.over_area.sum()),
            "under_timesteps": int(self.under_timesteps.sum()),
            "under_area": float(self.under_area.sum()),
        }
        if self.mae is not None:
            out["mae"] = float(np.mean(self.mae))
            out["rmse"] = float(np.sqrt(np.mean(np.square(self.rmse))))
        return out

    def rows(self) -> list[dict]:
        rows = []
        for i, s in enumerate(self.stations):
            row = {"station": s, "over_timesteps": int(self.over_timesteps[i]),
                   "over_area": float(self.over_area[i]), "under_timesteps": int(self.under_timesteps[i]),
                   "under_area": float(self.under_area[i])}
            if self.mae is not None:
                row["mae"], row["rmse"] = float(self.mae[i]), float(self.rmse[i])
            rows.append(row)
        rows.append({"station": "ALL", **self.totals()})
        return rows

    def to_json(self) -> str:
        return json.dumps({"meta": self.meta, "rows": self.rows()}, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = self.rows()
        w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()


def threshold_metrics(levels, thresholds: Thresholds, stations: list[str] | None = None) -> MetricsReport:
    """Counts and areas of strict threshold violations; ``levels`` is (T, N) or (..., N)."""
    lv = np.asarray(levels, dtype=np.float64)
    lv = lv.reshape(-1, lv.shape[-1])
    over = lv - thresholds.flood
    under = thresholds.waste - lv
    return MetricsReport(
        stations=stations or [f"station_{i}" for i in range(lv.shape[1])],
        over_timesteps=(over > 0).sum(axis=0),
        over_area=_exact_column_sums(np.where(over > 0, over, 0.0)),
        under_timesteps=(under > 0).sum(axis=0),
        under_area=_exact_column_sums(np.where(under > 0, under, 0.0)),
    )


def _exact_column_sums(x: np.ndarray) -> np.ndarray:
    # correctly rounded, so the result does not depend on summation order or memory layout
    return np.array([math.fsum(col) for col in x.T], dtype=np.float64)


def forecast_metrics(predicted, observed, thresholds: Thresholds, stations: list[str] | None = None) -> MetricsReport:
    """Threshold statistics of a forecast plus per-station MAE/RMSE against observations."""
    p = np.asarray(predicted, dtype=np.float64)
    o = np.asarray(observed, dtype=np.float64)
    if p.shape != o.shape:
        raise DimensionError(f"prediction {p.shape} vs observation {o.shape}")
    rep = threshold_metrics(p, thresholds, stations)
    err = np.ascontiguousarray((p - o).reshape(-1, p.shape[-1]))
    rep.mae = np.abs(err).mean(axis=0)
    rep.rmse = np.sqrt((err * err).mean(axis=0))
    return rep
