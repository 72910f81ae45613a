"""Reference schedulers: replay of the recorded operations and a per-window genetic algorithm."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import no_tape
from .data import TimeSeriesFrame, WindowSample
from .errors import ConfigError, ContractError, SchemaError
from .losses import Thresholds, threshold_loss
from .models import EvaluatorModel


def rule_based_schedule(frame: TimeSeriesFrame, anchors, k: int = 24) -> np.ndarray:
    """Recorded gate/pump settings for the k hours after each anchor: (n, k, S)."""
    controls = frame.indices(["gate", "pump"])
    if not controls:
        raise SchemaError("frame has no gate or pump columns to replay")
    anchors = np.atleast_1d(np.asarray(anchors, dtype=np.int64))
    if anchors.size and (anchors.min() < 0 or anchors.max() + k >= len(frame)):
        raise ConfigError("anchor horizon runs past the end of the frame")
    rows = anchors[:, None] + 1 + np.arange(k)[None, :]
    return frame.values[rows][:, :, controls]


@dataclass(frozen=True)
class GaConfig:
    population: int = 50
    generations: int = 30
    tournament: int = 3
    crossover_rate: float = 0.9
    mutation_rate: float = 0.1
    # standard deviation as a fraction of each gene's range
    mutation_sigma: float = 0.1
    elitism: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.population < 2 or self.population % 2:
            raise ConfigError("population must be an even number >= 2")
        if self.generations < 1:
            raise ConfigError("generations must be >= 1")
        if not 1 <= self.tournament <= self.population:
            raise ConfigError("tournament size must be between 1 and the population")
        for name in ("crossover_rate", "mutation_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.mutation_sigma < 0:
            raise ConfigError("mutation_sigma must be non-negative")
        if not 0 <= self.elitism < self.population:
            raise ConfigError("elitism must be smaller than the population")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GaResult:
    genes: np.ndarray
    fitness: float
    # per generation (0 = initial population): best-ever and population-mean fitness
    best_trace: list[float] = field(default_factory=list)
    mean_trace: list[float] = field(default_factory=list)
    evaluations: int = 0

    def write_trace(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["generation", "best", "mean"])
            for g, (b, m) in enumerate(zip(self.best_trace, self.mean_trace)):
                w.writerow([g, repr(float(b)), repr(float(m))])


def genetic_minimize(fitness: Callable[[np.ndarray], float], lower, upper, config: GaConfig = GaConfig()) -> GaResult:
    """Generational GA with tournament selection, uniform crossover, clamped Gaussian mutation and elitism.

    ``fitness`` is called once per individual per generation, including the
    initial population: population * (generations + 1) calls in total.
    """
    lower, upper = np.asarray(lower, dtype=np.float64), np.asarray(upper, dtype=np.float64)
    if lower.shape != upper.shape or np.any(lower >= upper):
        raise ConfigError("gene bounds must satisfy lower < upper elementwise")
    rng = np.random.default_rng(config.seed)
    P, n = config.population, lower.size
    span = upper - lower
    pop = lower + rng.random((P, n)) * span
    fit = np.array([fitness(x) for x in pop])
    evaluations = P
    best_i = int(np.argmin(fit))
    best_genes, best_fit = pop[best_i].copy(), float(fit[best_i])
    result = GaResult(best_genes, best_fit, [best_fit], [float(fit.mean())])

    def tournament() -> np.ndarray:
        picks = rng.choice(P, size=config.tournament, replace=False)
        return pop[picks[np.argmin(fit[picks])]]

    for _ in range(config.generations):
        elite = np.argsort(fit, kind="stable")[:config.elitism]
        children = [pop[i].copy() for i in elite]
        while len(children) < P:
            a, b = tournament(), tournament()
            if rng.random() < config.crossover_rate:
                mask = rng.random(n) < 0.5
                c1, c2 = np.where(mask, a, b), np.where(mask, b, a)
            else:
                c1, c2 = a.copy(), b.copy()
            for c in (c1, c2):
                hit = rng.random(n) < config.mutation_rate
                c += hit * rng.normal(0.0, 1.0, n) * config.mutation_sigma * span
                np.clip(c, lower, upper, out=c)
            children.extend([c1, c2])
        pop = np.array(children[:P])
        fit = np.array([fitness(x) for x in pop])
        evaluations += P
        i = int(np.argmin(fit))
        if fit[i] < best_fit:
            best_genes, best_fit = pop[i].copy(), float(fit[i])
        result.best_trace.append(best_fit)
        result.mean_trace.append(float(fit.mean()))
    result.genes, result.fitness, result.evaluations = best_genes, best_fit, evaluations
    return result


class CountingFitness:
    """Schedule fitness through the Evaluator, one forward pass per call."""

    def __init__(self, window: WindowSample, evaluator: EvaluatorModel, thresholds: Thresholds,
                 alpha: float = 1.0, beta: float = 1.0):
        self.past = window.past[None]
        self.future = window.future_cov[None]
        self.evaluator = evaluator
        self.thresholds = thresholds
        self.alpha, self.beta = alpha, beta
        self.shape = (evaluator.io.k, len(evaluator.roles.controls))
        self.calls = 0

    def __call__(self, genes: np.ndarray) -> float:
        self.calls += 1
        ev = self.evaluator
        with no_tape():
            fut = ev.future_inputs(self.future, genes.reshape((1,) + self.shape))
            levels = ev.to_feet(ev.forward(self.past, fut))
            return threshold_loss(levels, self.thresholds, self.alpha, self.beta).item()


def ga_optimize(window: WindowSample, evaluator: EvaluatorModel, thresholds: Thresholds,
                config: GaConfig = GaConfig(), bounds=None, alpha: float = 1.0,
                beta: float = 1.0) -> tuple[np.ndarray, GaResult]:
    """Search one window's k x S schedule against the frozen evaluator.

    ``window`` is a normalised manager-mode sample (future block = rain, tide).
    Returns the best schedule and the full result with fitness traces.
    """
    if not evaluator.frozen:
        raise ContractError("ga_optimize requires a frozen evaluator")
    fitness = CountingFitness(window, evaluator, thresholds, alpha, beta)
    k, S = fitness.shape
    b = np.asarray(bounds if bounds is not None else [(0.0, 1.0)] * S, dtype=np.float64)
    lower = np.broadcast_to(b[:, 0], (k, S)).ravel()
    upper = np.broadcast_to(b[:, 1], (k, S)).ravel()
    result = genetic_minimize(fitness, lower, upper, config)
    result.evaluations = fitness.calls
    return result.genes.reshape(k, S), result
