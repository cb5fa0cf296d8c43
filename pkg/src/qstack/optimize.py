"""Weight fitting for a fixed alpha, and the outer search over alpha.

The inner problem is solved by deterministic full-batch first-order descent
on the logits with adaptive per-coordinate scaling (Adam-style moments),
an incumbent that tracks the best objective seen, and multiplicative step
decay when no improvement is found over a patience window.  Adaptive
scaling matters here: the softmax saturates as weight mass concentrates on
one learner, so raw subgradient steps stall long before the weights reach
a simplex vertex.

The outer problem evaluates a grid of alpha points by backtest validation
loss and can optionally refine the grid argmin with a bounded Nelder-Mead
search (coordinates clamped to [0, upper]).
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .data import QuantileSpec, atomic_open
from .errors import NonFiniteObjective
from .loss import mean_wql
from .objective import Alpha, combine, objective_and_gradient, stack_predictions

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-12

# Stop once decay has shrunk the step below this fraction of its start.
_MIN_STEP_FRACTION = 1e-9


@dataclass(frozen=True)
class FitOptions:
    """Inner-loop controls; defaults suit backtest-window-sized problems.

    seed is part of the interface for reproducibility bookkeeping; the
    fitting path itself is deterministic and does not consume it.
    """

    max_iters: int = 2000
    step_size: float = 0.1
    step_decay: float = 0.5
    tol: float = 1e-10
    patience: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if not 0.0 < self.step_decay <= 1.0:
            raise ValueError("step_decay must be in (0, 1]")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass(frozen=True)
class FitResult:
    weights: np.ndarray  # (m, N, h, q)
    objective: float
    trace: np.ndarray  # objective value at each evaluated iterate
    logits: np.ndarray
    n_iters: int


def fit_weights(preds, actuals, quantiles: QuantileSpec, alpha: Alpha,
                opts: FitOptions | None = None, l1_mode: str = "logits") -> FitResult:
    """Minimize the regularized objective from uniform (all-zero) logits.

    Deterministic given its inputs.  Returns the weights of the best
    objective seen; raises NonFiniteObjective (with the iteration index)
    if the objective leaves the reals.
    """
    opts = opts or FitOptions()
    preds = stack_predictions(preds)
    actual = np.asarray(getattr(actuals, "values", actuals), dtype=float)

    theta = np.zeros_like(preds)
    value, grad = objective_and_gradient(theta, alpha, preds, actual, quantiles, l1_mode)
    if not np.isfinite(value):
        raise NonFiniteObjective(0)

    best_value = value
    best_theta = theta.copy()
    trace = [value]

    from .objective import weights_from_logits

    if not grad.any():
        # Stationary from the start (e.g. a single learner).
        return FitResult(
            weights=weights_from_logits(best_theta),
            objective=best_value,
            trace=np.asarray(trace),
            logits=best_theta,
            n_iters=0,
        )

    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    step = opts.step_size
    stall = 0
    iters = 0

    for it in range(1, opts.max_iters + 1):
        iters = it
        m1 = _ADAM_BETA1 * m1 + (1.0 - _ADAM_BETA1) * grad
        m2 = _ADAM_BETA2 * m2 + (1.0 - _ADAM_BETA2) * grad * grad
        m1_hat = m1 / (1.0 - _ADAM_BETA1**it)
        m2_hat = m2 / (1.0 - _ADAM_BETA2**it)
        theta = theta - step * m1_hat / (np.sqrt(m2_hat) + _ADAM_EPS)

        value, grad = objective_and_gradient(theta, alpha, preds, actual, quantiles, l1_mode)
        if not np.isfinite(value):
            raise NonFiniteObjective(it)
        trace.append(value)

        if value < best_value:
            if value < best_value - opts.tol:
                stall = 0
            else:
                stall += 1
            best_value = value
            best_theta = theta.copy()
        else:
            stall += 1

        if stall >= opts.patience:
            step *= opts.step_decay
            stall = 0
            if step < opts.step_size * _MIN_STEP_FRACTION:
                break
        if not grad.any():
            break

    return FitResult(
        weights=weights_from_logits(best_theta),
        objective=best_value,
        trace=np.asarray(trace),
        logits=best_theta,
        n_iters=iters,
    )


def evaluate_alpha(alpha: Alpha, train_pair, val_pair, quantiles: QuantileSpec,
                   opts: FitOptions | None = None, l1_mode: str = "logits") -> float:
    """Fit weights on the train pair, score them index-wise on the val pair."""
    train_preds, train_actuals = train_pair
    val_preds, val_actuals = val_pair
    fit = fit_weights(train_preds, train_actuals, quantiles, alpha, opts, l1_mode)
    prediction = combine(fit.weights, stack_predictions(val_preds))
    return mean_wql(prediction, val_actuals, quantiles)


GRID_VALUES = (0.0, 0.01, 0.1, 1.0)


def default_alpha_grid(values=GRID_VALUES, max_active: int = 2) -> tuple[Alpha, ...]:
    """Cartesian grid over the given values, keeping points with at most
    ``max_active`` nonzero coordinates, in lexicographic order."""
    points = sorted(
        point
        for point in itertools.product(sorted(set(values)), repeat=4)
        if sum(1 for v in point if v != 0.0) <= max_active
    )
    return tuple(Alpha.from_sequence(p) for p in points)


def single_axis_grid(values=(0.01, 0.1, 1.0)) -> tuple[Alpha, ...]:
    """The origin plus each value on each single coordinate."""
    points = [(0.0, 0.0, 0.0, 0.0)]
    for axis in range(4):
        for v in sorted(values):
            point = [0.0, 0.0, 0.0, 0.0]
            point[axis] = v
            points.append(tuple(point))
    return tuple(Alpha.from_sequence(p) for p in sorted(points))


@dataclass(frozen=True)
class AlphaSearchSpec:
    """Grid of candidate alphas plus optional local refinement settings."""

    grid: tuple[Alpha, ...]
    refine: bool = False
    refine_budget: int = 60
    upper: tuple[float, float, float, float] = (10.0, 10.0, 10.0, 10.0)

    def __post_init__(self):
        grid = tuple(self.grid)
        if not grid:
            raise ValueError("alpha grid must be non-empty")
        upper = tuple(float(u) for u in self.upper)
        if len(upper) != 4 or any(u < 0 for u in upper):
            raise ValueError("upper bounds must be 4 nonnegative reals")
        for point in grid:
            if any(v > u for v, u in zip(point.as_tuple(), upper)):
                raise ValueError(f"grid point {point.as_tuple()} exceeds bounds {upper}")
        if self.refine_budget < 0:
            raise ValueError("refine_budget must be >= 0")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "upper", upper)


@dataclass(frozen=True)
class AlphaEvaluation:
    alpha: Alpha
    val_wql: float
    order: int  # 1-based evaluation index
    source: str  # "grid" or "refine"


@dataclass(frozen=True)
class SearchResult:
    alpha_hat: Alpha
    val_wql: float
    evaluations: tuple[AlphaEvaluation, ...] = field(repr=False)


def search_alpha(spec: AlphaSearchSpec, train_pair, val_pair, quantiles: QuantileSpec,
                 opts: FitOptions | None = None, l1_mode: str = "logits") -> SearchResult:
    """Pick the alpha with the lowest backtest validation loss.

    Every grid point is evaluated; with refine enabled, a bounded
    Nelder-Mead search starts from the grid argmin and spends at most
    ``refine_budget`` extra evaluations.  The argmin over everything
    evaluated wins, with exact ties broken toward the lexicographically
    smallest alpha.
    """
    evaluations: list[AlphaEvaluation] = []

    def record(alpha: Alpha, source: str) -> float:
        loss = evaluate_alpha(alpha, train_pair, val_pair, quantiles, opts, l1_mode)
        evaluations.append(
            AlphaEvaluation(alpha=alpha, val_wql=loss, order=len(evaluations) + 1,
                            source=source)
        )
        return loss

    for alpha in spec.grid:
        record(alpha, "grid")

    if spec.refine and spec.refine_budget > 0:
        incumbent = min(evaluations, key=lambda e: (e.val_wql, e.alpha.as_tuple()))
        upper = np.asarray(spec.upper)

        def fun(x):
            clamped = np.clip(x, 0.0, upper)
            return record(Alpha.from_sequence(clamped), "refine")

        minimize(
            fun,
            x0=np.asarray(incumbent.alpha.as_tuple()),
            method="Nelder-Mead",
            bounds=[(0.0, u) for u in spec.upper],
            options={"maxfev": spec.refine_budget, "xatol": 1e-4, "fatol": 1e-12},
        )

    best = min(evaluations, key=lambda e: (e.val_wql, e.alpha.as_tuple()))
    return SearchResult(alpha_hat=best.alpha, val_wql=best.val_wql,
                        evaluations=tuple(evaluations))


def write_search_report(evaluations, path) -> None:
    """Serialize evaluations as ``alpha1..alpha4,val_wql,evals,source`` rows."""
    with atomic_open(path) as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["alpha1", "alpha2", "alpha3", "alpha4", "val_wql", "evals", "source"]
        )
        for ev in evaluations:
            a = ev.alpha.as_tuple()
            writer.writerow(
                [repr(a[0]), repr(a[1]), repr(a[2]), repr(a[3]),
                 repr(ev.val_wql), ev.order, ev.source]
            )
