"""Ensemble combination, regularizers, and the training objective.

Weights live on the learner simplex per (item, step, quantile) cell and are
parameterized by unconstrained logits through a softmax over the learner
axis.  The objective adds three entropy terms, each pulling the weights
toward uniformity along one tensor axis (items, steps, or quantiles), and
an L1 term, to the scaled mean quantile loss.

Tensor layout everywhere: (m, N, h, q) = (learner, item, step, quantile).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import QuantileSpec, atomic_open, format_tau
from .errors import DimensionMismatch, ZeroDenominator

# Regularizer axis selectors: d=1 items, d=2 steps, d=3 quantiles.
ENTROPY_AXES = (1, 2, 3)

L1_MODES = ("logits", "weights")


@dataclass(frozen=True)
class Alpha:
    """Nonnegative regularization strengths (items, steps, quantiles, L1)."""

    items: float = 0.0
    steps: float = 0.0
    quantiles: float = 0.0
    l1: float = 0.0

    def __post_init__(self):
        for name, value in self.as_dict().items():
            value = float(value)
            if not np.isfinite(value) or value < 0.0:
                raise ValueError(f"alpha.{name} must be finite and >= 0, got {value}")
            object.__setattr__(self, name, value)

    def as_dict(self) -> dict[str, float]:
        return {
            "items": self.items,
            "steps": self.steps,
            "quantiles": self.quantiles,
            "l1": self.l1,
        }

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.items, self.steps, self.quantiles, self.l1)

    @classmethod
    def from_sequence(cls, values) -> "Alpha":
        values = tuple(float(v) for v in values)
        if len(values) != 4:
            raise ValueError(f"alpha needs 4 components, got {len(values)}")
        return cls(*values)

    def entropy_strengths(self) -> tuple[tuple[int, float], ...]:
        return ((1, self.items), (2, self.steps), (3, self.quantiles))


ALPHA_ZERO = Alpha()


def weights_from_logits(theta: np.ndarray) -> np.ndarray:
    """Softmax over the learner axis, stabilized by max subtraction."""
    theta = np.asarray(theta, dtype=float)
    shifted = theta - theta.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def combine(w: np.ndarray, preds) -> np.ndarray:
    """Weighted sum of m prediction tensors, cell by cell."""
    preds = stack_predictions(preds)
    w = np.asarray(w, dtype=float)
    if w.shape != preds.shape:
        raise DimensionMismatch(
            f"weights {w.shape} do not match predictions {preds.shape}"
        )
    return (w * preds).sum(axis=0)


def stack_predictions(preds) -> np.ndarray:
    """Coerce a list of cubes or an (m, N, h, q) array to one array."""
    if isinstance(preds, np.ndarray):
        arr = preds
    else:
        arr = np.stack([np.asarray(getattr(p, "values", p), dtype=float) for p in preds])
    if arr.ndim != 4:
        raise DimensionMismatch(f"predictions must be (m, N, h, q), got {arr.shape}")
    return arr


def _axis_softmax(w: np.ndarray, axis: int) -> np.ndarray:
    shifted = w - w.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def axis_entropy(w: np.ndarray, d: int) -> float:
    """Negative entropy of the axis-d softmax renormalization of w.

    The weight tensor is renormalized by a softmax along the single axis
    named by d (1 items, 2 steps, 3 quantiles) and sum(sigma * log sigma)
    is taken over all cells.  Ranges over [-G*log(S), 0] with S the axis
    length and G the product of the other axis lengths; the lower bound is
    attained when w is constant along the axis within every group.
    """
    if d not in ENTROPY_AXES:
        raise ValueError(f"axis selector must be one of {ENTROPY_AXES}, got {d}")
    w = np.asarray(w, dtype=float)
    sig = _axis_softmax(w, d)
    return float((sig * np.log(sig)).sum())


def _axis_entropy_value_grad(w: np.ndarray, axis: int):
    sig = _axis_softmax(w, axis)
    logsig = np.log(sig)
    cell = sig * logsig
    group = cell.sum(axis=axis, keepdims=True)
    return cell.sum(), sig * (logsig - group)


def l1_term(theta: np.ndarray, w: np.ndarray, mode: str = "logits") -> float:
    """L1 penalty on the chosen parameterization.

    mode='weights' sums |w| and is identically N*h*q on simplex weights;
    mode='logits' sums |theta| and shrinks toward the uniform ensemble.
    """
    if mode not in L1_MODES:
        raise ValueError(f"l1 mode must be one of {L1_MODES}, got {mode!r}")
    if mode == "weights":
        return float(np.abs(w).sum())
    return float(np.abs(theta).sum())


def objective(theta, alpha: Alpha, preds, actuals, quantiles: QuantileSpec,
              l1_mode: str = "logits") -> float:
    """Regularized scaled quantile loss of the softmax-weighted ensemble."""
    value, _ = objective_and_gradient(
        theta, alpha, preds, actuals, quantiles, l1_mode=l1_mode, need_grad=False
    )
    return value


def objective_gradient(theta, alpha: Alpha, preds, actuals, quantiles: QuantileSpec,
                       l1_mode: str = "logits") -> np.ndarray:
    """Subgradient of the objective in the logits.

    At pinball kinks (prediction equal to the actual) the -tau branch is
    used; |theta| contributes sign(theta) with sign(0) = 0.  The
    mode='weights' L1 term is constant on the simplex and contributes
    nothing.
    """
    _, grad = objective_and_gradient(
        theta, alpha, preds, actuals, quantiles, l1_mode=l1_mode, need_grad=True
    )
    return grad


def objective_and_gradient(theta, alpha: Alpha, preds, actuals,
                           quantiles: QuantileSpec, l1_mode: str = "logits",
                           need_grad: bool = True):
    """Objective value and (optionally) its subgradient in one pass."""
    if l1_mode not in L1_MODES:
        raise ValueError(f"l1 mode must be one of {L1_MODES}, got {l1_mode!r}")
    theta = np.asarray(theta, dtype=float)
    preds = stack_predictions(preds)
    actual = np.asarray(getattr(actuals, "values", actuals), dtype=float)
    if theta.shape != preds.shape:
        raise DimensionMismatch(
            f"logits {theta.shape} do not match predictions {preds.shape}"
        )
    if actual.shape != preds.shape[1:3] or preds.shape[3] != quantiles.q:
        raise DimensionMismatch(
            f"predictions {preds.shape} do not match actuals {actual.shape} "
            f"and {quantiles.q} quantile levels"
        )

    w = weights_from_logits(theta)
    comb = (w * preds).sum(axis=0)
    taus = quantiles.as_array()
    z = actual[:, :, None]
    diff = z - comb
    denom = np.abs(actual).sum()
    if denom == 0.0:
        raise ZeroDenominator("all actuals are zero")
    scale = 2.0 / (quantiles.q * denom)
    value = scale * np.maximum(taus * diff, (taus - 1.0) * diff).sum()

    grad_w = None
    if need_grad:
        slope = np.where(comb <= z, -taus, 1.0 - taus) * scale
        grad_w = slope[None, ...] * preds

    for axis, strength in alpha.entropy_strengths():
        if strength == 0.0:
            continue
        if need_grad:
            ent, ent_grad = _axis_entropy_value_grad(w, axis)
            grad_w += strength * ent_grad
        else:
            ent = axis_entropy(w, axis)
        value += strength * ent

    if alpha.l1 != 0.0:
        value += alpha.l1 * l1_term(theta, w, l1_mode)

    if not need_grad:
        return float(value), None

    # Chain rule through the per-cell learner softmax.
    grad = w * (grad_w - (w * grad_w).sum(axis=0, keepdims=True))
    if alpha.l1 != 0.0 and l1_mode == "logits":
        grad += alpha.l1 * np.sign(theta)
    return float(value), grad


def write_weights(w: np.ndarray, learners, items, quantiles: QuantileSpec, path) -> None:
    """Serialize post-softmax weights as ``learner,item,step,tau,weight`` rows."""
    w = np.asarray(w, dtype=float)
    with atomic_open(path) as handle:
        writer = csv.writer(handle)
        writer.writerow(["learner", "item", "step", "tau", "weight"])
        for l, learner in enumerate(learners):
            for i, item in enumerate(items):
                for j in range(w.shape[2]):
                    for k in range(w.shape[3]):
                        writer.writerow(
                            [
                                learner,
                                item,
                                j + 1,
                                format_tau(quantiles.taus[k]),
                                f"{w[l, i, j, k]:.12g}",
                            ]
                        )
