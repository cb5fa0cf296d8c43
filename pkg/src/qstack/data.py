"""Panel data model, backtest splits, forecast cubes, and CSV ingestion.

A panel holds N equal-length series observed at timestamps 1..T.  The last
3h observations are carved into three disjoint trailing windows of length
h each; window n is preceded by its training history.  Forecast cubes hold
one learner's quantile predictions for one window as an (N, h, q) tensor.
"""

from __future__ import annotations

import csv
import os
import tempfile
import warnings
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatch,
    InvalidHorizon,
    MissingCell,
    MissingWindow,
    ParseError,
    RaggedSeries,
    SplitTooShort,
)

WINDOWS = (0, 1, 2)

PANEL_HEADER = ["item", "t", "value"]
CUBE_HEADER = ["learner", "window", "item", "step", "tau", "value"]

# Half a unit in the last written decimal place of a tau token.
_TAU_MATCH_TOL = 5e-7


class QuantileCrossingWarning(UserWarning):
    """Predicted quantiles are not monotone in tau somewhere in a cube."""


def format_tau(tau: float) -> str:
    """Render a quantile level with up to 6 decimals, no trailing zeros."""
    text = f"{tau:.6f}".rstrip("0").rstrip(".")
    return text if text else "0"


@dataclass(frozen=True)
class QuantileSpec:
    """Strictly increasing quantile levels, each strictly inside (0, 1)."""

    taus: tuple[float, ...]

    def __post_init__(self):
        taus = tuple(float(t) for t in self.taus)
        object.__setattr__(self, "taus", taus)
        if len(taus) < 1:
            raise ValueError("need at least one quantile level")
        for t in taus:
            if not 0.0 < t < 1.0:
                raise ValueError(f"quantile level {t} outside the open interval (0, 1)")
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise ValueError("quantile levels must be strictly increasing")

    @property
    def q(self) -> int:
        return len(self.taus)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.taus, dtype=float)

    def index_of(self, tau: float) -> int | None:
        """Index of the level matching ``tau`` within write precision, else None."""
        for k, t in enumerate(self.taus):
            if abs(t - tau) < _TAU_MATCH_TOL:
                return k
        return None


@dataclass(frozen=True)
class PanelDataset:
    """N series of shared length T; items keep first-appearance order."""

    items: tuple[str, ...]
    values: np.ndarray  # (N, T)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise DimensionMismatch(f"panel values must be 2-d, got shape {values.shape}")
        if len(self.items) != values.shape[0]:
            raise DimensionMismatch(
                f"{len(self.items)} items but {values.shape[0]} value rows"
            )
        if values.shape[0] < 1:
            raise DimensionMismatch("panel needs at least one item")
        if not np.isfinite(values).all():
            raise ValueError("panel values must be finite")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "items", tuple(self.items))
        object.__setattr__(self, "values", values)

    @property
    def n_items(self) -> int:
        return self.values.shape[0]

    @property
    def n_periods(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class BacktestSplit:
    """Three nested train histories, each followed by a length-h window.

    With T observed timestamps, window n covers the 1-based inclusive range
    (T - (3-n)h, T - (2-n)h] and trains on [1, T - (3-n)h].  Window 2 ends
    at T; the training histories are nested and each window immediately
    follows its history.
    """

    horizon: int
    n_periods: int

    def train_range(self, n: int) -> tuple[int, int]:
        """1-based inclusive timestamp range of training history n."""
        self._check_window(n)
        return 1, self.n_periods - (3 - n) * self.horizon

    def window_range(self, n: int) -> tuple[int, int]:
        """1-based inclusive timestamp range of backtest window n."""
        self._check_window(n)
        end_train = self.n_periods - (3 - n) * self.horizon
        return end_train + 1, end_train + self.horizon

    def train_slice(self, n: int) -> slice:
        lo, hi = self.train_range(n)
        return slice(lo - 1, hi)

    def window_slice(self, n: int) -> slice:
        lo, hi = self.window_range(n)
        return slice(lo - 1, hi)

    @staticmethod
    def _check_window(n):
        if n not in WINDOWS:
            raise ValueError(f"window must be one of {WINDOWS}, got {n}")


def make_backtest_splits(panel: PanelDataset, horizon: int) -> BacktestSplit:
    """Carve three trailing disjoint windows of length ``horizon`` from the panel.

    Requires at least one training timestamp before the earliest window,
    i.e. T >= 3h + 1.
    """
    if not isinstance(horizon, (int, np.integer)) or horizon < 1:
        raise InvalidHorizon(f"horizon must be a positive integer, got {horizon!r}")
    horizon = int(horizon)
    if panel.n_periods < 3 * horizon + 1:
        raise SplitTooShort(
            f"need at least {3 * horizon + 1} timestamps for horizon {horizon}, "
            f"panel has {panel.n_periods}"
        )
    return BacktestSplit(horizon=horizon, n_periods=panel.n_periods)


@dataclass(frozen=True)
class ForecastCube:
    """One learner's (N, h, q) quantile predictions for one backtest window."""

    learner: str
    window: int
    values: np.ndarray  # (N, h, q)

    def __post_init__(self):
        if self.window not in WINDOWS:
            raise ValueError(f"window must be one of {WINDOWS}, got {self.window}")
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 3:
            raise DimensionMismatch(f"cube values must be 3-d, got shape {values.shape}")
        if not np.isfinite(values).all():
            raise ValueError(f"cube for learner {self.learner!r} has non-finite entries")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def has_quantile_crossing(self) -> bool:
        if self.values.shape[2] < 2:
            return False
        return bool((np.diff(self.values, axis=2) < 0).any())


@dataclass(frozen=True)
class ActualsWindow:
    """Observed (N, h) target values for one backtest window."""

    window: int
    values: np.ndarray  # (N, h)

    def __post_init__(self):
        if self.window not in WINDOWS:
            raise ValueError(f"window must be one of {WINDOWS}, got {self.window}")
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise DimensionMismatch(
                f"actuals values must be 2-d, got shape {values.shape}"
            )
        if not np.isfinite(values).all():
            raise ValueError("actuals must be finite")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


def actuals_for_window(panel: PanelDataset, split: BacktestSplit, n: int) -> ActualsWindow:
    """Slice the panel's observed values for backtest window n."""
    return ActualsWindow(window=n, values=panel.values[:, split.window_slice(n)])


def split_actuals(panel: PanelDataset, split: BacktestSplit) -> tuple[ActualsWindow, ...]:
    return tuple(actuals_for_window(panel, split, n) for n in WINDOWS)


def group_cubes(
    cubes, n_items: int, horizon: int, n_quantiles: int
) -> tuple[tuple[str, ...], dict[int, np.ndarray]]:
    """Stack cubes into one (m, N, h, q) array per window.

    Learners keep first-appearance order.  Every learner must supply all
    three windows with matching shapes.

    Returns
    -------
    learners : tuple of str
    stacks : dict mapping window n to an (m, N, h, q) array
    """
    learners: list[str] = []
    by_key: dict[tuple[str, int], ForecastCube] = {}
    for cube in cubes:
        if cube.learner not in learners:
            learners.append(cube.learner)
        key = (cube.learner, cube.window)
        if key in by_key:
            raise DimensionMismatch(
                f"duplicate cube for learner {cube.learner!r}, window {cube.window}"
            )
        expected = (n_items, horizon, n_quantiles)
        if cube.values.shape != expected:
            raise DimensionMismatch(
                f"cube {cube.learner!r}/window {cube.window} has shape "
                f"{cube.values.shape}, expected {expected}"
            )
        by_key[key] = cube
    if not learners:
        raise MissingWindow("no cubes supplied")
    for learner in learners:
        for n in WINDOWS:
            if (learner, n) not in by_key:
                raise MissingWindow(f"learner {learner!r} has no cube for window {n}")
    stacks = {
        n: np.stack([by_key[(learner, n)].values for learner in learners])
        for n in WINDOWS
    }
    return tuple(learners), stacks


# ---------------------------------------------------------------------------
# CSV ingestion / serialization
# ---------------------------------------------------------------------------


@contextmanager
def atomic_open(path):
    """Write to a temp file in the target directory, rename on success."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".csv")
    try:
        with os.fdopen(fd, "w", newline="") as handle:
            yield handle
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _check_header(row, expected, path):
    got = [cell.strip() for cell in row]
    if got != expected:
        raise ParseError(
            f"{path}: expected header {','.join(expected)!r}, got {','.join(got)!r}",
            line=1,
        )


def load_panel(path) -> PanelDataset:
    """Read a long-format panel CSV with header ``item,t,value``.

    Items keep first-appearance order.  Every item must cover timestamps
    1..T with no gaps and no duplicates; differing lengths raise
    RaggedSeries, gaps and duplicates raise ParseError with the offending
    line or cell.
    """
    items: list[str] = []
    seen: dict[str, dict[int, float]] = {}
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file", line=1) from None
        _check_header(header, PANEL_HEADER, path)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", line=lineno)
            item = row[0].strip()
            try:
                t = int(row[1])
            except ValueError:
                raise ParseError(f"bad timestamp {row[1]!r}", line=lineno) from None
            if t < 1:
                raise ParseError(f"timestamp must be >= 1, got {t}", line=lineno)
            try:
                value = float(row[2])
            except ValueError:
                raise ParseError(f"bad value {row[2]!r}", line=lineno) from None
            if item not in seen:
                items.append(item)
                seen[item] = {}
            if t in seen[item]:
                raise ParseError(f"duplicate cell (item={item!r}, t={t})", line=lineno)
            seen[item][t] = value
    if not items:
        raise ParseError(f"{path}: no data rows")

    lengths = {item: len(seen[item]) for item in items}
    n_periods = lengths[items[0]]
    for item in items:
        cells = seen[item]
        expected_t = len(cells)
        for t in range(1, expected_t + 1):
            if t not in cells:
                raise ParseError(f"missing cell (item={item!r}, t={t})")
    if len(set(lengths.values())) > 1:
        detail = ", ".join(f"{item}={lengths[item]}" for item in items)
        raise RaggedSeries(f"series lengths differ: {detail}")

    values = np.array(
        [[seen[item][t] for t in range(1, n_periods + 1)] for item in items],
        dtype=float,
    )
    if not np.isfinite(values).all():
        raise ParseError(f"{path}: non-finite value in panel")
    return PanelDataset(items=tuple(items), values=values)


def write_panel(panel: PanelDataset, path) -> None:
    with atomic_open(path) as handle:
        writer = csv.writer(handle)
        writer.writerow(PANEL_HEADER)
        for i, item in enumerate(panel.items):
            for t in range(panel.n_periods):
                writer.writerow([item, t + 1, repr(float(panel.values[i, t]))])


def load_cubes(path, quantiles: QuantileSpec, items, horizon: int) -> list[ForecastCube]:
    """Read a long-format cube CSV with header ``learner,window,item,step,tau,value``.

    Each (learner, window) group must form a dense (N, h, q) tensor over
    the panel's items, steps 1..h, and the given quantile levels.  Stray
    items, steps, or taus raise DimensionMismatch; missing entries raise
    MissingCell naming the first absent coordinate.
    """
    items = tuple(items)
    item_index = {item: i for i, item in enumerate(items)}
    taus = quantiles.taus
    n_items, q = len(items), quantiles.q

    learners: list[str] = []
    grids: dict[tuple[str, int], np.ndarray] = {}
    filled: dict[tuple[str, int], np.ndarray] = {}

    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file", line=1) from None
        _check_header(header, CUBE_HEADER, path)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 6:
                raise ParseError(f"expected 6 fields, got {len(row)}", line=lineno)
            learner = row[0].strip()
            try:
                window = int(row[1])
            except ValueError:
                raise ParseError(f"bad window {row[1]!r}", line=lineno) from None
            if window not in WINDOWS:
                raise DimensionMismatch(
                    f"line {lineno}: window {window} outside {{0,1,2}}"
                )
            item = row[2].strip()
            if item not in item_index:
                raise DimensionMismatch(f"line {lineno}: unknown item {item!r}")
            try:
                step = int(row[3])
            except ValueError:
                raise ParseError(f"bad step {row[3]!r}", line=lineno) from None
            if not 1 <= step <= horizon:
                raise DimensionMismatch(
                    f"line {lineno}: step {step} outside [1, {horizon}]"
                )
            try:
                tau = float(row[4])
            except ValueError:
                raise ParseError(f"bad tau {row[4]!r}", line=lineno) from None
            k = quantiles.index_of(tau)
            if k is None:
                raise DimensionMismatch(
                    f"line {lineno}: tau {row[4]} not among levels "
                    f"({', '.join(format_tau(t) for t in taus)})"
                )
            try:
                value = float(row[5])
            except ValueError:
                raise ParseError(f"bad value {row[5]!r}", line=lineno) from None

            key = (learner, window)
            if key not in grids:
                if learner not in learners:
                    learners.append(learner)
                grids[key] = np.zeros((n_items, horizon, q))
                filled[key] = np.zeros((n_items, horizon, q), dtype=bool)
            i = item_index[item]
            if filled[key][i, step - 1, k]:
                raise ParseError(
                    f"duplicate cell (learner={learner!r}, window={window}, "
                    f"item={item!r}, step={step}, tau={format_tau(taus[k])})",
                    line=lineno,
                )
            grids[key][i, step - 1, k] = value
            filled[key][i, step - 1, k] = True

    if not grids:
        raise ParseError(f"{path}: no data rows")

    cubes: list[ForecastCube] = []
    for learner in learners:
        for window in sorted(w for (l, w) in grids if l == learner):
            key = (learner, window)
            mask = filled[key]
            if not mask.all():
                i, j, k = np.argwhere(~mask)[0]
                raise MissingCell(
                    f"learner={learner!r}, window={window}, item={items[i]!r}, "
                    f"step={j + 1}, tau={format_tau(taus[k])}"
                )
            cube = ForecastCube(learner=learner, window=window, values=grids[key])
            if cube.has_quantile_crossing():
                warnings.warn(
                    f"learner {learner!r}, window {window}: predicted quantiles "
                    "cross (not monotone in tau)",
                    QuantileCrossingWarning,
                    stacklevel=2,
                )
            cubes.append(cube)
    return cubes


def write_cubes(cubes, items, quantiles: QuantileSpec, path) -> None:
    items = tuple(items)
    with atomic_open(path) as handle:
        writer = csv.writer(handle)
        writer.writerow(CUBE_HEADER)
        for cube in cubes:
            n_items, horizon, q = cube.values.shape
            for i in range(n_items):
                for j in range(horizon):
                    for k in range(q):
                        writer.writerow(
                            [
                                cube.learner,
                                cube.window,
                                items[i],
                                j + 1,
                                format_tau(quantiles.taus[k]),
                                repr(float(cube.values[i, j, k])),
                            ]
                        )
