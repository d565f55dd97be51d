from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from sdeid import config
from sdeid.errors import InvalidArgumentError


def _frozen_array(values, *, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


class Measure(str, Enum):
    PHYSICAL = "physical"
    MARTINGALE = "martingale"


@dataclass(frozen=True, eq=False)
class TimeGrid:
    times: np.ndarray
    uniform: bool = False

    def __post_init__(self) -> None:
        times = _frozen_array(self.times)
        if times.ndim != 1 or times.size < 2:
            raise InvalidArgumentError("A time grid needs at least two instants")
        if not np.all(np.isfinite(times)):
            raise InvalidArgumentError("Time grid instants must be finite")
        steps = np.diff(times)
        if np.any(steps <= 0.0):
            raise InvalidArgumentError("Time grid instants must be strictly increasing")
        if self.uniform:
            expected = (times[-1] - times[0]) / steps.size
            span = times[-1] - times[0]
            if np.max(np.abs(steps - expected)) > config.UNIFORM_GRID_RTOL * span:
                raise InvalidArgumentError("Grid flagged uniform but its steps differ")
        object.__setattr__(self, "times", times)

    @classmethod
    def from_times(cls, times) -> "TimeGrid":
        arr = np.asarray(times, dtype=np.float64)
        steps = np.diff(arr)
        uniform = bool(
            steps.size > 0
            and np.all(steps > 0.0)
            and np.max(np.abs(steps - steps.mean())) <= config.UNIFORM_GRID_RTOL * (arr[-1] - arr[0])
        )
        return cls(arr, uniform=uniform)

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def n_steps(self) -> int:
        return int(self.times.size - 1)

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.times)

    def __len__(self) -> int:
        return int(self.times.size)


@dataclass(frozen=True, eq=False)
class Trajectory:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self) -> None:
        values = _frozen_array(self.values)
        if values.shape != self.grid.times.shape:
            raise InvalidArgumentError(
                f"Trajectory has {values.size} values for {len(self.grid)} grid instants"
            )
        if not np.all(np.isfinite(values)):
            raise InvalidArgumentError("Trajectory values must be finite")
        object.__setattr__(self, "values", values)

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values)


@dataclass(frozen=True, eq=False)
class BrownianPath:
    grid: TimeGrid
    increments: np.ndarray
    measure: Measure = Measure.PHYSICAL
    origin: float = 0.0

    def __post_init__(self) -> None:
        increments = _frozen_array(self.increments)
        if increments.shape != (self.grid.n_steps,):
            raise InvalidArgumentError(
                f"Expected {self.grid.n_steps} increments, got {increments.size}"
            )
        object.__setattr__(self, "increments", increments)
        object.__setattr__(self, "measure", Measure(self.measure))

    @property
    def values(self) -> np.ndarray:
        path = np.empty(self.grid.n_steps + 1, dtype=np.float64)
        path[0] = self.origin
        np.cumsum(self.increments, out=path[1:])
        path[1:] += self.origin
        return path


@dataclass(frozen=True, eq=False)
class SubPartition:
    """Window boundaries j_0 = 0 < j_1 < ... < j_M = N into a fine grid."""

    fine_grid: TimeGrid
    window_indices: np.ndarray

    def __post_init__(self) -> None:
        indices = _frozen_array(self.window_indices, dtype=np.int64)
        n_steps = self.fine_grid.n_steps
        if indices.ndim != 1 or indices.size < 2:
            raise InvalidArgumentError("A sub-partition needs at least one window")
        if indices[0] != 0 or indices[-1] != n_steps:
            raise InvalidArgumentError("Sub-partition must start at 0 and end at N")
        if np.any(np.diff(indices) <= 0):
            raise InvalidArgumentError("Sub-partition indices must be strictly increasing")
        if indices.size - 1 > n_steps / 2:
            raise InvalidArgumentError("Sub-partition must satisfy M <= N/2")
        object.__setattr__(self, "window_indices", indices)

    @classmethod
    def from_indices(cls, fine_grid: TimeGrid, indices) -> "SubPartition":
        return cls(fine_grid, np.asarray(indices, dtype=np.int64))

    @property
    def n_windows(self) -> int:
        return int(self.window_indices.size - 1)

    @property
    def window_lengths(self) -> np.ndarray:
        times = self.fine_grid.times
        return times[self.window_indices[1:]] - times[self.window_indices[:-1]]

    @property
    def steps_per_window(self) -> np.ndarray:
        return np.diff(self.window_indices)

    @property
    def coarse_grid(self) -> TimeGrid:
        uniform = self.fine_grid.uniform and np.unique(self.steps_per_window).size == 1
        return TimeGrid(self.fine_grid.times[self.window_indices], uniform=uniform)

    def window(self, k: int) -> tuple[int, int]:
        return int(self.window_indices[k]), int(self.window_indices[k + 1])

    def windows(self) -> list[tuple[int, int]]:
        return [self.window(k) for k in range(self.n_windows)]


@dataclass(frozen=True, eq=False)
class DiffusionEstimate:
    sub: SubPartition
    sigma_values: np.ndarray
    qv_windows: np.ndarray
    anchors: np.ndarray
    zero_windows: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        for name in ("sigma_values", "qv_windows", "anchors"):
            object.__setattr__(self, name, _frozen_array(getattr(self, name)))
        if self.sigma_values.shape != (self.sub.n_windows,):
            raise InvalidArgumentError("One sigma value per window is required")
        if np.any(self.sigma_values < 0.0):
            raise InvalidArgumentError("Sigma estimates must be non-negative")

    @property
    def anchor_times(self) -> np.ndarray:
        return self.sub.fine_grid.times[self.sub.window_indices[:-1]]


@dataclass(frozen=True, eq=False)
class SignatureFeatures:
    """Iterated Stratonovich integrals of (t, B) started at the window anchor s."""

    times: np.ndarray
    i1: np.ndarray
    ib: np.ndarray
    i12: np.ndarray
    i21: np.ndarray
    i22: np.ndarray
    i222: np.ndarray

    COLUMNS = ("i1", "ib", "i12", "i21", "i22", "i222")

    def matrix(self, *, drop_i222: bool = False) -> np.ndarray:
        names = self.COLUMNS[:-1] if drop_i222 else self.COLUMNS
        return np.column_stack([getattr(self, name)[1:] for name in names])

    def at_end(self) -> dict[str, float]:
        return {name: float(getattr(self, name)[-1]) for name in self.COLUMNS}


PSI_NAMES = ("psi1", "psi2", "psi12", "psi21", "psi22", "psi222")


@dataclass(frozen=True)
class PsiEstimate:
    window: int
    psi1: float
    psi2: float
    psi12: float
    psi21: float
    psi22: float
    psi222: float
    residual_rms: float
    condition_number: float
    ill_conditioned: bool = False

    def coefficients(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in PSI_NAMES], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class DriftVector:
    values: np.ndarray
    mu0: float

    def __post_init__(self) -> None:
        values = _frozen_array(self.values)
        if values.size == 0 or values[0] != self.mu0:
            raise InvalidArgumentError("Drift vector must start at mu0")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class StageTiming:
    stage: str
    seconds: float
    cached: bool = False
    extra: dict = field(default_factory=dict)
