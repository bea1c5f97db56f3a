"""Implicit solver for 1D nonlocal diffusion with a separable dynamic kernel.

The state lives on unit cells 1..N; everything outside carries a homogeneous
volume constraint (an absorbing collar as wide as the kernel horizon), which
the operator realizes by treating out-of-range neighbors as zero.  The kernel
separates into cell-integrated spatial weights phi_j and a temporal factor
t^p; time stepping is first-order implicit with the temporal factor evaluated
at the new level, except across the singular first step from t = 0 where its
step average is used so that exponents down to (but not including) -1 remain
usable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, solve_banded

from .coarsen import BreakthroughCurve
from .errors import ConfigurationError, SolverError


@dataclass(frozen=True)
class DynamicKernel:
    """Separable nonlocal kernel: spatial weights phi times t**p.

    ``phi`` holds the 2*horizon_cells + 1 cell-integrated weights for offsets
    -horizon_cells..horizon_cells; the j = 0 entry never enters the operator
    (a cell exchanges nothing with itself) but is kept so that offsets and
    weights stay aligned.
    """

    phi: np.ndarray
    p: float
    horizon_cells: int
    cell_width: float

    def __post_init__(self) -> None:
        phi = np.atleast_1d(np.asarray(self.phi, dtype=float))
        object.__setattr__(self, "phi", phi)
        if self.horizon_cells < 1:
            raise ConfigurationError("kernel horizon must span at least one cell")
        if phi.shape != (2 * self.horizon_cells + 1,):
            raise ConfigurationError(
                f"phi must have {2 * self.horizon_cells + 1} entries for "
                f"horizon {self.horizon_cells}")
        if np.any(phi < 0):
            raise ConfigurationError("kernel weights must be nonnegative")
        if not self.cell_width > 0:
            raise ConfigurationError("cell width must be positive")

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(-self.horizon_cells, self.horizon_cells + 1)

    @property
    def horizon(self) -> float:
        return self.horizon_cells * self.cell_width

    def second_moment_rate(self) -> float:
        """Instantaneous MSD production per unit theta: sum phi_j (j l1)^2."""
        return float(np.sum(self.phi * (self.offsets * self.cell_width) ** 2))

    def drift_rate(self) -> float:
        """Center-of-mass velocity per unit theta: -l1 sum j phi_j."""
        return float(-self.cell_width * np.sum(self.offsets * self.phi))

    def to_json(self, path) -> None:
        record = {"phi": [float(v) for v in self.phi], "p": float(self.p),
                  "N_delta": int(self.horizon_cells), "l1": float(self.cell_width)}
        with open(path, "w") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "DynamicKernel":
        with open(Path(path)) as fh:
            record = json.load(fh)
        return cls(phi=np.asarray(record["phi"], dtype=float), p=float(record["p"]),
                   horizon_cells=int(record["N_delta"]), cell_width=float(record["l1"]))


@dataclass(frozen=True)
class NonlocalSolution:
    """Cell values over time for one solve; the exterior collar is zero."""

    values: np.ndarray          # (num_cells, n_times)
    times: np.ndarray
    initial_condition: np.ndarray
    cell_width: float

    @property
    def num_cells(self) -> int:
        return self.values.shape[0]

    @property
    def cell_centers(self) -> np.ndarray:
        return (np.arange(self.num_cells) + 0.5) * self.cell_width


def first_step_theta(p: float, dt: float) -> float:
    """Step average of t**p over (0, dt); finite for p > -1."""
    if p <= -1.0:
        raise ConfigurationError(
            f"temporal exponent p={p} is not integrable across the first step")
    return dt ** p / (p + 1.0)


def assemble_operator(kernel: DynamicKernel, num_cells: int) -> np.ndarray:
    """Banded (diagonal-ordered) form of the spatial exchange operator.

    Row u - k of the returned (2*Nd+1, N) array holds the offset-k diagonal,
    u = Nd: constant phi_k off the diagonal and -sum(phi_j, j != 0) on it, so
    interior row sums telescope to zero and boundary rows leak mass into the
    collar.
    """
    nd = kernel.horizon_cells
    if num_cells <= 2 * nd:
        raise ConfigurationError(
            f"need more than {2 * nd} cells for a horizon of {nd}")
    band = np.zeros((2 * nd + 1, num_cells))
    phi = kernel.phi
    loss = float(np.sum(phi)) - float(phi[nd])
    for k in range(-nd, nd + 1):
        if k == 0:
            band[nd, :] = -loss
        else:
            row = nd - k
            if k > 0:
                band[row, k:] = phi[nd + k]
            else:
                band[row, :k] = phi[nd + k]
    return band


def apply_operator(kernel: DynamicKernel, values: np.ndarray) -> np.ndarray:
    """Apply the exchange operator to one state (or a stack of states).

    ``values`` may be (N,) or (N, m); out-of-range neighbors are zero.
    """
    nd = kernel.horizon_cells
    phi = kernel.phi
    c = np.asarray(values, dtype=float)
    out = (-(np.sum(phi) - phi[nd])) * c
    for k in range(-nd, nd + 1):
        if k == 0 or phi[nd + k] == 0.0:
            continue
        shifted = np.zeros_like(c)
        if k > 0:
            shifted[:-k] = c[k:]
        else:
            shifted[-k:] = c[:k]
        out += phi[nd + k] * shifted
    return out


def _implicit_solve(band_a: np.ndarray, nd: int, theta: float, dt: float,
                    rhs: np.ndarray) -> np.ndarray:
    system = -dt * theta * band_a
    system[nd, :] += 1.0
    try:
        return solve_banded((nd, nd), system, rhs)
    except LinAlgError as exc:     # not reachable for nonnegative kernels
        raise SolverError(f"implicit step failed: {exc}") from exc


def step_implicit(c_n: np.ndarray, kernel: DynamicKernel, t_next: float,
                  dt: float, *, theta: float | None = None) -> np.ndarray:
    """One backward step (I - dt*theta*A) c_{n+1} = c_n.

    ``theta`` defaults to t_next**p; the override exists for the averaged
    coefficient used across the singular first step.
    """
    if dt <= 0:
        raise ConfigurationError("time step must be positive")
    c_n = np.asarray(c_n, dtype=float)
    if theta is None:
        if t_next <= 0 and kernel.p < 0:
            raise ConfigurationError("t**p undefined at t <= 0 for negative p")
        theta = float(t_next) ** kernel.p
    band = assemble_operator(kernel, c_n.shape[0])
    return _implicit_solve(band, kernel.horizon_cells, float(theta), dt, c_n)


def solve(kernel: DynamicKernel, initial: np.ndarray, times: np.ndarray) -> NonlocalSolution:
    """March the implicit scheme over a uniform grid starting at t = 0."""
    c0 = np.asarray(initial, dtype=float)
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) < 2:
        raise ConfigurationError("need a time grid with at least two instants")
    if times[0] != 0.0:
        raise ConfigurationError("the time grid must start at t = 0")
    dt = times[1] - times[0]
    if dt <= 0 or not np.allclose(np.diff(times), dt, rtol=1e-9, atol=0):
        raise ConfigurationError("the time grid must be uniform and increasing")
    if kernel.p <= -1.0:
        raise ConfigurationError(
            f"temporal exponent p={kernel.p} is not integrable across the first step")
    nd = kernel.horizon_cells
    n = c0.shape[0]
    band = assemble_operator(kernel, n)
    values = np.empty((n, len(times)))
    values[:, 0] = c0
    c = c0.copy()
    for j in range(1, len(times)):
        if j == 1:
            theta = first_step_theta(kernel.p, dt)
        else:
            theta = float(times[j]) ** kernel.p
        c = _implicit_solve(band.copy(), nd, theta, dt, c)
        values[:, j] = c
    return NonlocalSolution(values=values, times=times.copy(),
                            initial_condition=c0.copy(),
                            cell_width=kernel.cell_width)


def unit_spike(num_cells: int, injection_cell: int) -> np.ndarray:
    """Initial profile with unit concentration in one (1-based) cell."""
    if not 1 <= injection_cell <= num_cells:
        raise ConfigurationError(
            f"injection cell {injection_cell} outside 1..{num_cells}")
    c0 = np.zeros(num_cells)
    c0[injection_cell - 1] = 1.0
    return c0


def model_btc(solution: NonlocalSolution, locations) -> list[BreakthroughCurve]:
    """Time traces of the cells owning each location, excluding t = 0."""
    length = solution.num_cells * solution.cell_width
    keep = solution.times > 0.0
    curves = []
    for x in np.atleast_1d(np.asarray(locations, dtype=float)):
        if not 0.0 < x < length:
            raise ConfigurationError(
                f"location {x} outside the open domain (0, {length})")
        cell = min(int(x / solution.cell_width), solution.num_cells - 1)
        curves.append(BreakthroughCurve(
            location=float(x),
            times=solution.times[keep].copy(),
            values=solution.values[cell, keep].copy(),
        ))
    return curves


@dataclass(frozen=True)
class ModelMoments:
    """Mass-weighted center and spread of a solve, per time level."""

    times: np.ndarray
    mass: np.ndarray
    mean_x: np.ndarray
    msd: np.ndarray


def solution_moments(solution: NonlocalSolution) -> ModelMoments:
    """Mass, mean position and variance of the cell profile over time."""
    x = solution.cell_centers[:, None]
    mass = solution.values.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_x = (solution.values * x).sum(axis=0) / mass
        spread = ((x - mean_x[None, :]) ** 2 * solution.values).sum(axis=0) / mass
    mean_x[mass == 0] = np.nan
    spread[mass == 0] = np.nan
    return ModelMoments(times=solution.times.copy(), mass=mass,
                        mean_x=mean_x, msd=spread)
