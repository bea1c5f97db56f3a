"""Upscaling of fine particle densities to one coarse value per unit cell.

The coarse profile at cell i is a forward-window average over ``m`` unit
cells starting at i, normalized by the window volume; near the right edge the
window is clipped to the cells that exist and the normalization shrinks with
it, so constants are preserved everywhere.  Breakthrough curves are time
traces of single coarse cells, and the moving-frame transform re-samples the
profile at x + v*t so that training data can be treated as advection-free.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .darcy import FlowField, cell_center_velocity
from .errors import ConfigurationError, NumericalError
from .medium import MediumSpec
from .tracking import DensityHistory


@dataclass(frozen=True)
class CoarseDensity:
    """Window-averaged 1D density, one value per unit cell per snapshot."""

    values: np.ndarray          # (num_cells, n_snapshots)
    smoothing_cells: int
    snapshot_times: np.ndarray
    cell_width: float

    @property
    def num_cells(self) -> int:
        return self.values.shape[0]

    @property
    def cell_centers(self) -> np.ndarray:
        return (np.arange(self.num_cells) + 0.5) * self.cell_width


@dataclass(frozen=True)
class BreakthroughCurve:
    """Concentration history at a fixed location (its owning coarse cell)."""

    location: float
    times: np.ndarray
    values: np.ndarray


@dataclass(frozen=True)
class EffectiveAdvection:
    """Homogenized advection derived from the unit-cell flow.

    v_bar_cell is the unit-cell speed at unit head drop; kappa_bar_x the
    effective conductivity.  v_bar keeps the verbatim head-over-conductivity
    closure for reference, while v_bar_rescaled restores the dimensionally
    consistent scaling of the cell speed by the actual per-cell head drop;
    pipelines that need the physical drift should prefer the measured
    ensemble slope (see ``linear_slope`` on the mean displacement).
    """

    v_bar_cell: float
    kappa_bar_x: float
    v_bar: float
    v_bar_rescaled: float


def upscale(fine: DensityHistory, spec: MediumSpec, m: int) -> CoarseDensity:
    """Average the fine density over forward windows of ``m`` unit cells.

    The value at cell i is the fine mass in cells i..i+m-1 divided by the
    window volume m*l1*l2; windows extending past the last cell are clipped
    and the volume adjusted accordingly.
    """
    if m < 1:
        raise ConfigurationError("smoothing window must cover at least one cell")
    n_cells = spec.num_cells
    if m > n_cells:
        raise ConfigurationError(
            f"smoothing window m={m} exceeds the {n_cells}-cell domain")
    n_snap, nx, ny = fine.values.shape
    if nx % n_cells:
        raise ConfigurationError("fine grid does not align with unit cells")
    if abs(nx * fine.dx - spec.domain_length) > 1e-9 * spec.domain_length:
        raise ConfigurationError("fine density does not cover the medium domain")
    cols = nx // n_cells
    # mass per unit cell, then clipped forward-window sums via a cumulative sum
    cell_mass = fine.values.reshape(n_snap, n_cells, cols, ny).sum(axis=(2, 3))
    cell_mass *= fine.dx * fine.dy
    cum = np.concatenate(
        [np.zeros((n_snap, 1)), np.cumsum(cell_mass, axis=1)], axis=1)
    idx = np.arange(n_cells)
    win = np.minimum(m, n_cells - idx)
    window_mass = cum[:, idx + win] - cum[:, idx]
    volume = win * spec.cell_width * spec.layer_height
    values = (window_mass / volume).T
    return CoarseDensity(values=values, smoothing_cells=m,
                         snapshot_times=fine.times.copy(),
                         cell_width=spec.cell_width)


def coarse_from_ensemble(ensemble, spec: MediumSpec, m: int) -> CoarseDensity:
    """Coarse density straight from particle positions, skipping the 2D grid.

    Equivalent to ``upscale(fine_density(...))`` (binning per unit cell
    commutes with summing the fine histogram over each cell) but needs only
    O(num_cells) memory per snapshot, which matters on large runs.
    """
    if m < 1:
        raise ConfigurationError("smoothing window must cover at least one cell")
    n_cells = spec.num_cells
    if m > n_cells:
        raise ConfigurationError(
            f"smoothing window m={m} exceeds the {n_cells}-cell domain")
    if abs(ensemble.length_x - spec.domain_length) > 1e-9 * spec.domain_length:
        raise ConfigurationError("ensemble does not cover the medium domain")
    n_snap = len(ensemble.snapshot_times)
    n_particles = ensemble.num_particles
    cell_mass = np.zeros((n_snap, n_cells))
    for j, t in enumerate(ensemble.snapshot_times):
        inside = ~(ensemble.exit_time <= t)
        cells = np.clip(
            (ensemble.positions[j, inside, 0] / spec.cell_width).astype(int),
            0, n_cells - 1)
        cell_mass[j] = np.bincount(cells, minlength=n_cells) / n_particles
    cum = np.concatenate(
        [np.zeros((n_snap, 1)), np.cumsum(cell_mass, axis=1)], axis=1)
    idx = np.arange(n_cells)
    win = np.minimum(m, n_cells - idx)
    window_mass = cum[:, idx + win] - cum[:, idx]
    volume = win * spec.cell_width * spec.layer_height
    values = (window_mass / volume).T
    return CoarseDensity(values=values, smoothing_cells=m,
                         snapshot_times=ensemble.snapshot_times.copy(),
                         cell_width=spec.cell_width)


def extract_btc(coarse: CoarseDensity, locations) -> list[BreakthroughCurve]:
    """Time trace of the coarse cell owning each location.

    The injection instant t = 0 carries no breakthrough information and is
    dropped, so a run recorded at 0, dt, ..., T yields T/dt samples.
    """
    length = coarse.num_cells * coarse.cell_width
    keep = coarse.snapshot_times > 0.0
    curves = []
    for x in np.atleast_1d(np.asarray(locations, dtype=float)):
        if not 0.0 < x < length:
            raise ConfigurationError(f"location {x} outside the open domain (0, {length})")
        cell = min(int(x / coarse.cell_width), coarse.num_cells - 1)
        curves.append(BreakthroughCurve(
            location=float(x),
            times=coarse.snapshot_times[keep].copy(),
            values=coarse.values[cell, keep].copy(),
        ))
    return curves


def effective_advection(spec: MediumSpec, cell_flow: FlowField) -> EffectiveAdvection:
    """Homogenize the unit-cell flow into a single advection speed.

    The cell speed is the harmonic x-average, weighted by column flux, of the
    per-column arithmetic average of vx weighted by the local speed; the
    effective conductivity follows as speed times cell width.
    """
    vx, vy = cell_center_velocity(cell_flow)
    speed = np.hypot(vx, vy)
    col_weight = speed.sum(axis=1)                 # ~ integral of |v| dy
    col_flux = (vx * speed).sum(axis=1)            # ~ integral of vx |v| dy
    if np.any(col_weight <= 0.0) or np.any(col_flux <= 0.0):
        raise NumericalError("degenerate unit-cell flow: a column carries no flux")
    col_mean_vx = col_flux / col_weight
    v_bar_cell = float(col_weight.sum() / (col_weight / col_mean_vx).sum())
    kappa_bar_x = v_bar_cell * spec.cell_width
    v_bar = spec.head_left / (spec.num_cells * kappa_bar_x)
    v_bar_rescaled = v_bar_cell * spec.head_left / spec.num_cells
    return EffectiveAdvection(v_bar_cell=v_bar_cell, kappa_bar_x=kappa_bar_x,
                              v_bar=v_bar, v_bar_rescaled=v_bar_rescaled)


def shift_frame(coarse: CoarseDensity, v_bar: float) -> CoarseDensity:
    """Re-sample the coarse profile in the frame moving at ``v_bar``.

    The shifted profile at coordinate x is the original at x + v_bar*t,
    linearly interpolated between cell centers and zero outside them, so a
    rigidly advected profile becomes stationary.
    """
    if v_bar < 0:
        raise ConfigurationError("frame speed must be nonnegative")
    if v_bar == 0.0:
        return CoarseDensity(values=coarse.values.copy(),
                             smoothing_cells=coarse.smoothing_cells,
                             snapshot_times=coarse.snapshot_times.copy(),
                             cell_width=coarse.cell_width)
    centers = coarse.cell_centers
    shifted = np.empty_like(coarse.values)
    for j, t in enumerate(coarse.snapshot_times):
        shifted[:, j] = np.interp(centers + v_bar * t, centers,
                                  coarse.values[:, j], left=0.0, right=0.0)
    return CoarseDensity(values=shifted, smoothing_cells=coarse.smoothing_cells,
                         snapshot_times=coarse.snapshot_times.copy(),
                         cell_width=coarse.cell_width)


def save_btc_dataset(path, curves, *, metadata: dict) -> None:
    """Write curves as (location, t, value) CSV plus a JSON sidecar.

    Curves are ordered by location so files are reproducible regardless of
    how the caller assembled the list; the sidecar carries the provenance
    (medium, smoothing, frame speed, seed, scaling) needed to regenerate or
    interpret the data.
    """
    path = Path(path)
    curves = sorted(curves, key=lambda c: c.location)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["location", "t", "value"])
        for curve in curves:
            for t, v in zip(curve.times, curve.values):
                writer.writerow([repr(float(curve.location)), repr(float(t)),
                                 repr(float(v))])
    sidecar = path.with_suffix(path.suffix + ".json")
    with open(sidecar, "w") as fh:
        json.dump(metadata, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_btc_dataset(path) -> tuple[list[BreakthroughCurve], dict]:
    """Read a dataset written by :func:`save_btc_dataset`."""
    path = Path(path)
    by_location: dict[float, list[tuple[float, float]]] = {}
    with open(path, newline="") as fh:
        rows = (line for line in fh if not line.startswith("#"))
        for row in csv.DictReader(rows):
            by_location.setdefault(float(row["location"]), []).append(
                (float(row["t"]), float(row["value"])))
    curves = []
    for loc in sorted(by_location):
        samples = sorted(by_location[loc])
        curves.append(BreakthroughCurve(
            location=loc,
            times=np.array([s[0] for s in samples]),
            values=np.array([s[1] for s in samples]),
        ))
    sidecar = path.with_suffix(path.suffix + ".json")
    if not sidecar.exists():
        raise ConfigurationError(f"missing dataset sidecar {sidecar}")
    with open(sidecar) as fh:
        metadata = json.load(fh)
    return curves, metadata
