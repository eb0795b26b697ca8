"""Exact finite-dimensional quantum mechanics on a position grid.

Symmetric (Weyl) ordered quantization with Fourier spectral momentum,
eigendecomposition, discrete inner products, and the normalization bridge
between half-density kernels and discrete-spectrum overlaps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CountMismatch, GridMismatch, OpenFiber, UnsupportedOrdering
from .geometry import FiberCurve, Observable

HERMITICITY_TOL = 1e-12


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic position grid on [-half_width, half_width)."""

    half_width: float = 10.0
    points: int = 1024

    @property
    def dq(self) -> float:
        return 2.0 * self.half_width / self.points

    @property
    def qs(self) -> np.ndarray:
        return -self.half_width + self.dq * np.arange(self.points)

    @property
    def wavenumbers(self) -> np.ndarray:
        return 2.0 * np.pi * np.fft.fftfreq(self.points, d=self.dq)


def momentum_matrix(grid: GridSpec, h: float, power: int = 1) -> np.ndarray:
    """Dense matrix of (h k)^power acting through the Fourier basis."""
    diag = (h * grid.wavenumbers) ** power
    eye = np.eye(grid.points, dtype=complex)
    return np.fft.ifft(diag[:, None] * np.fft.fft(eye, axis=0), axis=0)


def weyl_monomial_matrix(
    coeff_q: np.ndarray, p_power: int, grid: GridSpec, h: float,
    p_mat: np.ndarray | None = None,
) -> np.ndarray:
    """Weyl-ordered operator for c(q) p^b, b <= 2.

    b = 1 uses (CP + PC)/2 and b = 2 the fully symmetrized
    (C P^2 + 2 P C P + P^2 C)/4, which is the exact Weyl ordering at
    quadratic momentum degree; constant c(q) collapses to c * P^b.
    """
    n = grid.points
    if p_power == 0:
        return np.diag(coeff_q.astype(complex))
    if p_power > 2:
        raise UnsupportedOrdering(
            f"momentum degree {p_power} > 2 is not representable on the grid"
        )
    if np.ptp(coeff_q) < 1e-15 * max(1.0, float(np.max(np.abs(coeff_q)))):
        return complex(coeff_q[0]) * momentum_matrix(grid, h, p_power)
    p1 = momentum_matrix(grid, h, 1) if p_mat is None else p_mat
    c = coeff_q.astype(complex)
    if p_power == 1:
        return 0.5 * (c[:, None] * p1 + p1 * c[None, :])
    p2 = p1 @ p1
    pcp = p1 @ (c[:, None] * p1)
    return 0.25 * (c[:, None] * p2 + 2.0 * pcp + p2 * c[None, :])


@dataclass(frozen=True)
class GridQuantization:
    grid: GridSpec
    h: float
    operator: np.ndarray
    observable: Observable

    @property
    def hermiticity_defect(self) -> float:
        return float(np.max(np.abs(self.operator - self.operator.conj().T)))


def build_weyl_operator(
    h_obs: Observable, grid: GridSpec, h: float
) -> GridQuantization:
    """Quantize an observable of momentum degree <= 2 on the grid."""
    decomp = h_obs.momentum_decomposition()
    if any(b > 2 for b in decomp):
        raise UnsupportedOrdering(
            f"observable {h_obs} has momentum degree "
            f"{max(decomp)} > 2"
        )
    qs = grid.qs
    op = np.zeros((grid.points, grid.points), dtype=complex)
    p1 = momentum_matrix(grid, h, 1)
    for b, cfn in sorted(decomp.items()):
        cq = np.asarray(cfn(qs), dtype=float)
        op += weyl_monomial_matrix(cq, b, grid, h, p_mat=p1)
    return GridQuantization(grid=grid, h=h, operator=op, observable=h_obs)


@dataclass(frozen=True)
class StateVector:
    """A grid wavefunction normalized in the Delta-q weighted discrete L2."""

    values: np.ndarray
    grid: GridSpec

    def at(self, q: float) -> complex:
        """Value at a grid point (q must sit on the grid)."""
        idx = int(round((q + self.grid.half_width) / self.grid.dq))
        if not np.isclose(
            self.grid.qs[idx % self.grid.points], q, rtol=0, atol=1e-9
        ):
            raise ValueError(f"q = {q} is not a grid point")
        return complex(self.values[idx % self.grid.points])


@dataclass(frozen=True)
class Eigensystem:
    eigenvalues: np.ndarray
    states: np.ndarray  # columns, Delta-q normalized
    grid: GridSpec
    h: float
    operator_norm: float

    @property
    def count(self) -> int:
        return len(self.eigenvalues)

    def state(self, n: int) -> StateVector:
        return StateVector(values=self.states[:, n], grid=self.grid)

    def residual(self, operator: np.ndarray, n: int) -> float:
        v = self.states[:, n]
        return float(np.linalg.norm(operator @ v - self.eigenvalues[n] * v))

    def export(self, directory) -> None:
        """CSV eigenvalues, raw row-major float64 eigenvectors, JSON sidecar."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        np.savetxt(d / "eigenvalues.csv", self.eigenvalues, delimiter=",",
                   header="eigenvalue", comments="")
        np.real(self.states.T).astype(np.float64).tofile(d / "eigenvectors.f64")
        sidecar = {
            "half_width": self.grid.half_width,
            "points": self.grid.points,
            "h": self.h,
            "count": self.count,
            "layout": "row-major, one state per row, real part",
        }
        (d / "grid.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def eigensystem(
    gq: GridQuantization, retain_below: float | None = None
) -> Eigensystem:
    """Eigendecomposition, keeping states below the box-contamination cutoff.

    The default cutoff is H(half_width, 0)/2; pass ``retain_below`` to
    override (e.g. on a natural compact domain there is no contamination).
    """
    evals, vecs = np.linalg.eigh(gq.operator)
    if retain_below is None:
        retain_below = float(
            gq.observable.value(gq.grid.half_width, 0.0)
        ) / 2.0
    keep = evals < retain_below
    if not np.any(keep):
        keep = np.zeros_like(evals, dtype=bool)
        keep[: min(8, len(evals))] = True
    evals = evals[keep]
    vecs = vecs[:, keep] / np.sqrt(gq.grid.dq)
    return Eigensystem(
        eigenvalues=evals,
        states=vecs,
        grid=gq.grid,
        h=gq.h,
        operator_norm=float(np.max(np.abs(gq.operator))),
    )


def exact_overlap(u: StateVector, v: StateVector) -> complex:
    """Discrete inner product, linear in u and conjugate-linear in v."""
    if u.grid != v.grid:
        raise GridMismatch("states live on different grids")
    return complex(np.sum(u.values * np.conj(v.values)) * u.grid.dq)


def bridge_factor(fiber: FiberCurve | None, h: float) -> float:
    """Half-density to discrete-state normalization factor for one system.

    Closed fibers contribute sqrt(level spacing) with spacing 2 pi h / T(b);
    ``None`` or an open linear fiber (plane-wave case, continuum-normalized
    by closed form) contributes 1.
    """
    if fiber is None:
        return 1.0
    if fiber.closed:
        if fiber.period is None or fiber.period <= 0:
            raise OpenFiber("closed fiber without a flow period")
        return float(np.sqrt(2.0 * np.pi * h / fiber.period))
    if fiber.observable.is_linear:
        return 1.0
    raise OpenFiber(
        "open non-linear fiber has no discrete normalization; only the "
        "plane-wave closed forms are handled"
    )


def half_density_bridge(
    amplitude_value: complex,
    fiber1: FiberCurve | None,
    fiber2: FiberCurve | None,
    h: float,
) -> complex:
    """Convert a half-density overlap into a discrete-spectrum overlap."""
    return amplitude_value * bridge_factor(fiber1, h) * bridge_factor(fiber2, h)


@dataclass(frozen=True)
class LevelPairing:
    indices: list[int]
    eigenvalues: list[float]
    levels: list[float]
    deviations: list[float]

    @property
    def max_deviation(self) -> float:
        return max(self.deviations) if self.deviations else 0.0


def match_levels(es: Eigensystem, bs_levels) -> LevelPairing:
    """Pair the n-th eigenvalue with the n-th quantization level."""
    if not bs_levels:
        return LevelPairing([], [], [], [])
    max_n = max(level.n for level in bs_levels)
    if max_n >= es.count:
        raise CountMismatch(
            f"need eigenvalue index {max_n} but only {es.count} retained states"
        )
    idx, ev, lv, dev = [], [], [], []
    for level in bs_levels:
        e = float(es.eigenvalues[level.n])
        idx.append(level.n)
        ev.append(e)
        lv.append(level.b)
        dev.append(abs(e - level.b))
    return LevelPairing(idx, ev, lv, dev)
