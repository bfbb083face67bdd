"""Classical time evolution of the nonlinear Schroedinger field.

Two deliberately distinct integrators:

* ``split_step_evolve`` -- Strang-split spectral integrator for the
  continuum equation i df/dt = -f'' + 2c|f|^2 f on the periodic grid.
  Both substeps are pointwise phase rotations, so the particle number
  dx*sum|f|^2 is conserved to rounding; energy drifts at O(dt^2).

* ``lattice_classical_evolve`` -- classic RK4 for the lattice ODE

      i da_j/dt = sum_k h_jk a_k + (2c/dx) |a_j|^2 a_j

  with h the same three-point hopping matrix the quantum Hamiltonian
  builder uses.  This matched discretization is what makes the c = 0
  coherent-state overlap stay exactly 1; use it for correspondence runs
  and the split-step integrator for physics-quality trajectories.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .grid_field import NONLINEAR_FACTOR, ClassicalField, FieldError, Grid, _fmt
from .quantum_lattice import LatticeModel, hopping_matrix


class EvolveError(RuntimeError):
    """Evolution aborted: bad configuration or drift beyond tolerance."""


@dataclass
class EvolveConfig:
    """Time-stepping controls shared by both classical evolvers.

    The step count is n = round(t_final/dt) and the actual step is
    t_final/n, so trajectories always land exactly on t_final with
    uniform steps.  ``snapshot_stride`` > 0 stores every stride-th step
    in the trajectory (t=0 and t_final are always kept).
    """

    dt: float = 1e-3
    t_final: float = 1.0
    scheme: str = "split_step_strang"
    max_norm_drift: float = 1e-10
    max_energy_drift: float = 1e-3
    snapshot_stride: int = 0

    def __post_init__(self):
        if self.scheme not in ("split_step_strang", "rk4_lattice"):
            raise EvolveError(f"unknown scheme {self.scheme!r}")
        if not (self.dt > 0) or not math.isfinite(self.dt):
            raise EvolveError(f"dt must be positive, got {self.dt}")
        if self.t_final < 0 or not math.isfinite(self.t_final):
            raise EvolveError(f"t_final must be >= 0, got {self.t_final}")
        if self.t_final > 0 and self.dt > self.t_final * (1 + 1e-12):
            raise EvolveError(f"dt={self.dt} exceeds t_final={self.t_final}")
        if self.snapshot_stride < 0:
            raise EvolveError("snapshot_stride must be >= 0")

    def steps(self) -> tuple[int, float]:
        if self.t_final == 0:
            return 0, self.dt
        n = max(1, int(round(self.t_final / self.dt)))
        return n, self.t_final / n


@dataclass
class Trajectory:
    """Sampled classical trajectory: times[k] against a (len(times), M) array."""

    times: np.ndarray
    values: np.ndarray
    grid: Grid | None = None

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]

    def final_field(self) -> ClassicalField:
        if self.grid is None:
            raise FieldError("trajectory carries no grid")
        return ClassicalField(self.grid, self.values[-1].copy(), float(self.times[-1]))

    def to_csv(self, path, metadata: dict | None = None) -> None:
        """Append-style trajectory CSV: t, x, Re f, Im f, |f|^2."""
        if self.grid is None:
            raise FieldError("trajectory carries no grid")
        with open(path, "w", newline="") as fh:
            meta = {"M": self.grid.M, "dx": self.grid.dx}
            if metadata:
                meta.update(metadata)
            for key, val in meta.items():
                fh.write(f"# {key} = {_fmt(val)}\n")
            writer = csv.writer(fh)
            writer.writerow(["t", "x", "re_f", "im_f", "density"])
            for t, row in zip(self.times, self.values):
                for xj, vj in zip(self.grid.x, row):
                    writer.writerow([_fmt(float(t)), _fmt(float(xj)),
                                     _fmt(vj.real), _fmt(vj.imag),
                                     _fmt(abs(vj) ** 2)])


def _check_finite(values: np.ndarray, t: float) -> None:
    if not np.all(np.isfinite(values)):
        raise EvolveError(f"non-finite field values at t={t:.6g}")


def split_step_evolve(f0: ClassicalField, c: float, cfg: EvolveConfig) -> Trajectory:
    """Strang splitting: half nonlinear kick, full linear step, half kick.

    The nonlinear substep multiplies by exp(-i*2c|f|^2 dt/2) pointwise and
    the linear substep by exp(-i k^2 dt) in Fourier space; both preserve
    |f| pointwise or in the k-basis, so norm is conserved exactly.  Aborts
    if relative norm or energy drift exceeds the configured tolerances.
    """
    if cfg.scheme != "split_step_strang":
        raise EvolveError("split_step_evolve requires scheme='split_step_strang'")
    from .grid_field import classical_energy, classical_norm

    grid = f0.grid
    n_steps, dt = cfg.steps()
    k2 = grid.wavenumbers() ** 2
    linear_phase = np.exp(-1j * k2 * dt)

    f = f0.values.astype(np.complex128, copy=True)
    t = f0.time
    norm0 = classical_norm(f0)
    energy0 = classical_energy(f0, c)
    e_scale = max(abs(energy0), abs(c) * norm0 ** 2 / grid.L, 1e-30)

    times = [t]
    snaps = [f.copy()]
    half_kick = lambda g: g * np.exp(-0.5j * NONLINEAR_FACTOR * c * np.abs(g) ** 2 * dt)
    for step in range(1, n_steps + 1):
        f = half_kick(f)
        f = np.fft.ifft(linear_phase * np.fft.fft(f))
        f = half_kick(f)
        t = f0.time + step * dt
        _check_finite(f, t)
        keep = step == n_steps or (cfg.snapshot_stride
                                   and step % cfg.snapshot_stride == 0)
        if keep:
            times.append(t)
            snaps.append(f.copy())

    final = ClassicalField(grid, snaps[-1], times[-1])
    norm_drift = abs(classical_norm(final) - norm0) / max(norm0, 1e-30)
    if norm_drift > cfg.max_norm_drift:
        raise EvolveError(f"norm drift {norm_drift:.3e} exceeds tolerance")
    energy_drift = abs(classical_energy(final, c) - energy0) / e_scale
    if energy_drift > cfg.max_energy_drift:
        raise EvolveError(f"relative energy drift {energy_drift:.3e} exceeds tolerance")
    return Trajectory(np.array(times), np.array(snaps), grid)


def lattice_nonlinear_strength(model: LatticeModel) -> float:
    """Coefficient of |a_j|^2 a_j in the lattice ODE: 2c/dx."""
    return NONLINEAR_FACTOR * model.c / model.dx


def lattice_classical_evolve(alpha0: np.ndarray, model: LatticeModel,
                             cfg: EvolveConfig, hopping: bool = True) -> Trajectory:
    """RK4 trajectory of the lattice ODE matched to the quantum Hamiltonian.

    ``hopping=False`` zeroes the hopping matrix (test mode for the on-site
    phase-rotation closed form).
    """
    if cfg.scheme != "rk4_lattice":
        raise EvolveError("lattice_classical_evolve requires scheme='rk4_lattice'")
    alpha0 = np.asarray(alpha0, dtype=np.complex128)
    if alpha0.shape != (model.M,):
        raise EvolveError(f"alpha needs {model.M} entries, got shape {alpha0.shape}")

    h = hopping_matrix(model) if hopping else np.zeros((model.M, model.M))
    g = lattice_nonlinear_strength(model)

    def rhs(a: np.ndarray) -> np.ndarray:
        return -1j * (h @ a + g * np.abs(a) ** 2 * a)

    n_steps, dt = cfg.steps()
    a = alpha0.copy()
    times = [0.0]
    snaps = [a.copy()]
    for step in range(1, n_steps + 1):
        k1 = rhs(a)
        k2 = rhs(a + 0.5 * dt * k1)
        k3 = rhs(a + 0.5 * dt * k2)
        k4 = rhs(a + dt * k3)
        a = a + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t = step * dt
        _check_finite(a, t)
        keep = step == n_steps or (cfg.snapshot_stride
                                   and step % cfg.snapshot_stride == 0)
        if keep:
            times.append(t)
            snaps.append(a.copy())
    grid = Grid(model.M, model.M * model.dx)
    return Trajectory(np.array(times), np.array(snaps), grid)
