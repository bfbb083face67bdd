"""Classical complex field on a periodic 1D grid, with analytic soliton profiles.

Conventions (hbar = 1, 2m = 1 throughout the package):

    i df/dt = -d^2f/dx^2 + 2c |f|^2 f

The factor 2 in front of the cubic term is fixed once here
(``NONLINEAR_FACTOR``) and shared by every solver and by the lattice
Hamiltonian builder, so the classical and quantum sides cannot drift
apart by a factor of two.

Closed forms implemented here:

    bright (c < 0):
        f(x,t) = eta/sqrt(-c) * sech(eta*(x - x0 - 2vt))
                 * exp(i*(v*x - (v^2 - eta^2)*t + phi0))

    gray (c > 0), background density rho, grayness angle phi:
        f(x,t) = sqrt(rho) * (i*sin(phi) + cos(phi)*tanh(xi)) * exp(-2i*c*rho*t),
        xi = sqrt(c*rho)*cos(phi) * (x - x0 - 2*sqrt(c*rho)*sin(phi)*t)

Both are validated against a finite-difference residual of the PDE (see
``pde_residual`` and the test suite) before anything downstream relies
on them.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

# Coefficient of c|f|^2 f in the equation of motion.  Shared convention,
# do not redefine elsewhere.
NONLINEAR_FACTOR = 2.0

# Relative tail / boundary-mismatch level above which a periodic wrap of a
# localized profile is considered inconsistent.
BOUNDARY_TOL = 1e-8


class FieldError(ValueError):
    """Invalid field construction or incompatible grid/parameters."""


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid of M sites on a box of length L.

    Sites sit at x_j = j*dx, j = 0..M-1, with dx = L/M; index arithmetic
    is modulo M.
    """

    M: int
    L: float

    def __post_init__(self):
        if self.M < 2:
            raise FieldError(f"grid needs M >= 2 sites, got M={self.M}")
        if not (self.L > 0) or not math.isfinite(self.L):
            raise FieldError(f"box length must be positive and finite, got L={self.L}")

    @property
    def dx(self) -> float:
        return self.L / self.M

    @property
    def x(self) -> np.ndarray:
        return self.dx * np.arange(self.M)

    def wavenumbers(self) -> np.ndarray:
        """FFT-ordered wavenumbers k for spectral differentiation."""
        return 2.0 * np.pi * np.fft.fftfreq(self.M, d=self.dx)


@dataclass
class ClassicalField:
    """Complex field samples f(x_j) at a single time."""

    grid: Grid
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.shape != (self.grid.M,):
            raise FieldError(
                f"field needs {self.grid.M} samples, got shape {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise FieldError("field contains non-finite samples")

    def copy(self) -> "ClassicalField":
        return ClassicalField(self.grid, self.values.copy(), self.time)


@dataclass(frozen=True)
class SolitonParams:
    """Parameters for the analytic soliton profiles.

    ``kind`` is "bright" or "gray".  Bright solitons use ``amplitude``
    (eta > 0) and require c < 0; gray solitons use ``background`` (rho > 0)
    and ``grayness`` (angle in (-pi/2, pi/2), 0 = fully dark) and require
    c > 0.  ``c`` here is the coupling the profile solves the equation for;
    it need not match the coupling of a model the profile is later fed to.
    """

    kind: str
    c: float
    amplitude: float = 1.0
    background: float = 1.0
    grayness: float = 0.0
    velocity: float = 0.0
    center: float = 0.0
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in ("bright", "gray"):
            raise FieldError(f"unknown soliton kind {self.kind!r}")
        for name in ("c", "amplitude", "background", "grayness", "velocity",
                     "center", "phase"):
            if not math.isfinite(getattr(self, name)):
                raise FieldError(f"non-finite soliton parameter {name}")
        if self.kind == "bright":
            if self.c >= 0:
                raise FieldError("bright soliton requires c < 0")
            if self.amplitude <= 0:
                raise FieldError("bright soliton requires amplitude > 0")
        else:
            if self.c <= 0:
                raise FieldError("gray soliton requires c > 0")
            if self.background <= 0:
                raise FieldError("gray soliton requires background density > 0")
            if not (-np.pi / 2 < self.grayness < np.pi / 2):
                raise FieldError("grayness angle must lie in (-pi/2, pi/2)")


def bright_soliton(p: SolitonParams, grid: Grid, t: float = 0.0) -> ClassicalField:
    """Sample the bright-soliton closed form at time t.

    The profile is evaluated on the infinite line and wrapped onto the
    periodic box; a warning is emitted when the sech tails do not decay
    below ``BOUNDARY_TOL`` at the box edge or when the width 1/eta is not
    comfortably between dx and L.
    """
    if p.kind != "bright":
        raise FieldError("bright_soliton needs kind='bright' parameters")
    eta, v, c = p.amplitude, p.velocity, p.c
    width = 1.0 / eta
    if width < 3.0 * grid.dx or width > grid.L / 6.0:
        warnings.warn(
            f"bright soliton width 1/eta={width:.3g} is not well separated from "
            f"dx={grid.dx:.3g} and L={grid.L:.3g}; profile is under-resolved "
            "or wraps around the box",
            stacklevel=2,
        )
    x = grid.x
    # Wrap the co-moving coordinate into [-L/2, L/2) so the hump stays
    # centred in the box regardless of how far x0 + 2vt has drifted.
    u = x - p.center - 2.0 * v * t
    u = (u + grid.L / 2.0) % grid.L - grid.L / 2.0
    envelope = (eta / np.sqrt(-c)) / np.cosh(eta * u)
    carrier = np.exp(1j * (v * x - (v * v - eta * eta) * t + p.phase))
    values = envelope * carrier
    edge = abs(envelope[np.argmax(np.abs(u))]) / np.max(envelope)
    if edge > BOUNDARY_TOL:
        warnings.warn(
            f"bright soliton tail at the box edge is {edge:.2e} of the peak; "
            "periodic wrap is inconsistent beyond this level",
            stacklevel=2,
        )
    return ClassicalField(grid, values, t)


def gray_soliton(p: SolitonParams, grid: Grid, t: float = 0.0,
                 pair: bool = True) -> ClassicalField:
    """Sample the gray-soliton closed form at time t.

    A single gray soliton carries a phase winding that cannot close on a
    periodic box, so by default an even, counter-phased pair is emitted:
    one soliton with grayness +phi at x0 and its mirror with -phi at
    x0 + L/2, which makes the product of the two tanh factors periodic.
    ``pair=False`` returns the bare single soliton and warns that the
    boundary is inconsistent.
    """
    if p.kind != "gray":
        raise FieldError("gray_soliton needs kind='gray' parameters")
    rho, phi, c = p.background, p.grayness, p.c
    kappa = np.sqrt(c * rho)

    def single(x: np.ndarray, x0: float, sign: float) -> np.ndarray:
        # raw (unwrapped) coordinate: tanh is antisymmetric, so a seam wrap
        # would cut an O(1) jump into the profile; the counter-phased pair
        # closes the boundary by itself instead
        s, co = sign * np.sin(phi), np.cos(phi)
        u = x - x0 - 2.0 * kappa * s * t
        return 1j * s + co * np.tanh(kappa * co * u)

    if pair:
        # sqrt(rho) * g1 * g2 with g1*g2 -> 1 on both far sides keeps the
        # background at rho and closes the phase winding across the box.
        def profile(x):
            return np.sqrt(rho) * single(x, p.center, +1.0) * single(
                x, p.center + grid.L / 2.0, -1.0) * np.exp(-2j * c * rho * t)
    else:
        warnings.warn(
            "single gray soliton on a periodic box has a boundary phase "
            "mismatch; use pair=True for a consistent wrap",
            stacklevel=2,
        )

        def profile(x):
            return np.sqrt(rho) * single(x, p.center, +1.0) * np.exp(
                -2j * c * rho * t)

    values = profile(grid.x)
    edges = profile(np.array([0.0, grid.L]))
    mismatch = abs(edges[0] - edges[1]) / np.sqrt(rho)
    if pair and mismatch > BOUNDARY_TOL:
        warnings.warn(
            f"gray pair boundary mismatch {mismatch:.2e} exceeds "
            f"{BOUNDARY_TOL:.0e}; cores sit too close to the box edge or "
            "have drifted apart",
            stacklevel=2,
        )
    return ClassicalField(grid, values, t)


def classical_norm(f: ClassicalField) -> float:
    """Particle number dx * sum_j |f_j|^2 (conserved by the NLS flow)."""
    return float(f.grid.dx * np.sum(np.abs(f.values) ** 2))


def spectral_derivative(f: ClassicalField) -> np.ndarray:
    """First derivative df/dx by Fourier differentiation."""
    k = f.grid.wavenumbers()
    return np.fft.ifft(1j * k * np.fft.fft(f.values))


def spectral_laplacian(f: ClassicalField) -> np.ndarray:
    """Second derivative d^2f/dx^2 by Fourier differentiation."""
    k = f.grid.wavenumbers()
    return np.fft.ifft(-(k ** 2) * np.fft.fft(f.values))


def classical_energy(f: ClassicalField, c: float) -> float:
    """Energy functional dx * sum_j (|df/dx|_j^2 + c |f_j|^4).

    Equal to integral of (-f* f'' + c |f|^4) after periodic integration by
    parts; the derivative is spectral, so the value is exact to rounding
    for band-limited fields.
    """
    df = spectral_derivative(f)
    dens = np.abs(df) ** 2 + c * np.abs(f.values) ** 4
    return float(f.grid.dx * np.sum(dens))


def pde_residual(make_field, c: float, t: float, dt: float = 1e-5) -> float:
    """Max-norm residual of i df/dt + f'' - 2c|f|^2 f at time t.

    ``make_field`` maps a time to a ClassicalField (typically a closed-form
    soliton); df/dt is a central difference of the closed form, f'' is
    spectral.  Used as the independent oracle that guards the soliton
    formulas.
    """
    fm, f0, fp = make_field(t - dt), make_field(t), make_field(t + dt)
    dfdt = (fp.values - fm.values) / (2.0 * dt)
    lap = spectral_laplacian(f0)
    nonlin = NONLINEAR_FACTOR * c * np.abs(f0.values) ** 2 * f0.values
    res = 1j * dfdt + lap - nonlin
    scale = np.max(np.abs(f0.values))
    return float(np.max(np.abs(res)) / scale)


def field_to_csv(f: ClassicalField, path, c: float | None = None,
                 metadata: dict | None = None) -> None:
    """Write a field snapshot as CSV: columns x, Re f, Im f, |f|^2.

    Leading '#' comment lines carry M, dx, t, c and any extra metadata;
    floats use 17 significant digits so the file round-trips exactly.
    """
    meta = {"M": f.grid.M, "dx": f.grid.dx, "t": f.time}
    if c is not None:
        meta["c"] = c
    if metadata:
        meta.update(metadata)
    with open(path, "w", newline="") as fh:
        for key, val in meta.items():
            fh.write(f"# {key} = {_fmt(val)}\n")
        writer = csv.writer(fh)
        writer.writerow(["x", "re_f", "im_f", "density"])
        for xj, vj in zip(f.grid.x, f.values):
            writer.writerow([_fmt(xj), _fmt(vj.real), _fmt(vj.imag),
                             _fmt(abs(vj) ** 2)])


def field_from_csv(path) -> tuple[ClassicalField, dict]:
    """Read back a snapshot written by ``field_to_csv``."""
    meta: dict = {}
    rows = []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].partition("=")
                meta[key.strip()] = _parse_meta(val.strip())
            elif line.strip():
                rows.append(line)
    reader = csv.reader(rows)
    header = next(reader)
    if header[:4] != ["x", "re_f", "im_f", "density"]:
        raise FieldError(f"unexpected CSV header {header}")
    data = np.array([[float(v) for v in row] for row in reader])
    M = int(meta["M"])
    grid = Grid(M, float(meta["dx"]) * M)
    values = data[:, 1] + 1j * data[:, 2]
    return ClassicalField(grid, values, float(meta["t"])), meta


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def _parse_meta(s: str):
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s
