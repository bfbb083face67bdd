"""Quantum-classical divergence diagnostics for coherent states.

Central object: the overlap

    r(t) = < quantum(t) | classical(t) >

between the unitarily evolved coherent state exp(-iHt)|f> and the
coherent state built on the classically evolved field.  r starts at 1;
for c = 0 with the lattice-matched classical flow it stays exactly 1
(including phase -- no global phase is stripped anywhere), while any
c != 0 makes it decay.  The short-time law

    r(dt) = 1 - i (c/dx) * sum_j |a_j|^4 * dt + O(dt^2)

(the lattice form of  1 - i c dt * integral |f|^4 dx) is measured by
``short_time_slope`` via a complex quadratic fit; the dt^2 coefficient
carries an overall factor of c, which the c-sweep machinery checks.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .classical_solver import (EvolveConfig, Trajectory, lattice_classical_evolve,
                               split_step_evolve)
from .grid_field import ClassicalField, _fmt
from .quantum_evolve import PropagatorConfig, evolve, expectation
from .quantum_lattice import (DEFAULT_TAIL_THRESHOLD, FockState, LatticeModel,
                              TruncationError, coherent_state,
                              coherent_tail_weight, field_expectation)

CLASSICAL_MODES = ("lattice_ode", "split_step")


@dataclass
class OverlapSeries:
    """Sampled overlap r(t_k) with deviation and conservation logs."""

    times: np.ndarray
    r: np.ndarray
    field_dev: np.ndarray
    n_drift: np.ndarray
    e_drift: np.ndarray
    classical_mode: str = "lattice_ode"
    max_tail_weight: float = 0.0

    def abs_r(self) -> np.ndarray:
        return np.abs(self.r)

    def arg_r(self) -> np.ndarray:
        return np.angle(self.r)

    def decoherence_time(self) -> float | None:
        """First sampled t with |r| < 1/e, or None if never reached."""
        below = np.nonzero(self.abs_r() < 1.0 / np.e)[0]
        if below.size == 0:
            return None
        return float(self.times[below[0]])

    def to_csv(self, path, metadata: dict | None = None) -> None:
        """Columns: t, re_r, im_r, abs_r, field_dev, n_drift, e_drift."""
        meta = {"classical_mode": self.classical_mode,
                "max_tail_weight": self.max_tail_weight}
        if metadata:
            meta.update(metadata)
        with open(path, "w", newline="") as fh:
            for key, val in meta.items():
                fh.write(f"# {key} = {_fmt(val)}\n")
            writer = csv.writer(fh)
            writer.writerow(["t", "re_r", "im_r", "abs_r", "field_dev",
                             "n_drift", "e_drift"])
            for k in range(len(self.times)):
                writer.writerow([
                    _fmt(float(self.times[k])),
                    _fmt(self.r[k].real), _fmt(self.r[k].imag),
                    _fmt(float(abs(self.r[k]))),
                    _fmt(float(self.field_dev[k])),
                    _fmt(float(self.n_drift[k])),
                    _fmt(float(self.e_drift[k])),
                ])


@dataclass
class SlopeReport:
    """Quadratic fit r(dt) - 1 = s1*dt + s2*dt^2 and its diagnostics."""

    s1: complex
    s2: complex
    s1_err: float
    s2_err: float
    predicted_s1: complex
    rel_error: float
    s1_refit_shift: float
    dt_values: np.ndarray
    r_values: np.ndarray
    fit_residual: float
    quartic_sum: float  # sum_j |a_j|^4 of the prepared displacements

    def to_dict(self) -> dict:
        return {
            "s1": [self.s1.real, self.s1.imag],
            "s2": [self.s2.real, self.s2.imag],
            "s1_err": self.s1_err,
            "s2_err": self.s2_err,
            "predicted_s1": [self.predicted_s1.real, self.predicted_s1.imag],
            "rel_error": self.rel_error,
            "s1_refit_shift": self.s1_refit_shift,
            "dt_values": [float(v) for v in self.dt_values],
            "r_values": [[v.real, v.imag] for v in self.r_values],
            "fit_residual": self.fit_residual,
            "quartic_sum": self.quartic_sum,
        }

    def to_json(self, path, provenance: dict | None = None) -> None:
        payload = self.to_dict()
        if provenance:
            payload["provenance"] = provenance
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _displacements(f0, model: LatticeModel) -> np.ndarray:
    if isinstance(f0, ClassicalField):
        return f0.values * np.sqrt(model.dx)
    alphas = np.asarray(f0, dtype=np.complex128)
    if alphas.shape != (model.M,):
        raise ValueError(f"need {model.M} displacements, got {alphas.shape}")
    return alphas


def _classical_snapshots(alpha0: np.ndarray, model: LatticeModel,
                         cfg: EvolveConfig, mode: str) -> Trajectory:
    if mode == "lattice_ode":
        return lattice_classical_evolve(
            alpha0, model, replace(cfg, scheme="rk4_lattice"))
    if mode == "split_step":
        grid = model.grid()
        if grid is None:
            raise ValueError("split_step classical mode needs M >= 2")
        f0 = ClassicalField(grid, alpha0 / np.sqrt(model.dx), 0.0)
        traj = split_step_evolve(f0, model.c,
                                 replace(cfg, scheme="split_step_strang"))
        return Trajectory(traj.times, traj.values * np.sqrt(model.dx),
                          traj.grid)
    raise ValueError(f"unknown classical mode {mode!r}")


def overlap_series(f0, model: LatticeModel, evolve_cfg: EvolveConfig,
                   prop_cfg: PropagatorConfig | None = None,
                   classical_mode: str = "lattice_ode",
                   strict: bool = True,
                   tail_threshold: float = DEFAULT_TAIL_THRESHOLD) -> OverlapSeries:
    """Overlap r(t_k) between quantum and classically evolved coherent states.

    The quantum state is advanced incrementally between the classical
    trajectory's snapshot times; at each snapshot a fresh coherent state
    is built on the classical field (its truncation tail is checked per
    snapshot, naming the first offending time on failure).  Conservation
    logs record |<N>_t - <N>_0| and |<H>_t - <H>_0|.
    """
    prop_cfg = prop_cfg or PropagatorConfig()
    alpha0 = _displacements(f0, model)
    H = model.hamiltonian()
    Nop = model.number_operator()

    psi = coherent_state(alpha0, model, strict=strict,
                         tail_threshold=tail_threshold)
    max_tail = psi.norm_defect
    n0 = expectation(psi, Nop).real
    e0 = expectation(psi, H).real

    traj = _classical_snapshots(alpha0, model, evolve_cfg, classical_mode)
    times = traj.times
    n_snap = len(times)
    r = np.empty(n_snap, dtype=np.complex128)
    field_dev = np.empty(n_snap)
    n_drift = np.empty(n_snap)
    e_drift = np.empty(n_snap)

    t_prev = 0.0
    for k in range(n_snap):
        t = float(times[k])
        if t != t_prev:
            psi = evolve(psi, H, t - t_prev, prop_cfg)
            t_prev = t
        try:
            coh = coherent_state(traj.values[k], model, strict=strict,
                                 tail_threshold=tail_threshold)
        except TruncationError as exc:
            raise TruncationError(
                f"classical trajectory leaves the cutoff budget at t={t:.6g}: "
                f"{exc}"
            ) from exc
        max_tail = max(max_tail, coh.norm_defect)
        r[k] = psi.overlap(coh)
        fexp = field_expectation(psi, model)
        field_dev[k] = float(np.max(np.abs(
            fexp - traj.values[k] / np.sqrt(model.dx))))
        n_drift[k] = abs(expectation(psi, Nop).real - n0)
        e_drift[k] = abs(expectation(psi, H).real - e0)

    return OverlapSeries(times=np.asarray(times, dtype=float), r=r,
                         field_dev=field_dev, n_drift=n_drift,
                         e_drift=e_drift, classical_mode=classical_mode,
                         max_tail_weight=max_tail)


def field_deviation(f0, model: LatticeModel, evolve_cfg: EvolveConfig,
                    prop_cfg: PropagatorConfig | None = None,
                    classical_mode: str = "lattice_ode",
                    strict: bool = True) -> np.ndarray:
    """max_j |<psi(x_j)>_t - f(x_j, t)| along the trajectory."""
    series = overlap_series(f0, model, evolve_cfg, prop_cfg,
                            classical_mode=classical_mode, strict=strict)
    return series.field_dev


def predicted_slope(alpha0: np.ndarray, model: LatticeModel) -> complex:
    """Exact lattice first-order coefficient: -i (c/dx) sum_j |a_j|^4."""
    quartic = float(np.sum(np.abs(alpha0) ** 4))
    return -1j * (model.c / model.dx) * quartic


def _fit_quadratic(dts: np.ndarray, y: np.ndarray):
    """Complex least squares y ~ s1*dt + s2*dt^2; returns coeffs, SEs, resid."""
    X = np.column_stack([dts, dts ** 2])
    gram = X.T @ X
    theta = np.linalg.solve(gram, X.T @ y)
    res = y - X @ theta
    dof = len(dts) - 2
    if dof > 0:
        sigma2 = float(np.sum(np.abs(res) ** 2) / dof)
    else:
        sigma2 = 0.0
    cov = sigma2 * np.linalg.inv(gram)
    ses = np.sqrt(np.abs(np.diag(cov)))
    return theta, ses, float(np.linalg.norm(res))


def short_time_slope(f0, model: LatticeModel, dt_list,
                     prop_cfg: PropagatorConfig | None = None,
                     rk_dt: float = 1e-5,
                     strict: bool = True,
                     tail_threshold: float = DEFAULT_TAIL_THRESHOLD,
                     max_fit_residual: float = 1e-6) -> SlopeReport:
    """Measure r(dt) at the given small dt values and fit the expansion.

    The quantum side integrates exp(-iHt) from t=0 for every dt; the
    classical side runs the matched lattice ODE (RK4 at internal step
    ``rk_dt``).  Error bars combine the least-squares SE with a floor set
    by the propagator tolerance and the truncation budget; the report also
    carries the shift of s1 under refitting with the smaller half of the
    dt list (Richardson-style consistency).
    """
    prop_cfg = prop_cfg or PropagatorConfig(tolerance=1e-12)
    dts = np.sort(np.asarray(dt_list, dtype=float))
    if dts.size < 3:
        raise ValueError("need at least 3 dt values")
    if np.any(dts <= 0):
        raise ValueError("dt values must be positive")
    if dts[-1] / dts[0] < 4.0 - 1e-12:
        raise ValueError("dt values must span at least a factor of 4")

    alpha0 = _displacements(f0, model)
    H = model.hamiltonian()
    psi0 = coherent_state(alpha0, model, strict=strict,
                          tail_threshold=tail_threshold)
    tail = psi0.norm_defect

    r_vals = np.empty(dts.size, dtype=np.complex128)
    for i, dt in enumerate(dts):
        psi = evolve(psi0, H, float(dt), prop_cfg)
        steps = max(1, int(math.ceil(dt / rk_dt)))
        cfg = EvolveConfig(dt=dt / steps, t_final=float(dt),
                           scheme="rk4_lattice")
        traj = lattice_classical_evolve(alpha0, model, cfg)
        coh = coherent_state(traj.final, model, strict=strict,
                             tail_threshold=tail_threshold)
        tail = max(tail, coh.norm_defect)
        r_vals[i] = psi.overlap(coh)

    y = r_vals - 1.0
    if np.max(np.abs(y)) > 0.1:
        raise ValueError(
            "dt values too large: |r - 1| exceeds 0.1, the expansion regime"
        )
    theta, ses, resid = _fit_quadratic(dts, y)
    if resid > max_fit_residual:
        raise RuntimeError(
            f"quadratic fit residual {resid:.3e} exceeds {max_fit_residual:.1e}; "
            "dt values too large or truncation too tight"
        )

    # floor the error bars at the r-measurement precision propagated
    # through the fit scales
    eps_meas = prop_cfg.tolerance * (1.0 + dts[-1]) + tail
    s1_err = max(float(ses[0]), eps_meas / dts[0])
    s2_err = max(float(ses[1]), eps_meas / dts[0] ** 2)

    half = dts.size // 2
    if half >= 2:
        theta_half, _, _ = _fit_quadratic(dts[:half], y[:half])
        refit_shift = float(abs(theta_half[0] - theta[0]))
    else:
        refit_shift = 0.0

    pred = predicted_slope(alpha0, model)
    if abs(pred) > 0:
        rel = float(abs(theta[0] - pred) / abs(pred))
    else:
        rel = float(abs(theta[0]))
    return SlopeReport(
        s1=complex(theta[0]), s2=complex(theta[1]),
        s1_err=s1_err, s2_err=s2_err,
        predicted_s1=complex(pred), rel_error=rel,
        s1_refit_shift=refit_shift,
        dt_values=dts, r_values=r_vals, fit_residual=resid,
        quartic_sum=float(np.sum(np.abs(alpha0) ** 4)),
    )
