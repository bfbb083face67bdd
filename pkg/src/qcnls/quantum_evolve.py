"""Unitary evolution exp(-iHt) on the truncated Fock space.

Two interchangeable engines behind one ``evolve`` call:

* ``dense_eig`` -- full Hermitian eigendecomposition, exact to rounding.
  The factorization is cached on the operator (thread-safe single
  initialization), so sweeping many times t against one Hamiltonian
  costs one diagonalization.  Serves as the oracle for the other engine.

* ``krylov`` -- Hermitian Lanczos with full reorthogonalization and
  adaptive time substeps.  The substep is accepted when the standard
  residual estimate (last Krylov component of the projected exponential
  times the next off-diagonal coefficient) fits within the error budget
  allocated to that substep.

``engine="auto"`` picks dense_eig at or below ``dense_threshold`` and
krylov above it.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .quantum_lattice import FockState, ModelError, SparseOperator


class PropagatorError(RuntimeError):
    """Evolution failed: bad operator, breakdown, or unmet tolerance."""


@dataclass
class PropagatorConfig:
    engine: str = "auto"
    krylov_dim: int = 30
    tolerance: float = 1e-10
    dense_threshold: int = 4096

    def __post_init__(self):
        if self.engine not in ("auto", "dense_eig", "krylov"):
            raise PropagatorError(f"unknown engine {self.engine!r}")
        if self.krylov_dim < 2:
            raise PropagatorError("krylov_dim must be >= 2")
        if not (self.tolerance > 0):
            raise PropagatorError("tolerance must be positive")


_EIG_LOCK = threading.Lock()


def _dense_eig(H: SparseOperator):
    cache = getattr(H, "_eig_cache", None)
    if cache is None:
        with _EIG_LOCK:
            cache = getattr(H, "_eig_cache", None)
            if cache is None:
                dense = H.matrix.toarray()
                evals, evecs = np.linalg.eigh(dense)
                cache = (evals, evecs)
                H._eig_cache = cache
    return cache


def _evolve_dense(psi: np.ndarray, H: SparseOperator, t: float) -> np.ndarray:
    evals, evecs = _dense_eig(H)
    coeff = evecs.conj().T @ psi
    return evecs @ (np.exp(-1j * evals * t) * coeff)


def _lanczos(matvec, v0: np.ndarray, m: int):
    """Lanczos basis of dimension <= m from v0 (assumed unit norm).

    Returns (V, alpha, beta, beta_next, happy) where T = tri(alpha, beta)
    and beta_next is the norm of the first discarded residual; ``happy``
    marks an invariant subspace (projection exact).
    """
    n = v0.shape[0]
    m = min(m, n)
    V = np.empty((n, m), dtype=np.complex128)
    alpha = np.empty(m)
    beta = np.empty(max(m - 1, 0))
    V[:, 0] = v0
    w = matvec(v0)
    a = np.vdot(v0, w).real
    alpha[0] = a
    w = w - a * v0
    scale = max(abs(a), 1.0)
    for k in range(1, m + 1):
        # full reorthogonalization, run twice for robustness
        for _ in range(2):
            w -= V[:, :k] @ (V[:, :k].conj().T @ w)
        b = np.linalg.norm(w)
        if k == m or b <= 1e-14 * scale:
            return V[:, :k], alpha[:k], beta[:k - 1], float(b), b <= 1e-14 * scale
        beta[k - 1] = b
        V[:, k] = w / b
        w = matvec(V[:, k]) - b * V[:, k - 1]
        a = np.vdot(V[:, k], w).real
        alpha[k] = a
        w = w - a * V[:, k]
        scale = max(scale, abs(a), b)
    raise AssertionError("unreachable")


def _tridiag_expmv(alpha: np.ndarray, beta: np.ndarray, tau: float) -> np.ndarray:
    """exp(-i tau T) e_1 for the real symmetric tridiagonal T."""
    if alpha.size == 1:
        return np.array([np.exp(-1j * tau * alpha[0])])
    theta, S = eigh_tridiagonal(alpha, beta)
    return S @ (np.exp(-1j * tau * theta) * S[0, :].conj())


def _evolve_krylov(psi: np.ndarray, H: SparseOperator, t: float,
                   cfg: PropagatorConfig) -> np.ndarray:
    if t == 0.0:
        return psi.copy()
    mat = H.matrix
    matvec = lambda x: mat @ x
    sign = 1.0 if t > 0 else -1.0
    remaining = abs(t)
    total = abs(t)
    budget = cfg.tolerance * (1.0 + total)
    v = psi.copy()
    while remaining > 0.0:
        nv = np.linalg.norm(v)
        V, alpha, beta, beta_next, happy = _lanczos(matvec, v / nv,
                                                    cfg.krylov_dim)
        h = remaining
        for _ in range(60):
            u = _tridiag_expmv(alpha, beta, sign * h)
            if happy:
                err = 0.0
                break
            err = abs(h) * beta_next * abs(u[-1])
            # allocate the total budget proportionally to the substep,
            # with a safety factor for the roughness of the estimate
            if err <= 0.25 * budget * (h / total):
                break
            h *= 0.5
        else:
            raise PropagatorError(
                f"krylov substep failed to converge; residual estimate {err:.3e}"
            )
        v = (V @ u) * nv
        remaining -= h
    return v


def evolve(s: FockState, H: SparseOperator, t: float,
           cfg: PropagatorConfig | None = None) -> FockState:
    """Return exp(-iHt)|s> within tolerance*(1+|t|) in the 2-norm.

    H must be flagged hermitian; the result is renormalized to unit norm
    and carries the pre-normalization defect in ``norm_defect``.
    """
    cfg = cfg or PropagatorConfig()
    if H.symmetry != "hermitian":
        raise PropagatorError("evolve requires a hermitian operator")
    if H.dim != s.model.dim:
        raise ModelError(f"operator dim {H.dim} != state dim {s.model.dim}")
    if not math.isfinite(t):
        raise PropagatorError(f"evolution time must be finite, got {t}")

    engine = cfg.engine
    if engine == "auto":
        engine = "dense_eig" if H.dim <= cfg.dense_threshold else "krylov"
    if t == 0.0:
        raw = s.amplitudes.copy()
    elif engine == "dense_eig":
        raw = _evolve_dense(s.amplitudes, H, t)
    else:
        raw = _evolve_krylov(s.amplitudes, H, t, cfg)

    nrm = np.linalg.norm(raw)
    if not np.isfinite(nrm) or nrm == 0.0:
        raise PropagatorError("propagation produced an invalid state")
    out = FockState(raw / nrm, s.model)
    out.norm_defect = abs(nrm - 1.0)
    return out


def expectation(s: FockState, A: SparseOperator) -> complex:
    """<s|A|s>; real up to rounding when A is flagged hermitian."""
    if A.dim != s.amplitudes.shape[0]:
        raise ModelError(f"operator dim {A.dim} != state dim "
                         f"{s.amplitudes.shape[0]}")
    return complex(np.vdot(s.amplitudes, A @ s))
