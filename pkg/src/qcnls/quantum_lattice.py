"""Lattice regularization of the quantum NLS field theory.

The continuum field is discretized on M periodic sites with spacing dx via

    psi(x_j)  <->  b_j / sqrt(dx),

which turns the field Hamiltonian into a Bose-Hubbard-type operator on a
per-site-truncated Fock space:

    H = (1/dx^2) sum_j (2 n_j - bdag_j b_{j+1} - bdag_{j+1} b_j)
        + (c/dx) sum_j n_j (n_j - 1)

H is normal ordered (the vacuum has exactly zero energy) and commutes
with the total number operator as a matrix identity.  The hopping matrix
entering the single-particle sector is exposed as ``hopping_matrix`` and
is reused verbatim by the classical lattice ODE, which is what makes the
free-theory quantum and classical evolutions agree exactly.

Basis order is little-endian: flat index = sum_j n_j (n_max+1)^j, site 0
fastest.  An optional total-occupation cap restricts the basis to
sum_j n_j <= n_total_max for memory savings; all operators are then the
compressions of the full-space ones onto that subspace.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.sparse as sp
from scipy.special import gammainc, gammaln

from .grid_field import NONLINEAR_FACTOR, ClassicalField, FieldError, Grid, _fmt

DEFAULT_MAX_STATES = 10_000_000
# Total coherent-state weight that may be lost to truncation before the
# constructor complains (error in strict mode, warning otherwise).
DEFAULT_TAIL_THRESHOLD = 1e-8


class TruncationError(RuntimeError):
    """Fock cutoff too small for the requested coherent amplitudes."""


class ModelError(ValueError):
    """Invalid lattice model parameters."""


class LatticeModel:
    """Truncated multi-site bosonic lattice.

    Parameters
    ----------
    M : number of sites.
    dx : lattice spacing.
    c : interaction coupling (either sign).
    n_max : per-site occupation cutoff, >= 1.
    n_total_max : optional cap on the total occupation (basis filter).
    max_states : reject models whose basis exceeds this many states.
    """

    def __init__(self, M: int, dx: float, c: float, n_max: int,
                 n_total_max: int | None = None, bc: str = "periodic",
                 max_states: int = DEFAULT_MAX_STATES):
        if M < 1:
            raise ModelError(f"need at least one site, got M={M}")
        if not (dx > 0) or not math.isfinite(dx):
            raise ModelError(f"spacing must be positive, got dx={dx}")
        if not math.isfinite(c):
            raise ModelError("coupling c must be finite")
        if n_max < 1:
            raise ModelError(f"per-site cutoff must be >= 1, got n_max={n_max}")
        if bc != "periodic":
            raise ModelError(f"only periodic boundaries are supported, got {bc!r}")
        if n_total_max is not None and n_total_max < 0:
            raise ModelError("n_total_max must be >= 0")
        self.M = int(M)
        self.dx = float(dx)
        self.c = float(c)
        self.n_max = int(n_max)
        self.n_total_max = None if n_total_max is None else int(n_total_max)
        self.bc = bc

        d = self.n_max + 1
        if self.n_total_max is None:
            dim = d ** self.M
            if dim > max_states:
                raise ModelError(
                    f"basis of {dim} states exceeds the budget of {max_states}; "
                    "lower n_max/M or set n_total_max"
                )
            self._occupations = None  # built lazily, full product basis
            self._keys = None
            self.dim = dim
        else:
            if self.M * math.log2(d) > 62:
                raise ModelError(
                    "capped basis keys require (n_max+1)^M < 2^62; reduce M "
                    "or n_max"
                )
            occ = _capped_occupations(self.M, self.n_max, self.n_total_max,
                                      max_states)
            self._occupations = occ
            strides = d ** np.arange(self.M, dtype=np.uint64)
            self._keys = (occ.astype(np.uint64) @ strides)
            self.dim = occ.shape[0]
        self._op_cache: dict = {}

    # -- basis codec ---------------------------------------------------

    @property
    def occupations(self) -> np.ndarray:
        """(dim, M) array: occupation tuple of every basis state."""
        if self._occupations is None:
            d = self.n_max + 1
            idx = np.arange(self.dim)
            occ = np.empty((self.dim, self.M), dtype=np.int64)
            for j in range(self.M):
                occ[:, j] = (idx // d ** j) % d
            self._occupations = occ
        return self._occupations

    def occupation_of(self, index: int) -> tuple[int, ...]:
        return tuple(int(n) for n in self.occupations[index])

    def index_of(self, occupation) -> int:
        occ = np.asarray(occupation, dtype=np.int64)
        if occ.shape != (self.M,) or np.any(occ < 0) or np.any(occ > self.n_max):
            raise ModelError(f"occupation {occupation} outside the basis")
        d = self.n_max + 1
        key = int(np.sum(occ * d ** np.arange(self.M, dtype=np.int64)))
        if self._keys is None:
            return key
        pos = int(np.searchsorted(self._keys, np.uint64(key)))
        if pos >= self.dim or self._keys[pos] != key:
            raise ModelError(f"occupation {occupation} outside the basis (capped)")
        return pos

    def _targets(self, keys: np.ndarray) -> np.ndarray:
        """Map little-endian keys to basis indices (keys must be in-basis)."""
        if self._keys is None:
            return keys.astype(np.int64)
        return np.searchsorted(self._keys, keys).astype(np.int64)

    def grid(self) -> Grid:
        return Grid(self.M, self.M * self.dx) if self.M >= 2 else None

    # -- cached operators ----------------------------------------------

    def ladder(self, j: int) -> tuple["SparseOperator", "SparseOperator"]:
        key = ("ladder", j)
        if key not in self._op_cache:
            self._op_cache[key] = build_ladder(self, j)
        return self._op_cache[key]

    def number_operator(self) -> "SparseOperator":
        if "number" not in self._op_cache:
            occ = self.occupations
            diag = occ.sum(axis=1).astype(np.float64)
            mat = sp.diags(diag, format="csr", dtype=np.complex128)
            self._op_cache["number"] = SparseOperator(mat, "hermitian")
        return self._op_cache["number"]

    def hamiltonian(self) -> "SparseOperator":
        if "hamiltonian" not in self._op_cache:
            self._op_cache["hamiltonian"] = build_hamiltonian(self)
        return self._op_cache["hamiltonian"]


def _capped_occupations(M: int, n_max: int, cap: int,
                        max_states: int) -> np.ndarray:
    """All tuples with n_j <= n_max and sum <= cap, sorted by flat key."""
    # Build digits from the most significant site (M-1) downward so rows
    # come out sorted by key; flip columns at the end.
    rows = np.zeros((1, 0), dtype=np.int64)
    sums = np.zeros(1, dtype=np.int64)
    for _ in range(M):
        counts = np.minimum(n_max, cap - sums) + 1
        total = int(counts.sum())
        if total > max_states:
            raise ModelError(
                f"capped basis exceeds the budget of {max_states} states"
            )
        rep = np.repeat(np.arange(rows.shape[0]), counts)
        digit = np.concatenate([np.arange(c) for c in counts])
        rows = np.column_stack([rows[rep], digit])
        sums = sums[rep] + digit
    return np.fliplr(rows)


@dataclass
class SparseOperator:
    """Row-compressed complex operator with a declared symmetry.

    ``symmetry`` is one of "hermitian", "anti_hermitian", "general"; the
    declared symmetry is spot-checked on construction by comparing a
    sample of stored entries A[i,j] against conj(A[j,i]).
    """

    matrix: sp.csr_matrix
    symmetry: str = "general"

    def __post_init__(self):
        if not sp.issparse(self.matrix):
            self.matrix = sp.csr_matrix(self.matrix, dtype=np.complex128)
        self.matrix = self.matrix.tocsr().astype(np.complex128)
        if self.matrix.shape[0] != self.matrix.shape[1]:
            raise ModelError(f"operator must be square, got {self.matrix.shape}")
        if self.symmetry not in ("hermitian", "anti_hermitian", "general"):
            raise ModelError(f"unknown symmetry {self.symmetry!r}")
        if self.symmetry != "general":
            self._verify_symmetry()

    def _verify_symmetry(self, samples: int = 64) -> None:
        coo = self.matrix.tocoo()
        if coo.nnz == 0:
            return
        rng = np.random.default_rng(12345)
        take = rng.choice(coo.nnz, size=min(samples, coo.nnz), replace=False)
        sign = 1.0 if self.symmetry == "hermitian" else -1.0
        for k in take:
            i, j, v = int(coo.row[k]), int(coo.col[k]), coo.data[k]
            mirror = self.matrix[j, i]
            if abs(v - sign * np.conj(mirror)) > 1e-12 * max(1.0, abs(v)):
                raise ModelError(
                    f"operator is not {self.symmetry}: A[{i},{j}]={v}, "
                    f"A[{j},{i}]={mirror}"
                )

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def __matmul__(self, other):
        if isinstance(other, FockState):
            return self.matrix @ other.amplitudes
        return self.matrix @ other

    def dagger(self) -> "SparseOperator":
        return SparseOperator(self.matrix.conj().T.tocsr(), self.symmetry)

    def to_matrix_market(self, path) -> None:
        """Export in Matrix Market coordinate format for cross-validation."""
        scipy.io.mmwrite(path, self.matrix.tocoo())


def operator_from_matrix_market(path, symmetry: str = "general") -> SparseOperator:
    return SparseOperator(sp.csr_matrix(scipy.io.mmread(path)), symmetry)


@dataclass
class FockState:
    """Normalized amplitude vector over the truncated occupation basis."""

    amplitudes: np.ndarray
    model: LatticeModel
    normalized: bool = True
    norm_defect: float = 0.0

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.complex128)
        if self.amplitudes.shape != (self.model.dim,):
            raise ModelError(
                f"state needs {self.model.dim} amplitudes, got "
                f"{self.amplitudes.shape}"
            )
        if self.normalized:
            err = abs(np.linalg.norm(self.amplitudes) - 1.0)
            if err > 1e-12:
                raise ModelError(
                    f"state norm deviates from 1 by {err:.3e}; construct with "
                    "normalized=False if that is intentional"
                )

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def overlap(self, other: "FockState") -> complex:
        """<self|other>."""
        return complex(np.vdot(self.amplitudes, other.amplitudes))

    def to_csv(self, path, metadata: dict | None = None) -> None:
        """Export as CSV: index, occupation tuple, Re, Im."""
        occ = self.model.occupations
        with open(path, "w", newline="") as fh:
            meta = {"M": self.model.M, "dx": self.model.dx,
                    "n_max": self.model.n_max, "dim": self.model.dim}
            if metadata:
                meta.update(metadata)
            for key, val in meta.items():
                fh.write(f"# {key} = {_fmt(val)}\n")
            writer = csv.writer(fh)
            writer.writerow(["index", "occupation", "re", "im"])
            for i, amp in enumerate(self.amplitudes):
                writer.writerow([i, " ".join(str(n) for n in occ[i]),
                                 _fmt(amp.real), _fmt(amp.imag)])


def vacuum_state(model: LatticeModel) -> FockState:
    amps = np.zeros(model.dim, dtype=np.complex128)
    amps[model.index_of([0] * model.M)] = 1.0
    return FockState(amps, model)


def build_ladder(model: LatticeModel, j: int) -> tuple[SparseOperator, SparseOperator]:
    """Annihilation and creation operators (b_j, bdag_j) on site j.

    b_j |..., n_j, ...> = sqrt(n_j) |..., n_j - 1, ...>; states at the
    cutoff boundary make the pair satisfy [b, bdag] = 1 only below n_max.
    """
    if not (0 <= j < model.M):
        raise ModelError(f"site {j} out of range for M={model.M}")
    occ = model.occupations
    d = np.uint64(model.n_max + 1)
    stride = d ** np.uint64(j)
    src = np.nonzero(occ[:, j] > 0)[0]
    if model._keys is None:
        keys = src.astype(np.uint64)
    else:
        keys = model._keys[src]
    dst = model._targets(keys - stride)
    data = np.sqrt(occ[src, j].astype(np.float64))
    b = sp.csr_matrix((data.astype(np.complex128), (dst, src)),
                      shape=(model.dim, model.dim))
    bdag = b.conj().T.tocsr()
    return SparseOperator(b, "general"), SparseOperator(bdag, "general")


def hopping_matrix(model: LatticeModel) -> np.ndarray:
    """M x M single-particle hopping matrix h with h = (1/dx^2)(2I - S - S^T).

    Built by the same per-site loop as the Hamiltonian so the M = 1 and
    M = 2 periodic edge cases stay consistent between the quantum and
    classical sides.
    """
    h = np.zeros((model.M, model.M))
    w = 1.0 / model.dx ** 2
    for j in range(model.M):
        k = (j + 1) % model.M
        h[j, j] += 2.0 * w
        h[j, k] -= w
        h[k, j] -= w
    return h


def build_hamiltonian(model: LatticeModel) -> SparseOperator:
    """Normal-ordered lattice Hamiltonian (hermitian, commutes with N).

    Diagonal: (2/dx^2) sum n_j + (c/dx) sum n_j(n_j - 1).  Off-diagonal:
    -(1/dx^2) bdag_j b_k over periodic bonds, assembled directly in the
    occupation basis (hops conserve total N, so the capped basis is
    closed under them).
    """
    occ = model.occupations
    d = np.uint64(model.n_max + 1)
    w = 1.0 / model.dx ** 2
    n = occ.astype(np.float64)

    diag = np.zeros(model.dim)
    for j in range(model.M):
        k = (j + 1) % model.M
        if k == j:
            continue  # M = 1: the 2n term cancels against both hops
        diag += w * n[:, j]  # j and k each appear twice over the bond loop
        diag += w * n[:, k]
    diag += (model.c / model.dx) * np.sum(n * (n - 1.0), axis=1)

    rows, cols, vals = [np.arange(model.dim)], [np.arange(model.dim)], [diag]
    keys = model._keys if model._keys is not None else np.arange(
        model.dim, dtype=np.uint64)
    for j in range(model.M):
        k = (j + 1) % model.M
        if k == j:
            continue
        # note for M = 2 the single bond occurs as two directed pairs, which
        # doubles its weight exactly as the per-site sum demands
        for (a, b_) in ((j, k), (k, j)):
            # bdag_a b_b: move one boson from b_ to a
            src = np.nonzero((occ[:, b_] > 0) & (occ[:, a] < model.n_max))[0]
            if src.size == 0:
                continue
            stride_a = d ** np.uint64(a)
            stride_b = d ** np.uint64(b_)
            dst = model._targets(keys[src] + stride_a - stride_b)
            amp = -w * np.sqrt(n[src, b_] * (n[src, a] + 1.0))
            rows.append(dst)
            cols.append(src)
            vals.append(amp)

    mat = sp.csr_matrix(
        (np.concatenate(vals).astype(np.complex128),
         (np.concatenate(rows), np.concatenate(cols))),
        shape=(model.dim, model.dim),
    )
    mat.sum_duplicates()
    return SparseOperator(mat, "hermitian")


def poisson_tail(intensity: float, n_max: int) -> float:
    """P(N > n_max) for N ~ Poisson(intensity); accurate for tiny tails."""
    if intensity == 0.0:
        return 0.0
    return float(gammainc(n_max + 1, intensity))


def coherent_tail_weight(alphas: np.ndarray, model: LatticeModel) -> float:
    """Total probability the exact coherent state puts outside the basis.

    For the pure per-site cutoff this is 1 - prod_j P(Poisson(|a_j|^2) <=
    n_max); with a total-occupation cap the additionally excluded states
    are accounted for by the exact retained weight of the amplitude
    vector.
    """
    lam = np.abs(np.asarray(alphas)) ** 2
    tails = np.array([poisson_tail(l, model.n_max) for l in lam])
    per_site = 1.0 - np.prod(1.0 - tails)
    if model.n_total_max is None:
        return float(per_site)
    kept = _coherent_amplitudes(np.asarray(alphas, dtype=np.complex128), model)
    return float(max(per_site, 1.0 - np.linalg.norm(kept) ** 2))


def _coherent_amplitudes(alphas: np.ndarray, model: LatticeModel) -> np.ndarray:
    """Unnormalized truncated coherent amplitudes, exact Poisson prefactors."""
    occ = model.occupations
    nrange = np.arange(model.n_max + 1)
    log_fact = gammaln(nrange + 1.0)
    amp = np.ones(model.dim, dtype=np.complex128)
    for j in range(model.M):
        a = alphas[j]
        site = np.exp(-0.5 * abs(a) ** 2) * (
            a ** nrange / np.exp(0.5 * log_fact))
        amp *= site[occ[:, j]]
    return amp


def coherent_state(f: ClassicalField | np.ndarray, model: LatticeModel,
                   strict: bool = True,
                   tail_threshold: float = DEFAULT_TAIL_THRESHOLD) -> FockState:
    """Coherent state with per-site displacement a_j = f(x_j) sqrt(dx).

    The closed-form product of per-site Poisson amplitudes

        prod_j exp(-|a_j|^2/2) a_j^{n_j} / sqrt(n_j!)

    is truncated to the basis and renormalized (the untruncated state is
    exactly normalized; truncation removes ``coherent_tail_weight`` of
    probability, which is the quantity checked against the threshold).
    Accepts either a ClassicalField on the matching grid or a raw array
    of displacements a_j.
    """
    if isinstance(f, ClassicalField):
        if f.grid.M != model.M or not math.isclose(f.grid.dx, model.dx,
                                                   rel_tol=1e-12):
            raise ModelError(
                f"field grid (M={f.grid.M}, dx={f.grid.dx}) does not match "
                f"model (M={model.M}, dx={model.dx})"
            )
        alphas = f.values * np.sqrt(model.dx)
    else:
        alphas = np.asarray(f, dtype=np.complex128)
        if alphas.shape != (model.M,):
            raise ModelError(f"need {model.M} displacements, got {alphas.shape}")

    tail = coherent_tail_weight(alphas, model)
    if tail > tail_threshold:
        msg = (f"coherent-state truncation discards {tail:.3e} probability "
               f"(> {tail_threshold:.1e}); raise n_max or lower amplitudes")
        if strict:
            raise TruncationError(msg)
        warnings.warn(msg, stacklevel=2)

    amp = _coherent_amplitudes(alphas, model)
    nrm = np.linalg.norm(amp)
    if nrm == 0.0:
        raise TruncationError("coherent amplitudes vanished; cutoff far too small")
    state = FockState(amp / nrm, model)
    state.norm_defect = tail
    return state


def build_displacement_generator(model: LatticeModel,
                                 alphas: np.ndarray) -> SparseOperator:
    """Anti-hermitian generator sum_j (a_j bdag_j - conj(a_j) b_j).

    Exponentiating it on the vacuum reproduces the coherent state up to
    truncation effects; see the displacement-equivalence tests.
    """
    alphas = np.asarray(alphas, dtype=np.complex128)
    if alphas.shape != (model.M,):
        raise ModelError(f"need {model.M} displacements, got {alphas.shape}")
    acc = sp.csr_matrix((model.dim, model.dim), dtype=np.complex128)
    for j in range(model.M):
        b, bdag = model.ladder(j)
        acc = acc + alphas[j] * bdag.matrix - np.conj(alphas[j]) * b.matrix
    return SparseOperator(acc, "anti_hermitian")


def field_expectation(s: FockState, model: LatticeModel) -> np.ndarray:
    """<s| b_j |s> / sqrt(dx) for every site: the classicalized field."""
    out = np.empty(model.M, dtype=np.complex128)
    for j in range(model.M):
        b, _ = model.ladder(j)
        out[j] = np.vdot(s.amplitudes, b @ s)
    return out / np.sqrt(model.dx)


def eigen_residual(s: FockState, f: ClassicalField | np.ndarray,
                   model: LatticeModel) -> float:
    """max_j || (b_j - a_j) |s> ||: how well s is an annihilation eigenstate.

    Zero for untruncated coherent states; decays with the Poisson weight
    at the cutoff for truncated ones.
    """
    if isinstance(f, ClassicalField):
        alphas = f.values * np.sqrt(model.dx)
    else:
        alphas = np.asarray(f, dtype=np.complex128)
    worst = 0.0
    for j in range(model.M):
        b, _ = model.ladder(j)
        r = (b @ s) - alphas[j] * s.amplitudes
        worst = max(worst, float(np.linalg.norm(r)))
    return worst
