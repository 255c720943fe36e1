"""Eigenpairs of the quadratic pencil lambda^2 M + lambda D + K.

The pencil is linearized in energy coordinates y = (L_K^T q, L_M^T p), where
K = L_K L_K^T and M = L_M L_M^T.  There the generator reads

    A_hat = [[0, B], [-B^T, -C]],  B = L_K^T L_M^{-T},  C = L_M^{-1} D L_M^{-T},

a skew part plus a negative semidefinite part, and Euclidean norms of y are
energy norms of (q, p).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .assembly import DiscreteOperator
from .mesh import CompositeGrid

DENSE_THRESHOLD = 2000


class EigensolveError(RuntimeError):
    pass


@dataclass
class SpectrumReport:
    eigenvalues: np.ndarray
    # columns are the q-parts of the eigenvectors
    modes: np.ndarray
    residuals: np.ndarray
    # index of the conjugate partner, -1 if unpaired
    conjugacy_pairing: np.ndarray
    resolved: np.ndarray
    resolution_limit: float
    converged: bool = True
    method: str = "dense"
    raw_eigenvalues: np.ndarray = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.eigenvalues.size

    @property
    def abscissa(self) -> float:
        """Largest real part over every reported eigenvalue."""
        return float(self.eigenvalues.real.max())

    @property
    def resolved_abscissa(self) -> float:
        ev = self.eigenvalues[self.resolved]
        return float(ev.real.max()) if ev.size else float("nan")

    def pairing_defect(self) -> float:
        """Largest relative distance between an eigenvalue and its partner's conjugate."""
        ev = self.eigenvalues
        worst = 0.0
        for i, j in enumerate(self.conjugacy_pairing):
            if j < 0:
                continue
            scale = max(abs(ev[i]), 1.0)
            worst = max(worst, abs(ev[i] - np.conj(ev[j])) / scale)
        return worst

    def to_json(self, op: DiscreteOperator, path: str | Path | None = None) -> list[dict]:
        rows = []
        for k, lam in enumerate(self.eigenvalues):
            left, right, damped = branch_energy_split(op, self.modes[:, k], lam)
            rows.append({
                "re": float(lam.real), "im": float(lam.imag),
                "residual": float(self.residuals[k]),
                "left_share": left, "right_share": right, "damped_share": damped,
                "resolved": bool(self.resolved[k]),
            })
        if path is not None:
            Path(path).write_text(json.dumps(rows, indent=1) + "\n")
        return rows


# --- linearization ----------------------------------------------------------

@dataclass
class EnergyLinearization:
    A: np.ndarray
    LK: np.ndarray
    LM: np.ndarray

    def q_from_y(self, y: np.ndarray) -> np.ndarray:
        n = self.LK.shape[0]
        return sla.solve_triangular(self.LK.T, y[:n], lower=False)

    def y_from_state(self, q: np.ndarray, p: np.ndarray) -> np.ndarray:
        return np.concatenate([self.LK.T @ q, self.LM.T @ p])

    def state_from_y(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = self.LK.shape[0]
        q = sla.solve_triangular(self.LK.T, y[:n], lower=False)
        p = sla.solve_triangular(self.LM.T, y[n:], lower=False)
        return q, p


def energy_linearization(op: DiscreteOperator) -> EnergyLinearization:
    """Dense energy-coordinate generator; O(n^3), desk-scale systems only."""
    K, M, D = op.K.toarray(), op.M.toarray(), op.D.toarray()
    try:
        LK = np.linalg.cholesky(K)
        LM = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise EigensolveError("K or M is not positive definite") from exc
    B = sla.solve_triangular(LM, LK, lower=True).T
    C = sla.solve_triangular(LM, sla.solve_triangular(LM, D, lower=True).T, lower=True)
    C = 0.5 * (C + C.T)
    n = op.n
    A = np.zeros((2 * n, 2 * n))
    A[:n, n:] = B
    A[n:, :n] = -B.T
    A[n:, n:] = -C
    return EnergyLinearization(A, LK, LM)


# --- eigensolve -------------------------------------------------------------

def _pencil_forms(op: DiscreteOperator, q: np.ndarray):
    m = np.real(np.vdot(q, op.M @ q))
    d = np.real(np.vdot(q, op.D @ q))
    k = np.real(np.vdot(q, op.K @ q))
    return m, d, k


def rayleigh_refine(op: DiscreteOperator, lam: complex, q: np.ndarray) -> complex:
    """Root of m z^2 + d z + k = 0 (m, d, k the pencil forms of q) nearest lam.

    The real part of an underdamped root is -d / (2m) <= 0, so refined
    eigenvalues never cross the imaginary axis through round-off.
    """
    m, d, k = _pencil_forms(op, q)
    roots = np.roots([m, d, k]).astype(complex)
    return complex(roots[np.argmin(np.abs(roots - lam))])


def pencil_residual(op: DiscreteOperator, lam: complex, q: np.ndarray,
                    norms: tuple[float, float, float] | None = None) -> float:
    """Backward error ||(l^2 M + l D + K) q|| / ((|l|^2 |M| + |l| |D| + |K|) ||q||)."""
    r = lam * lam * (op.M @ q) + lam * (op.D @ q) + op.K @ q
    if norms is None:
        norms = _matrix_norms(op)
    nm, nd, nk = norms
    a = abs(lam)
    scale = (a * a * nm + a * nd + nk) * np.linalg.norm(q)
    return float(np.linalg.norm(r) / scale) if scale > 0 else float("inf")


def _matrix_norms(op: DiscreteOperator) -> tuple[float, float, float]:
    return tuple(float(spla.norm(X, 1)) for X in (op.M, op.D, op.K))


def _pairing(ev: np.ndarray, tol: float) -> np.ndarray:
    pair = np.full(ev.size, -1)
    used = np.zeros(ev.size, bool)
    scale = np.maximum(np.abs(ev), 1.0)
    for i in range(ev.size):
        if used[i]:
            continue
        used[i] = True
        if abs(ev[i].imag) <= tol * scale[i]:
            pair[i] = i
            continue
        d = np.abs(ev - np.conj(ev[i])) / scale
        d[used] = np.inf
        j = int(np.argmin(d))
        if d[j] < 1e-6:
            pair[i], pair[j] = j, i
            used[j] = True
    return pair


def _order(ev: np.ndarray) -> np.ndarray:
    # by imaginary part, then real part
    return np.lexsort((ev.real, ev.imag))


def eigensolve(op: DiscreteOperator, count: int | None = None, shift: complex = 0.0,
               residual_tol: float = 1e-8, dense_threshold: int = DENSE_THRESHOLD,
               refine: bool = True, maxiter: int | None = None) -> SpectrumReport:
    """The ``count`` eigenpairs of the pencil nearest ``shift`` (all if None).

    Up to ``dense_threshold`` DOFs the dense energy linearization is used;
    above it, shift-invert Arnoldi on J x = lambda E x.
    """
    n = op.n
    if count is None:
        count = 2 * n
    if count < 1 or count > 2 * n:
        raise ValueError(f"count must be in [1, {2 * n}], got {count}")
    converged = True
    if n <= dense_threshold:
        lin = energy_linearization(op)
        ev, Y = sla.eig(lin.A)
        Q = sla.solve_triangular(lin.LK.T, Y[:n], lower=False)
        near = np.argsort(np.abs(ev - shift), kind="stable")[:count]
        ev, Q = ev[near], Q[:, near]
        method = "dense"
    else:
        if count >= 2 * n - 1:
            raise ValueError("sparse path needs count < 2n - 1")
        J, E = op.skew_matrix.tocsc(), op.energy_matrix.tocsc()
        if np.iscomplex(shift):
            # real matrices with a complex shift would make ARPACK work with the
            # real part of the inverse, mixing in eigenvalues near conj(shift)
            J, E = J.astype(complex), E.astype(complex)
        try:
            ev, X = spla.eigs(J, k=count, M=E, sigma=shift, maxiter=maxiter)
        except spla.ArpackNoConvergence as exc:
            ev, X = exc.eigenvalues, exc.eigenvectors
            converged = False
            if ev.size == 0:
                raise EigensolveError("shift-invert iteration did not converge") from exc
        Q = X[:n]
        method = "shift-invert"
    raw = ev.copy()
    norms = _matrix_norms(op)
    res = np.empty(ev.size)
    Q = Q / np.linalg.norm(Q, axis=0)
    for k in range(ev.size):
        r_raw = pencil_residual(op, ev[k], Q[:, k], norms)
        if refine:
            lam = rayleigh_refine(op, ev[k], Q[:, k])
            r_ref = pencil_residual(op, lam, Q[:, k], norms)
            if r_ref <= max(r_raw, residual_tol):
                ev[k], r_raw = lam, r_ref
        res[k] = r_raw
    o = _order(ev)
    ev, Q, res, raw = ev[o], Q[:, o], res[o], raw[o]
    if np.any(res > residual_tol):
        converged = False
    lim = op.resolution_limit()
    return SpectrumReport(
        eigenvalues=ev, modes=Q, residuals=res,
        conjugacy_pairing=_pairing(ev, 1e-12),
        resolved=np.abs(ev.imag) <= lim, resolution_limit=lim,
        converged=converged, method=method, raw_eigenvalues=raw,
    )


@dataclass(frozen=True)
class StabilityResult:
    passed: bool
    abscissa: float
    n_checked: int

    def __bool__(self) -> bool:
        return self.passed


def strong_stability_check(report: SpectrumReport, tol: float = 1e-12) -> StabilityResult:
    """Pass iff every resolved eigenvalue has Re < -tol.

    Returns the spectral abscissa over the resolved eigenvalues.
    """
    ev = report.eigenvalues[report.resolved]
    if ev.size == 0:
        return StabilityResult(False, float("nan"), 0)
    absc = float(ev.real.max())
    return StabilityResult(bool(absc < 0 and absc < -tol), absc, int(ev.size))


# --- mode diagnostics -------------------------------------------------------

def equipartition_defect(op: DiscreteOperator, lam: complex, mode: np.ndarray) -> float:
    """| |l|^2 q*Mq - q*Kq | / ( |l|^2 q*Mq + q*Kq ): kinetic vs potential imbalance."""
    q = np.asarray(mode)
    if not np.any(q):
        raise ValueError("zero mode")
    kin = abs(lam) ** 2 * np.real(np.vdot(q, op.M @ q))
    pot = np.real(np.vdot(q, op.K @ q))
    return float(abs(kin - pot) / (kin + pot))


def branch_energy_split(op: DiscreteOperator, mode: np.ndarray,
                        eigenvalue: complex | None = None) -> tuple[float, float, float]:
    """Energy shares of the undamped left elements, the right segment and the damped region.

    With ``eigenvalue`` given the velocity is taken as eigenvalue * mode;
    otherwise only the potential energy is split.
    """
    q = np.asarray(mode)
    if not np.any(q):
        raise ValueError("zero mode")
    dm = op.dof_map
    full = dm.expand(q)
    grid = op.grid
    w2 = 0.0 if eigenvalue is None else abs(eigenvalue) ** 2
    shares = np.zeros(3)
    for e, dofs in enumerate(dm.element_dofs):
        qe = full[dofs]
        en = np.real(np.vdot(qe, op.element_K[e] @ qe) + w2 * np.vdot(qe, op.element_M[e] @ qe))
        if grid.segment_tags[e] == CompositeGrid.RIGHT:
            shares[1] += en
        elif grid.damped[e]:
            shares[2] += en
        else:
            shares[0] += en
    total = shares.sum()
    if total <= 0:
        raise ValueError("mode has zero energy")
    shares /= total
    return float(shares[0]), float(shares[1]), float(shares[2])
