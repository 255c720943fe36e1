"""Resolvent solves, energy-norm resolvent estimates and blow-up probes.

Writing the generator as A = E^{-1} J with E = diag(K, M) and
J = [[0, K], [-K, -D]], the resolvent is (i lam - A)^{-1} = (i lam E - J)^{-1} E
and its norm in the energy inner product is the square root of the largest
eigenvalue of R^# R, where R^# = (i lam E - J)^{-H} E is the E-adjoint.
"""

from __future__ import annotations

import csv
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import minimize_scalar

from .assembly import DiscreteOperator, ModelKind
from .mesh import Geometry
from .time_evolution import State


class ResolventError(RuntimeError):
    pass


def _solve_mass(op: DiscreteOperator, b: np.ndarray) -> np.ndarray:
    return _solve_real_split(op.mass_lu, b)


def _matvec_ext(A: sp.spmatrix, x: np.ndarray) -> np.ndarray:
    """A @ x accumulated in extended precision (long double where available)."""
    A = A.tocoo()
    out = np.zeros(A.shape[0], np.clongdouble)
    np.add.at(out, A.row, A.data.astype(np.longdouble) * x.astype(np.clongdouble)[A.col])
    return out


def _weak_residual(op: DiscreteOperator, lam: float, q: np.ndarray, p: np.ndarray,
                   g: np.ndarray) -> np.ndarray:
    # i lam M p + K q + D p - M g, cancellation-prone on fine beam meshes
    w = (1j * lam * _matvec_ext(op.M, p) + _matvec_ext(op.K, q) + _matvec_ext(op.D, p)
         - _matvec_ext(op.M, g))
    return w.astype(complex)


def resolvent_residual(op: DiscreteOperator, lam: float, x: State,
                       f: np.ndarray, g: np.ndarray, norm: str = "weak") -> float:
    """Relative residual ||(i lam - A) x - (f, g)|| / ||(f, g)||_E.

    The displacement component is measured in the K-norm.  The momentum
    component is the weak residual w = i lam M p + K q + D p - M g; with
    ``norm="weak"`` it is measured in the dual norm sqrt(w^H K^{-1} w), with
    ``norm="energy"`` in the L2 norm sqrt(w^H M^{-1} w).  The latter applies
    a discrete fourth derivative to q, so plain rounding of q already costs
    about eps / h^4 and it cannot reach 1e-10 on fine meshes.
    """
    q, p = x.q, x.p
    rq = 1j * lam * q - p - f
    w = _weak_residual(op, lam, q, p, g)
    if norm == "weak":
        rw = _solve_real_split(spla.splu(op.K.tocsc()), w)
    elif norm == "energy":
        rw = _solve_mass(op, w)
    else:
        raise ValueError(f"unknown residual norm {norm!r}")
    num = np.real(np.vdot(rq, op.K @ rq) + np.vdot(rw, w))
    den = np.real(np.vdot(f, op.K @ f) + np.vdot(g, op.M @ g))
    if den == 0:
        return float(np.sqrt(max(num, 0.0)))
    return float(np.sqrt(max(num, 0.0) / den))


def _solve_real_split(lu, b: np.ndarray) -> np.ndarray:
    if np.iscomplexobj(b):
        return lu.solve(np.ascontiguousarray(b.real)) + 1j * lu.solve(np.ascontiguousarray(b.imag))
    return lu.solve(b)


def solve_resolvent(op: DiscreteOperator, lam: float, f: np.ndarray, g: np.ndarray,
                    check: bool = True) -> State:
    """Solve (i lam - A)(q, p) = (f, g).

    p = i lam q - f and (-lam^2 M + i lam D + K) q = M g + i lam M f + D f.
    """
    f = np.asarray(f)
    g = np.asarray(g)
    if f.shape != (op.n,) or g.shape != (op.n,):
        raise ValueError("forcing dimensions do not match the operator")
    S = (-lam * lam) * op.M + (1j * lam) * op.D + op.K
    rhs = op.M @ g + 1j * lam * (op.M @ f) + op.D @ f
    S = S.tocsc().astype(complex)
    rhs = rhs.astype(complex)
    try:
        lu = spla.splu(S)
    except RuntimeError as exc:
        raise ResolventError(f"singular resolvent system at lambda={lam}") from exc
    q = lu.solve(rhs)
    # refinement against the extended-precision residual; near resonances
    # and on fine beam meshes the double-precision one is pure round-off
    for _ in range(3):
        p = 1j * lam * q - f
        q = q - lu.solve(_weak_residual(op, lam, q, p, g))
    p = 1j * lam * q - f
    x = State(q, p)
    if check and (np.any(f) or np.any(g)):
        r = resolvent_residual(op, lam, x, f, g)
        if not r <= 1e-10:
            raise ResolventError(f"resolvent residual {r:.3e} at lambda={lam}")
    return x


# --- resolvent norm ---------------------------------------------------------

@dataclass(frozen=True)
class ResolventSample:
    lam: float
    norm: float
    bt_value: float
    resolved: bool
    converged: bool = True


def resolvent_norm(op: DiscreteOperator, lam: float, tol: float = 1e-3,
                   maxiter: int = 500, seed: int = 0) -> ResolventSample:
    """||(i lam - A_h)^{-1}|| in the energy norm.

    The largest eigenvalue of R^# R is found with Arnoldi (scipy ARPACK); if
    that fails to converge, plain power iteration supplies a lower bound and
    the sample is flagged unconverged.
    """
    n2 = 2 * op.n
    E = op.energy_matrix
    T = (1j * lam * E - op.skew_matrix).tocsc().astype(complex)
    try:
        lu = spla.splu(T)
    except RuntimeError as exc:
        raise ResolventError(f"i*{lam} is numerically an eigenvalue") from exc

    def rsr(x):
        y = lu.solve(np.asarray(E @ x, complex).ravel())
        return lu.solve(np.asarray(E @ y, complex), trans="H")

    op_rsr = spla.LinearOperator((n2, n2), matvec=rsr, dtype=complex)
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(n2) + 1j * rng.standard_normal(n2)
    converged = True
    try:
        mu = spla.eigs(op_rsr, k=1, which="LM", v0=v0, tol=tol * 1e-2,
                       maxiter=maxiter, return_eigenvectors=False)
        mu = float(abs(mu[0]))
    except spla.ArpackNoConvergence:
        converged = False
        mu = _power_lower_bound(rsr, E, v0, maxiter)
    norm = float(np.sqrt(mu))
    bt = norm / abs(lam) if lam != 0 else float("inf")
    return ResolventSample(float(lam), norm, bt, abs(lam) <= op.resolution_limit(), converged)


def _power_lower_bound(rsr: Callable, E: sp.spmatrix, v: np.ndarray, iters: int) -> float:
    # E-Rayleigh quotient of the E-self-adjoint R^# R: always a lower bound
    mu = 0.0
    for _ in range(iters):
        w = rsr(v)
        mu = float(np.real(np.vdot(v, E @ w)) / np.real(np.vdot(v, E @ v)))
        v = w / np.sqrt(np.real(np.vdot(w, E @ w)))
    return mu


# --- blow-up sequences ------------------------------------------------------

def lambda_sequence(model: ModelKind, n: int, geom: Geometry) -> float:
    """Frequencies along which the resolvent is driven to blow up.

    Wave-damped model: 4 n^2 pi^2 / (L - l)^2; beam-damped model: 2 n pi / (L - l).
    """
    if n < 1:
        raise ValueError(f"sequence index must be >= 1, got {n}")
    span = geom.L - geom.l
    if ModelKind(model) is ModelKind.WAVE_DAMPED:
        return 4.0 * n * n * np.pi**2 / span**2
    return 2.0 * n * np.pi / span


@dataclass
class Forcing:
    """Forcing (f, g) as functions together with their discrete representatives.

    ``f`` and ``g`` are nodal interpolants restricted to the free DOFs.
    ``norm_sq`` is the energy of the interpolants over the support elements,
    int |f_h'|^2 + int |g_h|^2, which converges to the exact value at second
    order.  ``admissible`` is False when the interpolant violates an essential
    condition or jumps where the energy space is continuous; the free-DOF
    vector then differs from the interpolant by a boundary layer.
    """

    lam: float
    support: tuple[float, float]
    f_func: Callable
    g_func: Callable
    f: np.ndarray
    g: np.ndarray
    norm_sq: float
    admissible: bool

    @property
    def norm(self) -> float:
        return float(np.sqrt(self.norm_sq))


def forcing_closed_form(model: ModelKind, lam: float, geom: Geometry) -> float:
    """Exact int (|f'|^2 + |g|^2) for the sequence forcings.

    Both terms integrate cos^2(lam (x - alpha)) over the support (a, b):
    (b - a) + [sin(2 lam (b - alpha)) - sin(2 lam (a - alpha))] / (2 lam).
    """
    a, b = forcing_support(ModelKind(model), geom)
    al = geom.alpha
    return (b - a) + (np.sin(2 * lam * (b - al)) - np.sin(2 * lam * (a - al))) / (2 * lam)


def forcing_support(model: ModelKind, geom: Geometry) -> tuple[float, float]:
    """(0, alpha) for the wave-damped model, (l, L) for the beam-damped one."""
    if ModelKind(model) is ModelKind.WAVE_DAMPED:
        return 0.0, geom.alpha
    return geom.l, geom.L


def probe_forcing(model: ModelKind, lam: float, op: DiscreteOperator) -> Forcing:
    """f = sin(lam (x - alpha)) / lam and g = cos(lam (x - alpha)) on the support, 0 elsewhere."""
    model = ModelKind(model)
    if not lam > 0:
        raise ValueError("lambda must be positive")
    geom = op.grid.geometry
    al = geom.alpha
    a, b = forcing_support(model, geom)

    def f_raw(xx):
        return np.sin(lam * (np.asarray(xx, float) - al)) / lam

    def g_raw(xx):
        return np.cos(lam * (np.asarray(xx, float) - al))

    def inside(xx):
        xx = np.asarray(xx, float)
        return (xx >= a) & (xx <= b)

    def f_func(xx):
        return np.where(inside(xx), f_raw(xx), 0.0)

    def g_func(xx):
        return np.where(inside(xx), g_raw(xx), 0.0)

    dm = op.dof_map
    x = op.grid.node_coords
    elems = np.flatnonzero((x[:-1] >= a) & (x[1:] <= b))
    if np.any(dm.element_is_beam[elems]):
        raise AssertionError("forcing support must lie on a wave segment")
    h = x[elems + 1] - x[elems]
    f0, f1 = f_raw(x[elems]), f_raw(x[elems + 1])
    g0, g1 = g_raw(x[elems]), g_raw(x[elems + 1])
    # exact P1 element energies of the interpolants
    norm_sq = float(np.sum((f1 - f0) ** 2 / h + h / 3 * (g0 * g0 + g0 * g1 + g1 * g1)))

    fv = np.zeros(dm.n_full)
    gv = np.zeros(dm.n_full)
    fv[dm.value_dof] = f_func(x)
    gv[dm.value_dof] = g_func(x)
    f = dm.restrict(fv)
    g = dm.restrict(gv)
    # f enters the displacement space: it must vanish on eliminated DOFs and
    # be continuous at the support ends that lie inside the domain
    scale = 1.0 / lam
    fixed = np.setdiff1d(np.arange(dm.n_full), dm.free)
    ok = np.all(np.abs(fv[fixed]) <= 1e-9 * scale)
    for end in (a, b):
        if 0.0 < end < geom.L:
            ok &= abs(float(f_raw(end))) <= 1e-9 * scale
    return Forcing(float(lam), (a, b), f_func, g_func, f, g, norm_sq, bool(ok))


@dataclass(frozen=True)
class BlowupProbe:
    model: ModelKind
    n: int
    lambda_n: float
    forcing_norm: float
    response_norm: float
    admissible: bool = True

    @property
    def gain(self) -> float:
        return self.response_norm / self.forcing_norm


def state_norm(op: DiscreteOperator, x: State) -> float:
    return float(np.sqrt(np.real(np.vdot(x.q, op.K @ x.q) + np.vdot(x.p, op.M @ x.p))))


@dataclass
class ProbeResult:
    probes: list[BlowupProbe]
    truncated: bool
    requested: int

    @property
    def gains(self) -> np.ndarray:
        return np.array([p.gain for p in self.probes])

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "lambda_n", "gain"])
            for p in self.probes:
                w.writerow([p.n, f"{p.lambda_n:.17g}", f"{p.gain:.17g}"])
        return path


def blowup_probe(op: DiscreteOperator, n_max: int) -> ProbeResult:
    """Resolvent gains ||(i lam_n - A)^{-1} F_n|| / ||F_n|| for n = 1..n_max.

    Indices whose frequency exceeds the mesh resolution limit are dropped
    with a warning.  Forcings that are not in the discrete energy space also
    draw a warning; their gains include a boundary-layer response.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    geom = op.grid.geometry
    limit = op.resolution_limit()
    probes = []
    truncated = False
    for n in range(1, n_max + 1):
        lam = lambda_sequence(op.model, n, geom)
        if lam > limit:
            truncated = True
            warnings.warn(
                f"blow-up probe truncated at n={n - 1}: lambda_{n}={lam:.4g} exceeds "
                f"resolution limit {limit:.4g}", RuntimeWarning, stacklevel=2,
            )
            break
        F = probe_forcing(op.model, lam, op)
        if not F.admissible:
            warnings.warn(f"forcing at n={n} violates the energy-space conditions",
                          RuntimeWarning, stacklevel=2)
        x = solve_resolvent(op, lam, F.f, F.g)
        probes.append(BlowupProbe(op.model, n, lam, F.norm, state_norm(op, x), F.admissible))
    return ProbeResult(probes, truncated, n_max)


# --- Borichev-Tomilov scan --------------------------------------------------

@dataclass
class ScanResult:
    samples: list[ResolventSample]

    @property
    def max_bt(self) -> float:
        vals = [s.bt_value for s in self.samples if s.resolved]
        return float(max(vals)) if vals else float("nan")

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lambda", "norm", "bt_value", "resolved"])
            for s in self.samples:
                w.writerow([f"{s.lam:.17g}", f"{s.norm:.17g}", f"{s.bt_value:.17g}",
                            int(s.resolved)])
        return path


def bt_scan(op: DiscreteOperator, lambdas, workers: int = 1, seed: int = 0,
            tol: float = 1e-3, refine_peaks: bool = False) -> ScanResult:
    """Sample |lam|^{-1} ||(i lam - A_h)^{-1}|| on a sorted grid of positive lam.

    Resonance peaks are narrow when the nearby eigenvalue is weakly damped, so
    a fixed grid can miss them by a wide margin.  With ``refine_peaks`` every
    interior local maximum of the sampled values is polished by a bounded
    scalar search between its neighbours, and the polished samples are
    merged into the result.
    """
    lambdas = np.asarray(lambdas, float)
    if lambdas.ndim != 1 or lambdas.size == 0:
        raise ValueError("need a non-empty 1-D grid")
    if np.any(lambdas <= 0) or np.any(np.diff(lambdas) < 0):
        raise ValueError("grid values must be positive and sorted")

    def one(args):
        k, lam = args
        return resolvent_norm(op, lam, tol=tol, seed=seed + k)

    jobs = list(enumerate(lambdas))
    if workers > 1:
        # build shared cached matrices before threads touch the operator
        op.mass_lu, op.energy_matrix, op.skew_matrix
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(one, jobs))
    else:
        samples = [one(j) for j in jobs]
    if refine_peaks and lambdas.size >= 3:
        samples = _polish_peaks(op, lambdas, samples, tol, seed)
    return ScanResult(samples)


def _polish_peaks(op, lambdas, samples, tol, seed):
    bt = np.array([s.bt_value for s in samples])
    extra = []
    for k in range(1, lambdas.size - 1):
        if not (bt[k] >= bt[k - 1] and bt[k] >= bt[k + 1]):
            continue
        found = {}

        def neg(lam):
            smp = resolvent_norm(op, lam, tol=tol, seed=seed + k)
            found[lam] = smp
            return -smp.bt_value

        minimize_scalar(neg, bounds=(lambdas[k - 1], lambdas[k + 1]), method="bounded",
                        options={"xatol": 1e-10 * lambdas[k]})
        extra.append(max(found.values(), key=lambda s: s.bt_value))
    merged = sorted(list(samples) + extra, key=lambda s: s.lam)
    return merged


def dense_resolvent_norm(op: DiscreteOperator, lam: float) -> float:
    """Oracle: 1 / sigma_min(i lam - A_hat) from a dense SVD in energy coordinates."""
    from .spectral import energy_linearization

    A = energy_linearization(op).A
    s = np.linalg.svd(1j * lam * np.eye(A.shape[0]) - A, compute_uv=False)
    return float(1.0 / s[-1])
