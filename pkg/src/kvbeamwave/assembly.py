"""Finite element assembly of the coupled beam/wave transmission models.

Wave segments use piecewise-linear elements (one value DOF per node), beam
segments C1 Hermite cubics (value and slope per node).  Essential
conditions are enforced by dropping DOFs; the interface value is one shared
DOF, so the force-balance condition at x = l is natural and needs no extra
terms.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .mesh import CompositeGrid, GeometryError


class AssemblyError(ValueError):
    pass


class ModelKind(enum.Enum):
    # damped wave on (0, l), undamped beam on (l, L)
    WAVE_DAMPED = "wave_damped"
    # damped beam on (0, l), undamped wave on (l, L)
    BEAM_DAMPED = "beam_damped"

    @property
    def left_is_beam(self) -> bool:
        return self is ModelKind.BEAM_DAMPED


@dataclass(frozen=True)
class DampingCoefficient:
    """Kelvin-Voigt coefficient, zero outside ``support``.

    Either a constant ``value`` or a sampled ``table`` of (x, value) rows,
    linearly interpolated.  A constant of exactly 0 switches damping off.
    """

    support: tuple[float, float]
    value: float | None = None
    table: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if (self.value is None) == (self.table is None):
            raise AssemblyError("give exactly one of value or table")
        if self.value is not None and self.value < 0:
            raise AssemblyError(f"damping coefficient must be >= 0, got {self.value}")
        if self.table is not None:
            arr = np.asarray(self.table, float)
            if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
                raise AssemblyError("table must be a list of (x, value) pairs")
            if np.any(np.diff(arr[:, 0]) <= 0):
                raise AssemblyError("table abscissae must increase")
            if np.any(arr[:, 1] <= 0):
                raise AssemblyError("sampled coefficient must be positive on its support")

    @classmethod
    def constant(cls, value: float, support: tuple[float, float]) -> "DampingCoefficient":
        return cls(support=tuple(support), value=float(value))

    @property
    def is_constant(self) -> bool:
        return self.value is not None

    def __call__(self, x):
        x = np.asarray(x, float)
        a, b = self.support
        inside = (x >= a) & (x <= b)
        if self.is_constant:
            vals = np.full_like(x, self.value)
        else:
            arr = np.asarray(self.table, float)
            vals = np.interp(x, arr[:, 0], arr[:, 1])
        return np.where(inside, vals, 0.0)


# --- element matrices -------------------------------------------------------

def linear_stiffness(h: float) -> np.ndarray:
    return np.array([[1.0, -1.0], [-1.0, 1.0]]) / h


def linear_mass(h: float) -> np.ndarray:
    return np.array([[2.0, 1.0], [1.0, 2.0]]) * h / 6.0


def hermite_stiffness(h: float) -> np.ndarray:
    """Bending matrix int phi_i'' phi_j'' for DOFs (v0, s0, v1, s1)."""
    return np.array([
        [12.0, 6 * h, -12.0, 6 * h],
        [6 * h, 4 * h * h, -6 * h, 2 * h * h],
        [-12.0, -6 * h, 12.0, -6 * h],
        [6 * h, 2 * h * h, -6 * h, 4 * h * h],
    ]) / h**3


def hermite_mass(h: float) -> np.ndarray:
    return np.array([
        [156.0, 22 * h, 54.0, -13 * h],
        [22 * h, 4 * h * h, 13 * h, -3 * h * h],
        [54.0, 13 * h, 156.0, -22 * h],
        [-13 * h, -3 * h * h, -22 * h, 4 * h * h],
    ]) * h / 420.0


_GAUSS3_PTS = np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)])
_GAUSS3_WTS = np.array([5.0, 8.0, 5.0]) / 9.0


def gauss3(x0: float, x1: float) -> tuple[np.ndarray, np.ndarray]:
    """Three-point Gauss nodes and weights on [x0, x1]."""
    h = x1 - x0
    return x0 + 0.5 * h * (_GAUSS3_PTS + 1.0), 0.5 * h * _GAUSS3_WTS


def linear_shape(xi: np.ndarray, h: float):
    """P1 values and first derivatives at reference points xi in [0, 1]."""
    n = np.stack([1 - xi, xi])
    dn = np.stack([-np.ones_like(xi), np.ones_like(xi)]) / h
    return n, dn


def hermite_shape(xi: np.ndarray, h: float):
    """Hermite cubic values, first and second derivatives at xi in [0, 1]."""
    n = np.stack([
        1 - 3 * xi**2 + 2 * xi**3,
        h * (xi - 2 * xi**2 + xi**3),
        3 * xi**2 - 2 * xi**3,
        h * (-xi**2 + xi**3),
    ])
    dn = np.stack([
        (-6 * xi + 6 * xi**2) / h,
        1 - 4 * xi + 3 * xi**2,
        (6 * xi - 6 * xi**2) / h,
        -2 * xi + 3 * xi**2,
    ])
    d2n = np.stack([
        (-6 + 12 * xi) / h**2,
        (-4 + 6 * xi) / h,
        (6 - 12 * xi) / h**2,
        (-2 + 6 * xi) / h,
    ])
    return n, dn, d2n


def _sampled_damping(coeff: DampingCoefficient, x0: float, x1: float, beam: bool) -> np.ndarray:
    h = x1 - x0
    xq, wq = gauss3(x0, x1)
    cq = coeff(xq) * wq
    xi = (xq - x0) / h
    if beam:
        _, _, d = hermite_shape(xi, h)
    else:
        _, d = linear_shape(xi, h)
    return (d * cq) @ d.T


# --- DOF bookkeeping --------------------------------------------------------

@dataclass(eq=False)
class DofMap:
    """Map between full (unconstrained) DOFs and the free DOF vector.

    ``value_dof[i]`` / ``slope_dof[i]`` give the full index of the value and
    slope DOF of node i (-1 if the node has no such DOF).  ``free`` lists the
    kept full DOFs; ``to_free[j]`` is the position of full DOF j in the free
    vector or -1 if eliminated.
    """

    value_dof: np.ndarray
    slope_dof: np.ndarray
    n_full: int
    free: np.ndarray
    to_free: np.ndarray
    element_dofs: list[np.ndarray]
    element_is_beam: np.ndarray

    @property
    def n_free(self) -> int:
        return self.free.size

    def expand(self, vec: np.ndarray) -> np.ndarray:
        """Free vector -> full vector with zeros at eliminated DOFs."""
        full = np.zeros(self.n_full, dtype=np.result_type(vec, float))
        full[self.free] = vec
        return full

    def restrict(self, full: np.ndarray) -> np.ndarray:
        return np.asarray(full)[self.free]

    def nodal_values(self, vec: np.ndarray) -> np.ndarray:
        """Displacement at every node (the shared interface value included)."""
        return self.expand(vec)[self.value_dof]

    def segment_dofs(self, grid: CompositeGrid, segment: int) -> np.ndarray:
        """Free DOF indices touched by elements of one segment."""
        idx = np.unique(np.concatenate([self.element_dofs[e] for e in grid.elements(segment)]))
        idx = self.to_free[idx]
        return idx[idx >= 0]


def build_dofmap(model: ModelKind, grid: CompositeGrid, validation: bool = False) -> DofMap:
    n_nodes = grid.n_nodes
    il = grid.interface_index
    last = n_nodes - 1
    value_dof = np.arange(n_nodes)
    slope_dof = np.full(n_nodes, -1)
    beam_nodes = range(0, il + 1) if model.left_is_beam else range(il, n_nodes)
    nxt = n_nodes
    for i in beam_nodes:
        slope_dof[i] = nxt
        nxt += 1
    n_full = nxt

    fixed = set()
    if model is ModelKind.WAVE_DAMPED:
        # u1(0) = 0, u2(L) = u2'(L) = 0, u2'(l) = 0
        fixed |= {value_dof[0], value_dof[last], slope_dof[last], slope_dof[il]}
    else:
        # w1(0) = w1'(0) = 0, w1'(l) = 0, w2(L) = 0
        fixed |= {value_dof[0], slope_dof[0], slope_dof[il], value_dof[last]}
    if validation:
        # coupling replaced by a homogeneous Dirichlet condition at x = l
        fixed.add(value_dof[il])
    free = np.array(sorted(set(range(n_full)) - fixed))
    to_free = np.full(n_full, -1)
    to_free[free] = np.arange(free.size)

    element_dofs = []
    is_beam = np.zeros(grid.n_elements, bool)
    for e in range(grid.n_elements):
        left_seg = grid.segment_tags[e] == CompositeGrid.LEFT
        beam = left_seg == model.left_is_beam
        is_beam[e] = beam
        if beam:
            element_dofs.append(np.array([value_dof[e], slope_dof[e], value_dof[e + 1], slope_dof[e + 1]]))
        else:
            element_dofs.append(np.array([value_dof[e], value_dof[e + 1]]))
    return DofMap(value_dof, slope_dof, n_full, free, to_free, element_dofs, is_beam)


# --- assembled operator -----------------------------------------------------

@dataclass(eq=False)
class DiscreteOperator:
    """Mass, stiffness and damping matrices on the free DOFs.

    ``element_M`` / ``element_K`` keep the element matrices so that energies
    can be split over element subsets.
    """

    M: sp.csr_matrix
    K: sp.csr_matrix
    D: sp.csr_matrix
    dof_map: DofMap
    model: ModelKind
    grid: CompositeGrid
    coefficient: DampingCoefficient
    validation: bool = False
    element_M: list[np.ndarray] = field(default_factory=list, repr=False)
    element_K: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def n(self) -> int:
        return self.M.shape[0]

    @cached_property
    def mass_lu(self):
        try:
            lu = splu(self.M.tocsc())
        except RuntimeError as exc:
            raise AssemblyError("mass matrix is singular") from exc
        return lu

    @cached_property
    def energy_matrix(self) -> sp.csr_matrix:
        """Block diag(K, M): the energy inner product on stacked states (q, p)."""
        return sp.block_diag([self.K, self.M], format="csr")

    @cached_property
    def skew_matrix(self) -> sp.csr_matrix:
        """J = [[0, K], [-K, -D]] so that the generator is A = E^{-1} J."""
        return sp.bmat([[None, self.K], [-self.K, -self.D]], format="csr")

    def resolution_limit(self) -> float:
        """Largest frequency resolved by both segments.

        Wave content needs lambda <= pi / (2 h); beam content has wavenumber
        sqrt(lambda), so lambda <= (pi / (2 h))**2.
        """
        g = self.grid
        left_beam = self.model.left_is_beam
        h_wave = g.max_length(CompositeGrid.RIGHT if left_beam else CompositeGrid.LEFT)
        h_beam = g.max_length(CompositeGrid.LEFT if left_beam else CompositeGrid.RIGHT)
        return min(np.pi / (2 * h_wave), (np.pi / (2 * h_beam)) ** 2)

    def first_order_form(self) -> "GeneratorAction":
        return GeneratorAction(self)

    def export_coo(self, directory: str | Path) -> list[Path]:
        """Write M, K, D as ``row col value`` text files."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for name in ("M", "K", "D"):
            mat = getattr(self, name).tocoo()
            path = directory / f"{name}.coo"
            with path.open("w") as fh:
                fh.write(f"# {mat.shape[0]} {mat.shape[1]} {mat.nnz}\n")
                for r, c, v in zip(mat.row, mat.col, mat.data):
                    fh.write(f"{r} {c} {v:.17g}\n")
            written.append(path)
        return written


class GeneratorAction:
    """Discrete generator x = (q, p) -> (p, -M^{-1}(K q + D p))."""

    def __init__(self, op: DiscreteOperator):
        self.op = op
        self.n = op.n

    def apply(self, q: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        op = self.op
        rhs = op.K @ q + op.D @ p
        if np.iscomplexobj(rhs):
            acc = -(op.mass_lu.solve(rhs.real) + 1j * op.mass_lu.solve(rhs.imag))
        else:
            acc = -op.mass_lu.solve(rhs)
        return np.array(p, copy=True), acc

    def matvec(self, x: np.ndarray) -> np.ndarray:
        q, p = x[: self.n], x[self.n:]
        return np.concatenate(self.apply(q, p))

    def dense(self) -> np.ndarray:
        """Dense generator matrix; for small systems and oracle checks only."""
        op = self.op
        minv = np.linalg.inv(op.M.toarray())
        n = self.n
        a = np.zeros((2 * n, 2 * n))
        a[:n, n:] = np.eye(n)
        a[n:, :n] = -minv @ op.K.toarray()
        a[n:, n:] = -minv @ op.D.toarray()
        return a


def _check_grid(grid: CompositeGrid, coeff: DampingCoefficient) -> None:
    g = grid.geometry
    try:
        grid.validate()
    except GeometryError as exc:
        raise AssemblyError(str(exc)) from exc
    if not np.allclose(coeff.support, (g.alpha, g.beta), rtol=0, atol=1e-14):
        raise AssemblyError(
            f"coefficient support {coeff.support} does not match "
            f"damping region ({g.alpha}, {g.beta})"
        )


def assemble(model: ModelKind, grid: CompositeGrid, coeff: DampingCoefficient,
             validation: bool = False) -> DiscreteOperator:
    """Assemble M, K, D for ``model`` with essential conditions eliminated.

    ``validation=True`` pins the interface value to zero, decoupling the two
    segments into classical standalone problems (used by convergence tests).
    """
    model = ModelKind(model)
    _check_grid(grid, coeff)
    dm = build_dofmap(model, grid, validation)
    x = grid.node_coords
    rows, cols, mv, kv, dv = [], [], [], [], []
    elem_m, elem_k = [], []
    for e in range(grid.n_elements):
        h = x[e + 1] - x[e]
        beam = dm.element_is_beam[e]
        if beam:
            me, ke = hermite_mass(h), hermite_stiffness(h)
        else:
            me, ke = linear_mass(h), linear_stiffness(h)
        if grid.damped[e] and grid.segment_tags[e] == CompositeGrid.LEFT:
            if coeff.is_constant:
                de = coeff.value * ke
            else:
                de = _sampled_damping(coeff, x[e], x[e + 1], beam)
        else:
            de = np.zeros_like(ke)
        dofs = dm.element_dofs[e]
        r, c = np.meshgrid(dofs, dofs, indexing="ij")
        rows.append(r.ravel())
        cols.append(c.ravel())
        mv.append(me.ravel())
        kv.append(ke.ravel())
        dv.append(de.ravel())
        elem_m.append(me)
        elem_k.append(ke)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    shape = (dm.n_full, dm.n_full)

    def build(vals):
        full = sp.coo_matrix((np.concatenate(vals), (rows, cols)), shape=shape).tocsr()
        return full[dm.free][:, dm.free].tocsr()

    M, K, D = build(mv), build(kv), build(dv)
    D.eliminate_zeros()
    return DiscreteOperator(M, K, D, dm, model, grid, coeff, validation, elem_m, elem_k)
