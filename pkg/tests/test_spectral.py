import numpy as np
import pytest
import scipy.linalg as sla

from kvbeamwave.assembly import ModelKind
from kvbeamwave.spectral import (
    _pairing, branch_energy_split, eigensolve, energy_linearization, equipartition_defect,
    pencil_residual, rayleigh_refine, strong_stability_check,
)

from conftest import make_op


def _match(a, b):
    # greedy nearest matching of two eigenvalue lists
    b = list(b)
    worst = 0.0
    for z in a:
        k = int(np.argmin([abs(z - w) for w in b]))
        worst = max(worst, abs(z - b.pop(k)) / max(abs(z), 1.0))
    return worst


def test_tiny_system_matches_companion_oracle(model):
    op = make_op(model, 4, 2)
    assert op.n <= 10
    ref = np.linalg.eigvals(op.first_order_form().dense())
    rep = eigensolve(op)
    assert rep.eigenvalues.size == 2 * op.n
    assert _match(rep.eigenvalues, ref) < 1e-10


def test_energy_linearization_is_similar_to_generator(small_op):
    lin = energy_linearization(small_op)
    A = small_op.first_order_form().dense()
    n = small_op.n
    T = sla.block_diag(lin.LK.T, lin.LM.T)
    np.testing.assert_allclose(lin.A @ T, T @ A, atol=1e-8 * abs(T @ A).max())
    # skew part plus negative semidefinite symmetric part
    sym = 0.5 * (lin.A + lin.A.T)
    assert np.linalg.eigvalsh(sym).max() <= 1e-10 * abs(lin.A).max()
    q, p = lin.state_from_y(lin.y_from_state(np.arange(n, dtype=float), np.ones(n)))
    np.testing.assert_allclose(q, np.arange(n), atol=1e-10)
    np.testing.assert_allclose(p, 1.0, atol=1e-10)


def test_report_invariants(model):
    op = make_op(model, 16, 16)
    rep = eigensolve(op)
    assert rep.converged
    assert np.all(rep.residuals <= 1e-8)
    assert rep.pairing_defect() < 1e-6
    assert np.all(rep.conjugacy_pairing >= 0)
    assert np.all(rep.eigenvalues.real < 0)
    for k in range(0, rep.eigenvalues.size, 7):
        lam, q = rep.eigenvalues[k], rep.modes[:, k]
        assert pencil_residual(op, lam, q) <= 1e-8


def test_sparse_path_agrees_with_dense(model):
    op = make_op(model, 16, 16)
    dense = eigensolve(op)
    shift = 30j
    sparse = eigensolve(op, count=6, shift=shift, dense_threshold=0)
    assert sparse.method == "shift-invert"
    near = dense.eigenvalues[np.argsort(np.abs(dense.eigenvalues - shift))[:6]]
    assert _match(sparse.eigenvalues, near) < 1e-9


def test_count_bounds(small_op):
    with pytest.raises(ValueError):
        eigensolve(small_op, count=0)
    with pytest.raises(ValueError):
        eigensolve(small_op, count=2 * small_op.n + 1)


def test_rayleigh_refinement_fixes_real_part(small_op):
    rep = eigensolve(small_op)
    k = int(np.argmax(np.abs(rep.eigenvalues.imag)))
    lam, q = rep.eigenvalues[k], rep.modes[:, k]
    # a perturbed estimate is pulled back onto the pencil root
    back = rayleigh_refine(small_op, lam + 1e-3, q)
    assert abs(back - lam) < 1e-8 * abs(lam)
    m = np.real(np.vdot(q, small_op.M @ q))
    d = np.real(np.vdot(q, small_op.D @ q))
    assert back.real == pytest.approx(-d / (2 * m), rel=1e-10, abs=1e-14)


def test_undamped_spectrum_on_axis(model):
    op = make_op(model, 8, 8, damping=0.0)
    rep = eigensolve(op)
    assert np.abs(rep.eigenvalues.real).max() < 1e-12 * np.abs(rep.eigenvalues).max()
    assert not strong_stability_check(rep)


def test_strong_stability_check_flags(model):
    rep = eigensolve(make_op(model, 12, 12))
    res = strong_stability_check(rep)
    assert res.passed and res.abscissa < 0 and res.n_checked == rep.resolved.sum()
    rep.resolved[:] = False
    assert not strong_stability_check(rep)


def test_equipartition_and_split(model):
    op = make_op(model, 16, 16)
    rep = eigensolve(op)
    for k in range(0, rep.eigenvalues.size, 9):
        lam, q = rep.eigenvalues[k], rep.modes[:, k]
        shares = branch_energy_split(op, q, lam)
        assert sum(shares) == pytest.approx(1.0)
        assert min(shares) >= 0
        assert 0 <= equipartition_defect(op, lam, q) <= 1
    # undamped modes satisfy exact equipartition
    op0 = make_op(model, 8, 8, damping=0.0)
    rep0 = eigensolve(op0)
    k = int(np.argmax(rep0.eigenvalues.imag))
    assert equipartition_defect(op0, rep0.eigenvalues[k], rep0.modes[:, k]) < 1e-8
    with pytest.raises(ValueError):
        equipartition_defect(op, 1j, np.zeros(op.n))


def test_pairing_helper():
    ev = np.array([-1 + 2j, -1 - 2j, -3.0, -0.5 + 1j, -0.5 - 1j])
    pair = _pairing(ev, 1e-12)
    assert list(pair) == [1, 0, 2, 4, 3]
    assert _pairing(np.array([-1 + 1j]), 1e-12)[0] == -1


def test_json_export(small_op, tmp_path):
    rep = eigensolve(small_op)
    rows = rep.to_json(small_op, tmp_path / "s.json")
    assert set(rows[0]) == {"re", "im", "residual", "left_share", "right_share",
                            "damped_share", "resolved"}
    assert (tmp_path / "s.json").exists()
    assert len(rows) == len(rep)


def test_abscissa_decreases_with_refinement():
    # the weakest-damped discrete modes move toward the axis under refinement
    for model in ModelKind:
        absc = [abs(eigensolve(make_op(model, n, n)).abscissa) for n in (16, 32, 64)]
        assert absc[0] > absc[1] > absc[2] > 0
