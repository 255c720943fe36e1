import warnings

import numpy as np
import pytest

from kvbeamwave.assembly import ModelKind
from kvbeamwave.mesh import Geometry
from kvbeamwave.resolvent import (
    bt_scan, blowup_probe, dense_resolvent_norm, forcing_closed_form, lambda_sequence,
    probe_forcing, resolvent_norm, resolvent_residual, solve_resolvent, state_norm,
)
from kvbeamwave.spectral import eigensolve
from kvbeamwave.time_evolution import State

from conftest import GEOM, make_op


def test_solve_matches_dense_inverse(model, rng):
    op = make_op(model, 4, 2)
    assert op.n <= 10
    A = op.first_order_form().dense()
    for lam in (0.0, 1.3, 7.0):
        f = rng.standard_normal(op.n) + 1j * rng.standard_normal(op.n)
        g = rng.standard_normal(op.n)
        ref = np.linalg.solve(1j * lam * np.eye(2 * op.n) - A, np.concatenate([f, g]))
        x = solve_resolvent(op, lam, f, g)
        np.testing.assert_allclose(x.stacked, ref, rtol=1e-10, atol=1e-10 * abs(ref).max())


def test_zero_forcing_gives_zero(small_op):
    z = np.zeros(small_op.n)
    x = solve_resolvent(small_op, 3.0, z, z)
    assert not np.any(x.q) and not np.any(x.p)


def test_static_limit(small_op, rng):
    g = rng.standard_normal(small_op.n)
    x = solve_resolvent(small_op, 0.0, np.zeros(small_op.n), g)
    q = np.linalg.solve(small_op.K.toarray(), small_op.M @ g)
    np.testing.assert_allclose(x.q, q, rtol=1e-10)
    np.testing.assert_allclose(x.p, 0.0, atol=1e-15)


def test_residual_contract(model, rng):
    op = make_op(model, 32, 32)
    for lam in (0.5, 12.0, 60.0):
        f = rng.standard_normal(op.n)
        g = rng.standard_normal(op.n)
        x = solve_resolvent(op, lam, f, g)
        assert resolvent_residual(op, lam, x, f, g) <= 1e-10


def test_residual_norms_agree_on_coarse_mesh(small_op, rng):
    f, g = rng.standard_normal(small_op.n), rng.standard_normal(small_op.n)
    x = solve_resolvent(small_op, 2.0, f, g)
    bad = State(x.q * (1 + 1e-3), x.p)
    weak = resolvent_residual(small_op, 2.0, bad, f, g)
    strong = resolvent_residual(small_op, 2.0, bad, f, g, norm="energy")
    assert 0 < weak <= strong
    with pytest.raises(ValueError):
        resolvent_residual(small_op, 2.0, bad, f, g, norm="l2")


def test_dimension_check(small_op):
    with pytest.raises(ValueError):
        solve_resolvent(small_op, 1.0, np.zeros(2), np.zeros(2))


@pytest.mark.parametrize("lam", [0.0, 2.0, 9.5])
def test_norm_matches_dense_svd(model, lam):
    op = make_op(model, 8, 6)
    s = resolvent_norm(op, lam)
    ref = dense_resolvent_norm(op, lam)
    assert s.converged
    assert s.norm == pytest.approx(ref, rel=1e-3)
    if lam:
        assert s.bt_value == pytest.approx(s.norm / lam)


def test_norm_bounded_below_by_spectral_distance(model):
    op = make_op(model, 10, 10)
    ev = eigensolve(op).eigenvalues
    for lam in (3.0, 11.0, 25.0):
        dist = np.abs(1j * lam - ev).min()
        assert resolvent_norm(op, lam).norm >= (1 - 1e-3) / dist


def test_peak_at_eigenfrequency_exceeds_midpoint(model):
    op = make_op(model, 10, 10)
    ev = eigensolve(op).eigenvalues
    up = np.sort(ev[ev.imag > 1].imag)
    # pick two neighbours whose eigenvalues are the least damped of the range
    lo, hi = up[2], up[3]
    at = max(resolvent_norm(op, lo).norm, resolvent_norm(op, hi).norm)
    mid = resolvent_norm(op, 0.5 * (lo + hi)).norm
    assert mid < at


def test_unresolved_flag():
    op = make_op(ModelKind.BEAM_DAMPED, 8, 8)
    assert not resolvent_norm(op, 2 * op.resolution_limit()).resolved
    assert resolvent_norm(op, 0.5 * op.resolution_limit()).resolved


def test_lambda_sequence():
    g = Geometry(1.0, 2.0, 0.25, 0.75)
    assert lambda_sequence(ModelKind.WAVE_DAMPED, 1, g) == pytest.approx(4 * np.pi**2)
    assert lambda_sequence(ModelKind.BEAM_DAMPED, 1, g) == pytest.approx(2 * np.pi)
    assert lambda_sequence(ModelKind.WAVE_DAMPED, 2, g) / lambda_sequence(ModelKind.WAVE_DAMPED, 1, g) == 4
    g3 = Geometry(1.0, 3.0, 0.25, 0.75)
    assert lambda_sequence(ModelKind.BEAM_DAMPED, 3, g3) == pytest.approx(3 * np.pi)
    with pytest.raises(ValueError):
        lambda_sequence(ModelKind.BEAM_DAMPED, 0, g)


def test_forcing_profiles(model):
    op = make_op(model, 32, 32)
    lam = lambda_sequence(model, 1, GEOM)
    F = probe_forcing(model, lam, op)
    a, b = F.support
    if model is ModelKind.WAVE_DAMPED:
        assert (a, b) == (0.0, GEOM.alpha)
        assert F.f_func(GEOM.alpha - 1e-14) == pytest.approx(0.0, abs=1e-12)
        assert F.g_func(GEOM.alpha - 1e-14) == pytest.approx(1.0)
        assert F.f_func(0.5) == 0.0 and F.g_func(0.5) == 0.0
    else:
        assert (a, b) == (GEOM.l, GEOM.L)
        assert F.f_func(0.5) == 0.0
    with pytest.raises(ValueError):
        probe_forcing(model, 0.0, op)


def test_forcing_norm_converges_to_closed_form(model):
    lam = lambda_sequence(model, 2, GEOM)
    exact = forcing_closed_form(model, lam, GEOM)
    errs = []
    # the wave-damped frequency is 25x larger; keep lam * h in the asymptotic range
    base = 512 if model is ModelKind.WAVE_DAMPED else 64
    for n in (base, 2 * base, 4 * base):
        op = make_op(model, n, n)
        errs.append(abs(probe_forcing(model, lam, op).norm_sq - exact))
    # second order in the mesh size
    assert errs[0] / errs[1] == pytest.approx(4, rel=0.1)
    assert errs[1] / errs[2] == pytest.approx(4, rel=0.1)


def test_printed_limit_formula_differs_from_integral():
    # int_0^alpha cos^2(lam (x - alpha)) dx carries sin(2 alpha lam) / (4 lam) per term,
    # so the pair sums to alpha + sin(2 alpha lam) / (2 lam), not alpha + sin(2 alpha lam) / lam
    g = GEOM
    lam = lambda_sequence(ModelKind.WAVE_DAMPED, 1, g)
    xs = np.linspace(0, g.alpha, 200001)
    integrand = 2 * np.cos(lam * (xs - g.alpha)) ** 2
    numeric = np.trapezoid(integrand, xs)
    exact = forcing_closed_form(ModelKind.WAVE_DAMPED, lam, g)
    printed = g.alpha + np.sin(2 * g.alpha * lam) / lam
    assert numeric == pytest.approx(exact, rel=1e-8)
    assert abs(printed - exact) / exact > 1e-2


def test_admissibility_flag():
    # f(0) = -sin(lam alpha) / lam vanishes exactly when lam alpha is a multiple of pi
    good = Geometry(1.0, 2.0, 1 / (4 * np.pi), 0.6)
    op = make_op(ModelKind.WAVE_DAMPED, 64, 16, geom=good)
    assert probe_forcing(ModelKind.WAVE_DAMPED, lambda_sequence(ModelKind.WAVE_DAMPED, 1, good), op).admissible
    op = make_op(ModelKind.WAVE_DAMPED, 64, 16)
    assert not probe_forcing(ModelKind.WAVE_DAMPED, lambda_sequence(ModelKind.WAVE_DAMPED, 1, GEOM), op).admissible
    # beam-damped: f must vanish at l and L
    good = Geometry(1.0, 2.0, 0.5, 0.75)
    op = make_op(ModelKind.BEAM_DAMPED, 16, 64, geom=good)
    for n in (1, 2, 3):
        assert probe_forcing(ModelKind.BEAM_DAMPED, lambda_sequence(ModelKind.BEAM_DAMPED, n, good), op).admissible


def test_blowup_probe_truncates_with_warning(tmp_path):
    op = make_op(ModelKind.BEAM_DAMPED, 16, 16)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = blowup_probe(op, 50)
    assert res.truncated
    assert any("truncated" in str(w.message) for w in caught)
    assert len(res.probes) < 50
    assert all(p.lambda_n <= op.resolution_limit() for p in res.probes)
    assert np.all(res.gains > 0)
    lines = res.to_csv(tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "n,lambda_n,gain"
    assert len(lines) == len(res.probes) + 1
    with pytest.raises(ValueError):
        blowup_probe(op, 0)


def test_probe_gain_definition():
    geom = Geometry(1.0, 2.0, 0.5, 0.75)
    op = make_op(ModelKind.BEAM_DAMPED, 16, 64, geom=geom)
    res = blowup_probe(op, 2)
    p = res.probes[1]
    F = probe_forcing(ModelKind.BEAM_DAMPED, p.lambda_n, op)
    x = solve_resolvent(op, p.lambda_n, F.f, F.g)
    assert p.gain == pytest.approx(state_norm(op, x) / F.norm)


def test_bt_scan_properties(tmp_path):
    op = make_op(ModelKind.BEAM_DAMPED, 12, 12)
    single = bt_scan(op, [4.0])
    assert single.max_bt == single.samples[0].bt_value
    grid = np.linspace(2.0, 30.0, 15)
    full = bt_scan(op, grid)
    sub = bt_scan(op, grid[::3])
    assert full.max_bt >= sub.max_bt
    polished = bt_scan(op, grid, refine_peaks=True)
    assert polished.max_bt >= full.max_bt
    threaded = bt_scan(op, grid, workers=3)
    np.testing.assert_allclose([s.norm for s in threaded.samples],
                               [s.norm for s in full.samples], rtol=1e-6)
    with pytest.raises(ValueError):
        bt_scan(op, [3.0, 2.0])
    with pytest.raises(ValueError):
        bt_scan(op, [-1.0, 2.0])
    lines = full.to_csv(tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "lambda,norm,bt_value,resolved"
    assert len(lines) == grid.size + 1


def _increasing_run(gains):
    k = 1
    while k < gains.size and gains[k] > gains[k - 1]:
        k += 1
    return k


def test_refinement_extends_increasing_gains():
    # on this geometry sin(lam_n alpha) = 0, so the forcing vanishes at x = 0
    geom = Geometry(1.0, 2.0, 1 / (4 * np.pi), 0.6)
    runs = []
    for n in (4096, 8192, 16384):
        op = make_op(ModelKind.WAVE_DAMPED, n, 128, geom=geom)
        runs.append(_increasing_run(blowup_probe(op, 6).gains))
    assert runs[0] >= 3
    assert runs[0] < runs[1] < runs[2]
