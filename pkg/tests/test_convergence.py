"""Mesh convergence of decoupled segment frequencies against closed forms."""

import numpy as np
import pytest
import scipy.linalg as sla
import scipy.optimize as so

from kvbeamwave.assembly import ModelKind
from kvbeamwave.mesh import CompositeGrid

from conftest import GEOM, make_op

SPAN = GEOM.L - GEOM.l


def segment_frequencies(model, n, count):
    op = make_op(model, n, n, validation=True)
    idx = op.dof_map.segment_dofs(op.grid, CompositeGrid.RIGHT)
    K = op.K[idx][:, idx].toarray()
    M = op.M[idx][:, idx].toarray()
    return np.sqrt(sla.eigh(K, M, eigvals_only=True, subset_by_index=[0, count - 1]))


def beam_roots(count):
    brackets = [(4, 5), (7, 8), (10.5, 11.5), (14, 14.5)][:count]
    return np.array([so.brentq(lambda k: np.cosh(k) * np.cos(k) - 1, a, b) for a, b in brackets])


def observed_orders(errs):
    errs = np.asarray(errs)
    return np.log2(errs[:-1] / errs[1:])


def test_wave_segment_second_order():
    exact = np.arange(1, 4) * np.pi / SPAN
    errs = [np.abs(segment_frequencies(ModelKind.BEAM_DAMPED, n, 3) - exact) / exact
            for n in (8, 16, 32, 64)]
    np.testing.assert_allclose(observed_orders(errs), 2.0, atol=0.1)


def test_beam_segment_fourth_order():
    exact = (beam_roots(3) / SPAN) ** 2
    errs = [np.abs(segment_frequencies(ModelKind.WAVE_DAMPED, n, 3) - exact) / exact
            for n in (8, 16, 32)]
    np.testing.assert_allclose(observed_orders(errs), 4.0, atol=0.3)


def test_validation_mode_decouples_segments(model):
    op = make_op(model, 8, 8, validation=True)
    left = set(op.dof_map.segment_dofs(op.grid, CompositeGrid.LEFT))
    right = set(op.dof_map.segment_dofs(op.grid, CompositeGrid.RIGHT))
    assert not left & right
    assert len(left) + len(right) == op.n


@pytest.mark.parametrize("n", [8, 16])
def test_discrete_frequencies_lie_above_exact(n):
    # conforming Rayleigh-Ritz approximations are upper bounds
    exact = np.arange(1, 4) * np.pi / SPAN
    assert np.all(segment_frequencies(ModelKind.BEAM_DAMPED, n, 3) >= exact)
    exact = (beam_roots(3) / SPAN) ** 2
    assert np.all(segment_frequencies(ModelKind.WAVE_DAMPED, n, 3) >= exact)
