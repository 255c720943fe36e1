"""Power-law fits of energy decay and graph-norm normalization of initial data.

A finite element system decays exponentially in the end (its spectral
abscissa is negative), so any polynomial regime is a transient.  The fit
window starts after a few wave-crossing times and stops where the local
log-log slope starts to steepen, which marks the onset of the exponential tail.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .assembly import DiscreteOperator
from .time_evolution import EnergyTrace, State

MIN_SAMPLES = 20


class DecayFitError(ValueError):
    pass


def _energy_norm(op: DiscreteOperator, q: np.ndarray, p: np.ndarray) -> float:
    return float(np.sqrt(np.real(np.vdot(q, op.K @ q) + np.vdot(p, op.M @ p))))


def graph_norm(op: DiscreteOperator, s: State) -> float:
    """||s|| + ||A_h s||, both in the energy norm."""
    if not (np.any(s.q) or np.any(s.p)):
        raise ValueError("graph norm of the zero state is not a normalization")
    aq, ap = op.first_order_form().apply(s.q, s.p)
    return _energy_norm(op, s.q, s.p) + _energy_norm(op, aq, ap)


def normalize_graph(op: DiscreteOperator, s: State) -> State:
    """Rescale to unit graph norm."""
    return s.scaled(1.0 / graph_norm(op, s))


def crossing_time(op: DiscreteOperator) -> float:
    """Time for a unit-speed wave to cross the whole domain."""
    return float(op.grid.geometry.L)


@dataclass
class DecayFit:
    exponent: float
    stderr: float
    window: tuple[float, float]
    r_squared: float
    graph_norm_initial: float | None = None
    # sup over the window of (1 + t) * ||x(t)|| / ||x0||_{D(A)}
    M_estimate: float | None = None
    n_points: int = 0

    def to_json(self, path: str | Path | None = None) -> dict:
        d = asdict(self)
        d["window"] = list(self.window)
        if path is not None:
            Path(path).write_text(json.dumps(d, indent=1) + "\n")
        return d


def _log_resample(t: np.ndarray, e: np.ndarray, t0: float, t1: float, per_decade: int):
    n = max(2, int(np.ceil(per_decade * np.log10(t1 / t0))) + 1)
    ts = np.geomspace(t0, t1, n)
    # interpolating in log-log coordinates is exact for a power law
    return ts, np.exp(np.interp(np.log(ts), np.log(t), np.log(e)))


def fit_power_law(trace: EnergyTrace, window: tuple[float, float],
                  graph_norm_initial: float | None = None,
                  per_decade: int = 50) -> DecayFit:
    """Least-squares slope of log E against log t on ``window``.

    The window must hold at least 20 recorded samples.  The regression runs on
    a log-uniform resampling so every decade of time carries equal weight.
    """
    t0, t1 = map(float, window)
    if not (0 < t0 < t1):
        raise DecayFitError(f"invalid window {window}")
    t, e = np.asarray(trace.times), np.asarray(trace.energy)
    if t0 < t[0] or t1 > t[-1]:
        raise DecayFitError(f"window {window} outside the trace range [{t[0]}, {t[-1]}]")
    inside = (t >= t0) & (t <= t1)
    if inside.sum() < MIN_SAMPLES:
        raise DecayFitError(f"window holds {inside.sum()} samples, need {MIN_SAMPLES}")
    lo = max(int(np.flatnonzero(inside)[0]) - 1, int(np.searchsorted(t, 0.0, side="right")))
    hi = min(int(np.flatnonzero(inside)[-1]) + 2, t.size)
    if np.any(e[lo:hi] <= 0) or not np.all(np.isfinite(e[lo:hi])):
        raise DecayFitError("energies in the window must be positive and finite")
    ts, es = _log_resample(t[lo:hi], e[lo:hi], t0, t1, per_decade)
    x, y = np.log(ts), np.log(es)
    X = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    ss_res = float(resid @ resid)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    dof = max(x.size - 2, 1)
    var = ss_res / dof / float(((x - x.mean()) ** 2).sum())
    m_est = None
    if graph_norm_initial is not None:
        tw, ew = t[inside], e[inside]
        # energy is half the squared norm
        m_est = float(np.max((1 + tw) * np.sqrt(2 * ew)) / graph_norm_initial)
    return DecayFit(
        exponent=float(-coef[1]), stderr=float(np.sqrt(var)), window=(t0, t1),
        r_squared=float(min(max(r2, 0.0), 1.0)), graph_norm_initial=graph_norm_initial,
        M_estimate=m_est, n_points=int(x.size),
    )


def local_slopes(trace: EnergyTrace, t0: float, per_decade: int = 20,
                 half_width: float = 0.1):
    """-d log E / d log t from centred differences over +-``half_width`` decades."""
    t, e = np.asarray(trace.times), np.asarray(trace.energy)
    r = 10.0 ** half_width
    t_hi = t[-1] / r
    if not (t0 * r < t_hi) or np.any(e[t >= t0 / r] <= 0):
        return np.empty(0), np.empty(0)
    centres = np.geomspace(t0, t_hi, max(2, int(per_decade * np.log10(t_hi / t0)) + 1))
    le = lambda tt: np.interp(tt, t, np.log(e))  # noqa: E731
    slopes = -(le(centres * r) - le(centres / r)) / (2 * np.log(r))
    return centres, slopes


def default_window(op: DiscreteOperator, trace: EnergyTrace, crossings: float = 5.0,
                   steepening: float = 0.5, persist: float = 0.3,
                   min_width: float = 1 / 3) -> tuple[float, float]:
    """(t_min, t_max) for the transient power-law fit.

    t_min is ``crossings`` domain-crossing times.  t_max is where the local
    slope s starts to grow faster than ``steepening * s`` per unit of log t
    and keeps doing so for ``persist`` decades: a power law has ds/dlog t = 0
    and a single exponential ds/dlog t = s.  The window spans at least
    ``min_width`` decades and falls back to the trace end.
    """
    t_min = crossings * crossing_time(op)
    t_end = float(trace.times[-1])
    if t_min >= t_end:
        raise DecayFitError(f"trace ends at {t_end}, before t_min = {t_min}")
    t_floor = min(t_min * 10 ** min_width, t_end)
    c, s = local_slopes(trace, t_min, per_decade=20, half_width=0.15)
    if c.size >= 3:
        ds = np.gradient(s, np.log(c))
        steep = (s > 0) & (ds > steepening * s)
        span = max(1, int(round(persist * 20)))
        for i in range(c.size - span + 1):
            if steep[i:i + span].all():
                return t_min, float(min(max(c[i], t_floor), t_end))
    return t_min, t_end
