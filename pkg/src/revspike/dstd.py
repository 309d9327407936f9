"""Differentiable spike-time discretization (the fast training path).

Continuous spike times are spread over a coarse time grid as real-valued
"spike variables" via a piecewise-linear hat kernel.  On the grid the
membrane dynamics cost O(M * N) per neuron instead of O(N^2), and because the
hat is continuous in the spike time, gradients with respect to spike times
survive the discretization.

Grid layout: points ``T_m = m * delta_tau - t_offset`` for m = 0..M with
``t_offset`` drawn from (0, delta_tau) (0 is the degenerate fixed-offset
case).  T_0 precedes 0, so spikes near the interval start interpolate between
T_0 and T_1 just like interior spikes.  In ``rc_spike`` mode a terminal point
is pinned at the end of the accumulation interval, making the final slot
exactly ``t_offset`` wide and keeping the endpoint itself on the grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .neuron import NeuronParams, NumericOverflowError, _phi, _ttfs_candidate_vec, is_fired, sentinel_time

__all__ = [
    "GridError",
    "DstdGrid",
    "SpikeVariables",
    "build_grid",
    "discretize",
    "coefficients_fg",
    "accumulate_dstd",
    "fire_ttfs_dstd",
]


class GridError(ValueError):
    """Invalid discretization grid request."""


@dataclass(frozen=True)
class DstdGrid:
    """Discrete time points plus the derived slot geometry.

    ``points`` has M+1 entries in ttfs mode and M+2 in rc_spike mode with a
    nonzero offset (the pinned terminal point).  Slots are the intervals
    between consecutive points; slot m carries the coefficients accumulated
    through point m.
    """

    m_steps: int
    delta_tau: float
    t_offset: float
    mode: str
    span: float
    points: np.ndarray

    @property
    def n_slots(self) -> int:
        return self.points.size - 1

    @property
    def slot_starts(self) -> np.ndarray:
        """Integration start of each slot.

        Slot 0 starts at T_0 = -t_offset and keeps its full width: the hat
        kernel trades mass between T_0 and T_1 so that the slot's coefficient
        integral matches the exact one identically, which is what preserves
        the second-order error in the step width.  Truncating the slot at 0
        instead would introduce a first-order boundary bias.
        """
        return self.points[:-1]

    @property
    def slot_widths(self) -> np.ndarray:
        return np.diff(self.points)


def build_grid(
    m_steps: int,
    mode: str = "rc_spike",
    t_offset: float | None = None,
    rng: np.random.Generator | None = None,
    span: float = 1.0,
) -> DstdGrid:
    """Construct the discretization grid.

    ``t_offset=None`` draws uniformly from (0, delta_tau) using ``rng``
    (the per-minibatch random-offset policy); a float fixes it.  ``span`` is
    the covered interval length (the layer horizon), delta_tau = span / M.
    """
    if mode not in ("rc_spike", "ttfs"):
        raise GridError(f"unknown grid mode {mode!r}")
    if m_steps < 2:
        raise GridError(f"need at least 2 steps, got {m_steps}")
    if span <= 0.0:
        raise GridError("span must be positive")
    delta_tau = span / m_steps
    if t_offset is None:
        if rng is None:
            raise GridError("random offset requested but no rng given")
        t_offset = float(rng.uniform(0.0, delta_tau))
    if not 0.0 <= t_offset < delta_tau:
        raise GridError(f"t_offset {t_offset} outside [0, {delta_tau})")
    points = np.arange(m_steps + 1) * delta_tau - t_offset
    if mode == "rc_spike" and t_offset > 0.0:
        points = np.append(points, span)
    return DstdGrid(
        m_steps=m_steps,
        delta_tau=delta_tau,
        t_offset=t_offset,
        mode=mode,
        span=span,
        points=points,
    )


@dataclass(frozen=True)
class SpikeVariables:
    """Real-valued spike mass per (input, grid point) and its running sum."""

    s: np.ndarray           # (..., N, P), entries in [0, 1]
    cumulative: np.ndarray  # running sum over the point axis

    @property
    def n_points(self) -> int:
        return self.s.shape[-1]


def discretize(times: np.ndarray, grid: DstdGrid, horizon: float = None) -> SpikeVariables:
    """Spread spike times over the grid with the piecewise-linear hat kernel.

    A spike between two grid points splits its unit mass linearly between
    them (widths follow the local slot, so the rc_spike terminal slot uses
    ``t_offset``).  Spikes before the first point put full mass on point 0;
    spikes past the last point decay over one extra slot width and are
    dropped beyond it.  Sentinel (non-firing) entries produce all-zero rows.
    """
    if horizon is None:
        horizon = grid.span
    t = np.atleast_2d(np.asarray(times, dtype=float))
    squeeze = np.asarray(times).ndim == 1
    pts = grid.points
    P = pts.size
    fired = is_fired(t, horizon)

    idx = np.searchsorted(pts, t, side="right") - 1
    idx = np.clip(idx, 0, P - 1)
    left_w = pts[np.minimum(idx + 1, P - 1)] - pts[idx]
    last_w = pts[-1] - pts[-2]
    width = np.where(idx < P - 1, left_w, last_w)
    r = (t - pts[idx]) / width
    left_mass = np.clip(1.0 - r, 0.0, 1.0) * fired
    right_mass = np.where(idx < P - 1, np.clip(r, 0.0, 1.0), 0.0) * fired

    s = np.zeros(t.shape + (P,))
    np.put_along_axis(s, idx[..., None], left_mass[..., None], axis=-1)
    right_idx = np.minimum(idx + 1, P - 1)
    prev = np.take_along_axis(s, right_idx[..., None], axis=-1)
    np.put_along_axis(s, right_idx[..., None], prev + right_mass[..., None], axis=-1)

    if squeeze:
        s = s[0]
    return SpikeVariables(s=s, cumulative=np.cumsum(s, axis=-1))


def coefficients_fg(
    sv: SpikeVariables, weights: np.ndarray, params: NeuronParams
) -> tuple[np.ndarray, np.ndarray]:
    """Per-slot ODE coefficients from cumulative spike mass.

    ``weights`` is (N_out, N_in); ``sv`` covers (..., N_in, P) spike trains.
    Returns ``(f, g)`` of shape (..., N_out, n_slots): slot m uses the mass
    accumulated through grid point m.
    """
    w = np.asarray(weights, dtype=float)
    S = sv.cumulative[..., :-1]            # (..., N_in, n_slots)
    g = np.matmul(w, S)
    f = params.alpha + np.matmul(w * params.beta_of(w), S)
    return f, g


def accumulate_dstd(f: np.ndarray, g: np.ndarray, grid: DstdGrid) -> np.ndarray:
    """End-of-accumulation potential on the grid (rc_spike fast path).

    Same suffix-exponent form as the exact solver, with the grid slots in
    place of inter-spike intervals.
    """
    d = grid.slot_widths
    x = f * d
    c = np.cumsum(x, axis=-1)
    terms = g * d * _phi(x) * np.exp(-(c[..., -1:] - c))
    out = terms.sum(axis=-1)
    if not np.all(np.isfinite(out)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(out)))[0]
        raise NumericOverflowError(f"non-finite DSTD potential at index {tuple(bad)}")
    return out


def fire_ttfs_dstd(
    f: np.ndarray,
    g: np.ndarray,
    grid: DstdGrid,
    params: NeuronParams,
    horizon: float = None,
) -> np.ndarray:
    """TTFS firing times on the grid, sentinel where threshold is not reached.

    The slot-start potential is advanced by the per-slot recursion; each slot
    yields a candidate crossing (interval-start form of the log formula) that
    is accepted only when it falls inside its own slot.  Crossings beyond the
    grid end do not exist on the fast path and map to the sentinel.
    """
    if horizon is None:
        horizon = grid.span
    sen = sentinel_time(horizon)
    starts = grid.slot_starts
    widths = grid.slot_widths
    shape = f.shape[:-1]
    v = np.zeros(shape)
    out = np.full(shape, sen)
    got = np.zeros(shape, dtype=bool)
    for m in range(grid.n_slots):
        fm, gm = f[..., m], g[..., m]
        cand = _ttfs_candidate_vec(starts[m], v, fm, gm, params.v_th)
        ok = ~got & (cand > starts[m]) & (cand <= starts[m] + widths[m]) & (cand < sen)
        out = np.where(ok, cand, out)
        got |= ok
        v = v + (gm - fm * v) * widths[m] * _phi(fm * widths[m])
    return out
