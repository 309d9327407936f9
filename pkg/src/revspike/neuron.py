"""Event-exact evaluation of the reversal-potential neuron.

The membrane potential of one neuron driven by N input spikes obeys a
piecewise-linear ODE on the accumulation interval [0, 1]:

    dv/dt = -f(t) v + g(t)

where, with spikes at times ``t_j`` carrying weights ``w_j``,

    f(t) = alpha + sum_j beta_j w_j H(t - t_j)
    g(t) = sum_j w_j H(t - t_j)
    beta_j = 1/e_rev_pos  if w_j >= 0 else  1/e_rev_neg

``H`` is the Heaviside step.  Because ``e_rev_pos > 0 > e_rev_neg``, every
``beta_j w_j`` is nonnegative, so f is a nondecreasing step function.  Between
consecutive (time-sorted) spikes the coefficients are constant and the ODE has
an elementary solution; chaining the intervals gives closed forms for the
whole trace and for threshold-crossing times.

To avoid the overflowing growing-exponential form of the textbook solution,
everything here is written with *suffix* exponent sums: each interval
contributes

    g_k * d_k * phi(f_k d_k) * exp(-sum_{q>k} f_q d_q)

with ``phi(x) = (1 - exp(-x))/x`` and ``d_k`` the interval width.  All
exponents are <= 0, so nothing can overflow for valid parameters.

Spike trains are plain float arrays.  Entries at or above the non-firing
sentinel (see :func:`sentinel_time`) mean "this neuron never fired".
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NeuronParams",
    "SortedSpikes",
    "NumericOverflowError",
    "FiringDomainError",
    "sentinel_time",
    "is_fired",
    "sort_spikes",
    "accumulate_exact",
    "accumulate_exact_batch",
    "accumulate_layer_exact",
    "trace_exact",
    "fire_rc",
    "fire_ttfs",
    "fire_ttfs_layer_exact",
    "oracle_rk4",
    "oracle_rk4_batch",
]

#: Default accumulation-interval length (layer horizon).
DEFAULT_HORIZON = 1.0

#: Threshold on the exponent argument f*dt below which the linear (Taylor)
#: limit of phi is used.  phi itself is regular at 0; only the division needs
#: guarding, so an absolute threshold this small never costs accuracy.
_PHI_SMALL = 1e-12


class NumericOverflowError(FloatingPointError):
    """A non-finite intermediate appeared while chaining intervals."""

    def __init__(self, message: str, interval: int | None = None):
        super().__init__(message)
        self.interval = interval


class FiringDomainError(ValueError):
    """The non-ideal firing-phase formula was evaluated outside its domain."""


def sentinel_time(horizon: float = DEFAULT_HORIZON) -> float:
    """Reserved finite constant standing in for a neuron that never fires.

    Twice the layer horizon: later than any reportable spike, yet finite so
    downstream arithmetic (loss, noise) stays well defined.  Gradients through
    sentinel outputs are zero by convention.
    """
    return 2.0 * horizon


def is_fired(times: np.ndarray, horizon: float = DEFAULT_HORIZON) -> np.ndarray:
    """Boolean mask of entries that represent real spikes (not the sentinel)."""
    return np.asarray(times) < sentinel_time(horizon)


@dataclass(frozen=True)
class NeuronParams:
    """Reversal potentials, leak and threshold of one layer's neurons.

    ``e_rev_pos`` / ``e_rev_neg`` are the potentials toward which positive /
    negative synaptic currents drive the membrane.  ``math.inf`` magnitudes
    select the ideal branch (beta = 0), where the end-of-interval potential
    degenerates to a plain weighted sum.
    """

    e_rev_pos: float = math.inf
    e_rev_neg: float = -math.inf
    alpha: float = 0.0
    v_th: float = 1.0

    def __post_init__(self):
        if not (self.e_rev_pos > 0.0 > self.e_rev_neg):
            raise ValueError(
                f"need e_rev_pos > 0 > e_rev_neg, got ({self.e_rev_pos}, {self.e_rev_neg})"
            )
        if self.alpha < 0.0:
            raise ValueError("leak rate alpha must be >= 0")

    @classmethod
    def symmetric(cls, e_rev: float, alpha: float = 0.0, v_th: float = 1.0) -> "NeuronParams":
        """Params with ``e_rev_pos = -e_rev_neg = e_rev``."""
        return cls(e_rev_pos=e_rev, e_rev_neg=-e_rev, alpha=alpha, v_th=v_th)

    @property
    def beta_pos(self) -> float:
        return 0.0 if math.isinf(self.e_rev_pos) else 1.0 / self.e_rev_pos

    @property
    def beta_neg(self) -> float:
        return 0.0 if math.isinf(self.e_rev_neg) else 1.0 / self.e_rev_neg

    def beta_of(self, weights: np.ndarray) -> np.ndarray:
        """Per-synapse beta, routed by weight sign (ties at w=0 go positive)."""
        w = np.asarray(weights, dtype=float)
        return np.where(w >= 0.0, self.beta_pos, self.beta_neg)


@dataclass(frozen=True)
class SortedSpikes:
    """Fired spikes in stable nondecreasing time order.

    ``times`` holds only fired entries; ``perm`` maps sorted position back to
    the original input index (so weight rows can be gathered to match).
    ``n_total`` remembers the original train length.
    """

    times: np.ndarray
    perm: np.ndarray
    n_total: int

    @property
    def n_fired(self) -> int:
        return self.times.size


def sort_spikes(times: np.ndarray, horizon: float = DEFAULT_HORIZON) -> SortedSpikes:
    """Stable sort of a spike train; sentinel (non-firing) entries are dropped.

    Coincident spikes keep their original relative order, which pins down the
    permutation and makes downstream results reproducible.
    """
    t = np.asarray(times, dtype=float)
    fired = is_fired(t, horizon)
    idx = np.flatnonzero(fired)
    order = np.argsort(t[idx], kind="stable")
    perm = idx[order]
    return SortedSpikes(times=t[perm], perm=perm, n_total=t.size)


def _phi(x: np.ndarray) -> np.ndarray:
    """(1 - exp(-x)) / x, evaluated stably (phi(0) = 1)."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < _PHI_SMALL
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 - 0.5 * x + x * x / 6.0, -np.expm1(-safe) / safe)


def _cum_fg(sorted_w: np.ndarray, sorted_beta: np.ndarray, alpha: float):
    """Cumulative ODE coefficients after each sorted spike (last axis)."""
    f = alpha + np.cumsum(sorted_beta * sorted_w, axis=-1)
    g = np.cumsum(sorted_w, axis=-1)
    return f, g


def accumulate_exact(
    spikes: SortedSpikes,
    weights: np.ndarray,
    params: NeuronParams,
    t_end: float = DEFAULT_HORIZON,
) -> float:
    """Membrane potential v(t_end) from v(0) = 0, evaluated in closed form.

    ``weights`` is the full (unsorted) weight row; it is gathered through
    ``spikes.perm``.  Spikes later than ``t_end`` contribute nothing.

    Raises :class:`NumericOverflowError` naming the offending interval if a
    non-finite intermediate appears (pathological weight magnitudes).
    """
    w = np.asarray(weights, dtype=float)[spikes.perm]
    ts = spikes.times
    keep = ts <= t_end
    ts, w = ts[keep], w[keep]
    if ts.size == 0:
        return 0.0
    f, g = _cum_fg(w, params.beta_of(w), params.alpha)
    d = np.diff(np.append(ts, t_end))
    x = f * d
    c = np.cumsum(x)
    terms = g * d * _phi(x) * np.exp(-(c[-1] - c))
    bad = ~np.isfinite(terms)
    if bad.any():
        k = int(np.argmax(bad))
        raise NumericOverflowError(
            f"non-finite contribution in interval {k} (f={f[k]}, g={g[k]}, d={d[k]})",
            interval=k,
        )
    return float(terms.sum())


def trace_exact(
    spikes: SortedSpikes, weights: np.ndarray, params: NeuronParams
) -> np.ndarray:
    """Membrane potential at each sorted spike arrival (v at t_hat_j).

    Uses the per-interval recursion
        v_j = v_{j-1} + (g_{j-1} - f_{j-1} v_{j-1}) d phi(f_{j-1} d)
    which is algebraically the decay-toward-(g/f) update but regular at f = 0.
    """
    w = np.asarray(weights, dtype=float)[spikes.perm]
    ts = spikes.times
    n = ts.size
    v = np.zeros(n)
    if n == 0:
        return v
    f, g = _cum_fg(w, params.beta_of(w), params.alpha)
    for j in range(1, n):
        d = ts[j] - ts[j - 1]
        step = (g[j - 1] - f[j - 1] * v[j - 1]) * d * _phi(f[j - 1] * d)
        v[j] = v[j - 1] + step
        if not np.isfinite(v[j]):
            raise NumericOverflowError(f"non-finite potential at interval {j}", interval=j)
    return v


def fire_rc(v_final: float, params: NeuronParams, discharge_beta: float = 0.0) -> float:
    """Firing time of the two-phase neuron given the end-of-accumulation potential.

    With an ideal (linear-ramp) firing phase the spike time is
    ``clip(1 - v_final)``.  With a non-ideal discharger of strength
    ``discharge_beta`` in [0, 1) the ramp decays exponentially and the
    crossing solves to

        t = ln((1 - b) / (1 - b v)) / ln(1 - b)

    clipped into [0, 1].  The discharger bias is sized so a zero-input neuron
    fires exactly at the end of the firing phase.
    """
    if not 0.0 <= discharge_beta < 1.0:
        raise ValueError("discharge_beta must lie in [0, 1)")
    if discharge_beta == 0.0:
        return float(np.clip(1.0 - v_final, 0.0, 1.0))
    b = discharge_beta
    denom = 1.0 - b * v_final
    if denom <= 0.0:
        raise FiringDomainError(
            f"1 - discharge_beta*v = {denom} <= 0: potential beyond the discharge fixed point"
        )
    t = math.log((1.0 - b) / denom) / math.log(1.0 - b)
    return float(np.clip(t, 0.0, 1.0))


def _ttfs_candidate(t0, v0, f, g, v_th):
    """First crossing time of v_th inside an interval starting at (t0, v0).

    Returns +inf when the interval dynamics never reach the threshold
    (non-positive log argument / wrong drive direction).
    """
    if abs(f) < _PHI_SMALL:
        if g <= 0.0:
            return math.inf
        return t0 + (v_th - v0) / g
    a = g - f * v0
    b = g - f * v_th
    if a <= 0.0 or b <= 0.0 or a < b:
        # v moves toward g/f; threshold unreachable from this side
        return math.inf
    return t0 + math.log(a / b) / f


def fire_ttfs(
    spikes: SortedSpikes,
    weights: np.ndarray,
    params: NeuronParams,
    horizon: float = DEFAULT_HORIZON,
) -> float:
    """Time-to-first-spike of a threshold neuron, or the sentinel if it never fires.

    Walks the inter-spike intervals in order; each interval yields a candidate
    crossing from the closed form, accepted only if it falls inside its own
    interval (boundary-inclusive on the right).  The final interval is open;
    crossings at or beyond the sentinel are reported as non-firing so the
    sentinel stays strictly later than every real spike.
    """
    sen = sentinel_time(horizon)
    ts = spikes.times
    n = ts.size
    if n == 0:
        return sen
    w = np.asarray(weights, dtype=float)[spikes.perm]
    f, g = _cum_fg(w, params.beta_of(w), params.alpha)
    v = trace_exact(spikes, weights, params)
    for j in range(n):
        t1 = ts[j + 1] if j + 1 < n else math.inf
        if v[j] >= params.v_th and j == 0:
            # v(0)=0 < v_th, so this only happens for v_th <= 0
            return float(ts[0])
        cand = _ttfs_candidate(ts[j], v[j], f[j], g[j], params.v_th)
        if ts[j] < cand <= t1 and cand < sen:
            return float(cand)
    return sen


# ---------------------------------------------------------------------------
# Batched closed forms (vectorized over samples / neurons)
# ---------------------------------------------------------------------------


def accumulate_exact_batch(
    times: np.ndarray,
    weights: np.ndarray,
    params: NeuronParams,
    t_end: float = DEFAULT_HORIZON,
) -> np.ndarray:
    """v(t_end) for a batch of independent single-neuron instances.

    ``times`` and ``weights`` are (B, N); every instance is sorted
    independently.  All spikes are assumed fired and <= t_end.
    """
    t = np.asarray(times, dtype=float)
    w = np.asarray(weights, dtype=float)
    order = np.argsort(t, axis=1, kind="stable")
    ts = np.take_along_axis(t, order, axis=1)
    ws = np.take_along_axis(w, order, axis=1)
    f, g = _cum_fg(ws, params.beta_of(ws), params.alpha)
    d = np.diff(np.concatenate([ts, np.full((ts.shape[0], 1), t_end)], axis=1), axis=1)
    x = f * d
    c = np.cumsum(x, axis=1)
    terms = g * d * _phi(x) * np.exp(-(c[:, -1:] - c))
    return terms.sum(axis=1)


def accumulate_layer_exact(
    times: np.ndarray,
    weight_matrix: np.ndarray,
    params: NeuronParams,
    t_end: float = DEFAULT_HORIZON,
    horizon: float = DEFAULT_HORIZON,
) -> np.ndarray:
    """v(t_end) of every neuron in a fully connected layer, batched.

    ``times`` is (B, N_in) and may contain sentinel entries; ``weight_matrix``
    is (N_out, N_in), shared across the batch.  Returns (B, N_out).

    Non-fired inputs are neutralized by moving them to ``t_end``, where a
    spike contributes exactly nothing to v(t_end).
    """
    t = np.asarray(times, dtype=float)
    t = np.where(is_fired(t, horizon), np.minimum(t, t_end), t_end)
    wb = np.asarray(weight_matrix, dtype=float) * params.beta_of(weight_matrix)

    order = np.argsort(t, axis=1, kind="stable")          # (B, N)
    ts = np.take_along_axis(t, order, axis=1)
    # gather weight columns into per-sample sorted order: (N_out, B, N)
    ws = np.take(weight_matrix, order, axis=1)
    wbs = np.take(wb, order, axis=1)
    f = params.alpha + np.cumsum(wbs, axis=-1)
    g = np.cumsum(ws, axis=-1)
    d = np.diff(np.concatenate([ts, np.full((ts.shape[0], 1), t_end)], axis=1), axis=1)
    x = f * d[None, :, :]
    c = np.cumsum(x, axis=-1)
    terms = g * d[None, :, :] * _phi(x) * np.exp(-(c[:, :, -1:] - c))
    return terms.sum(axis=-1).T                            # (B, N_out)


def fire_ttfs_layer_exact(
    times: np.ndarray,
    weight_matrix: np.ndarray,
    params: NeuronParams,
    horizon: float = DEFAULT_HORIZON,
) -> np.ndarray:
    """TTFS firing times of a fully connected layer, batched.

    ``times`` (B, N_in) with sentinels allowed; ``weight_matrix`` (N_out, N_in).
    Returns (B, N_out) with sentinel entries for neurons that never reach
    threshold (or would only reach it at/after the sentinel).
    """
    sen = sentinel_time(horizon)
    t = np.asarray(times, dtype=float)
    fired = is_fired(t, horizon)
    B, N = t.shape
    O = weight_matrix.shape[0]
    # push non-fired inputs past the sentinel; their weights are masked to zero
    t_eff = np.where(fired, t, 2.0 * sen)
    order = np.argsort(t_eff, axis=1, kind="stable")
    ts = np.take_along_axis(t_eff, order, axis=1)                  # (B, N)
    live = np.take_along_axis(fired, order, axis=1)                # (B, N)
    ws = np.take(weight_matrix, order, axis=1) * live[None, :, :]  # (O, B, N)
    wbs = np.take(weight_matrix * params.beta_of(weight_matrix), order, axis=1)
    wbs = wbs * live[None, :, :]
    f = params.alpha + np.cumsum(wbs, axis=-1)                     # (O, B, N)
    g = np.cumsum(ws, axis=-1)

    out = np.full((O, B), sen)
    got = np.zeros((O, B), dtype=bool)
    v = np.zeros((O, B))
    for j in range(N):
        t0 = ts[:, j]                                              # (B,)
        if j > 0:
            # advance the trace across [ts[j-1], ts[j]] (zero when both sentinel)
            dseg = np.where(live[:, j - 1], t0 - ts[:, j - 1], 0.0)
            fj, gj = f[:, :, j - 1], g[:, :, j - 1]
            v = v + (gj - fj * v) * dseg[None, :] * _phi(fj * dseg[None, :])
        t1 = ts[:, j + 1] if j + 1 < N else np.full(B, np.inf)
        cand = _ttfs_candidate_vec(t0[None, :], v, f[:, :, j], g[:, :, j], params.v_th)
        ok = live[None, :, j] & ~got & (cand > t0[None, :]) & (cand <= t1[None, :]) & (cand < sen)
        out = np.where(ok, cand, out)
        got |= ok
    return out.T


def _ttfs_candidate_vec(t0, v0, f, g, v_th):
    """Vectorized counterpart of :func:`_ttfs_candidate` (+inf where invalid)."""
    small = np.abs(f) < _PHI_SMALL
    lin_ok = g > 0.0
    lin = t0 + np.where(lin_ok, (v_th - v0) / np.where(lin_ok, g, 1.0), np.inf)
    a = g - f * v0
    b = g - f * v_th
    log_ok = (a > 0.0) & (b > 0.0) & (a >= b)
    safe_f = np.where(small | ~log_ok, 1.0, f)
    ratio = np.where(log_ok, a / np.where(log_ok, b, 1.0), 1.0)
    log_cand = t0 + np.log(ratio) / safe_f
    log_cand = np.where(log_ok, log_cand, np.inf)
    return np.where(small, np.where(lin_ok, lin, np.inf), log_cand)


# ---------------------------------------------------------------------------
# Independent brute-force oracle
# ---------------------------------------------------------------------------


def oracle_rk4(
    times: np.ndarray,
    weights: np.ndarray,
    params: NeuronParams,
    dt: float,
    t_end: float = DEFAULT_HORIZON,
    horizon: float = DEFAULT_HORIZON,
):
    """Classic RK4 integration of the piecewise ODE; the brute-force oracle.

    Step boundaries are snapped to spike times (each inter-spike segment is
    integrated with uniform substeps of size <= dt), so the only error is the
    O(dt^4) global RK4 error.  Returns ``(t_grid, v_grid)`` covering every
    step from 0 to t_end.  Deliberately independent of the closed forms above:
    no exponentials, just the textbook four-stage update.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    sp = sort_spikes(times, horizon)
    w = np.asarray(weights, dtype=float)[sp.perm]
    keep = sp.times <= t_end
    ts, w = sp.times[keep], w[keep]
    beta = params.beta_of(w)
    bounds = np.concatenate([[0.0], ts, [t_end]])
    t_out = [0.0]
    v_out = [0.0]
    v = 0.0
    f_run = params.alpha
    g_run = 0.0
    for seg in range(len(bounds) - 1):
        if seg > 0:
            f_run += beta[seg - 1] * w[seg - 1]
            g_run += w[seg - 1]
        span = bounds[seg + 1] - bounds[seg]
        if span <= 0.0:
            continue
        n = max(1, int(math.ceil(span / dt)))
        h = span / n
        for i in range(n):
            k1 = g_run - f_run * v
            k2 = g_run - f_run * (v + 0.5 * h * k1)
            k3 = g_run - f_run * (v + 0.5 * h * k2)
            k4 = g_run - f_run * (v + h * k3)
            v = v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t_out.append(bounds[seg] + (i + 1) * h)
            v_out.append(v)
    return np.array(t_out), np.array(v_out)


def oracle_rk4_batch(
    times: np.ndarray,
    weights: np.ndarray,
    params: NeuronParams,
    dt: float,
    t_end: float = DEFAULT_HORIZON,
) -> np.ndarray:
    """v(t_end) by RK4 for a (B, N) batch of single-neuron instances.

    Instances march in lockstep over the segment index; within a segment every
    instance uses its own substep h_i <= dt, so accuracy is at least that of
    the scalar oracle.  All spikes are assumed fired and within [0, t_end].
    """
    t = np.asarray(times, dtype=float)
    w = np.asarray(weights, dtype=float)
    B, N = t.shape
    order = np.argsort(t, axis=1, kind="stable")
    ts = np.take_along_axis(t, order, axis=1)
    ws = np.take_along_axis(w, order, axis=1)
    f, g = _cum_fg(ws, params.beta_of(ws), params.alpha)
    f = np.concatenate([np.full((B, 1), params.alpha), f], axis=1)
    g = np.concatenate([np.zeros((B, 1)), g], axis=1)
    bounds = np.concatenate([np.zeros((B, 1)), ts, np.full((B, 1), t_end)], axis=1)
    v = np.zeros(B)
    for seg in range(N + 1):
        span = np.maximum(bounds[:, seg + 1] - bounds[:, seg], 0.0)
        n = int(math.ceil(span.max() / dt)) if span.max() > 0 else 0
        if n == 0:
            continue
        h = span / n
        fs, gs = f[:, seg], g[:, seg]
        for _ in range(n):
            k1 = gs - fs * v
            k2 = gs - fs * (v + 0.5 * h * k1)
            k3 = gs - fs * (v + 0.5 * h * k2)
            k4 = gs - fs * (v + h * k3)
            v = v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return v
