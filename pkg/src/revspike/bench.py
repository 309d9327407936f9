"""Empirical verification harnesses: discretization error orders and the
conventional-vs-fast computational scaling.

The error sweeps quantify |v_exact(1) - v_dstd(1)| averaged over neurons and
samples as the step count or the reversal-potential magnitude grows; both are
summarized by a fitted log-log slope.  The timing sweeps measure wall time of
the conventional (quadratic) layer against the discretized (linear) one.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    from contextlib import nullcontext

    def threadpool_limits(limits=None):
        return nullcontext()

from .autodiff import Tape
from .dstd import build_grid, discretize, coefficients_fg, accumulate_dstd
from .neuron import NeuronParams, accumulate_layer_exact
from .network import LayerSpec, layer_forward, taped_layer_forward

__all__ = [
    "SweepResult",
    "fit_slope",
    "dstd_errors",
    "convergence_sweep",
    "timing_sweep",
    "write_sweep_csv",
    "write_slope_json",
]

#: Default sweep-instance drive: weights ~ U(-c/N, c/N) with c = DRIVE_SCALE.
#: Keeps f * delta_tau small enough that the asymptotic error orders are
#: visible from the smallest step counts in the swept ranges.
DRIVE_SCALE = 4.0


@dataclass
class SweepResult:
    axis_name: str
    axis: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n_repeats: int
    slope: float
    intercept: float
    r2: float

    def __post_init__(self):
        self.axis = np.asarray(self.axis, dtype=float)
        if not np.all(np.diff(self.axis) > 0):
            raise ValueError("axis values must be strictly increasing")

    def to_dict(self) -> dict:
        return {
            "axis_name": self.axis_name,
            "axis": self.axis.tolist(),
            "mean": np.asarray(self.mean).tolist(),
            "std": np.asarray(self.std).tolist(),
            "n_repeats": self.n_repeats,
            "slope": self.slope,
            "intercept": self.intercept,
            "r2": self.r2,
        }


def fit_slope(xs, ys):
    """Least-squares line through (log x, log y): returns (slope, intercept, r2)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.size < 3:
        raise ValueError("need at least 3 points for a slope fit")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ValueError("log-log fit needs positive values")
    lx, ly = np.log(xs), np.log(ys)
    slope, intercept = np.polyfit(lx, ly, 1)
    pred = slope * lx + intercept
    ss_res = float(((ly - pred) ** 2).sum())
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)


def _sweep_instance(n_samples, n_spikes, n_out, drive, seed):
    rng = np.random.default_rng(seed)
    times = rng.uniform(0.0, 1.0, (n_samples, n_spikes))
    w = rng.uniform(-drive / n_spikes, drive / n_spikes, (n_out, n_spikes))
    return times, w


def dstd_errors(times, w, params, m_list, chunk=200):
    """Mean |v_dstd - v_exact| per step count; the exact reference is
    computed once and shared across the list."""
    n = times.shape[0]
    totals = np.zeros(len(m_list))
    grids = [build_grid(int(m), mode="rc_spike", t_offset=0.5 / int(m)) for m in m_list]
    for lo in range(0, n, chunk):
        tb = times[lo : lo + chunk]
        v_exact = accumulate_layer_exact(tb, w, params)
        for k, grid in enumerate(grids):
            sv = discretize(tb, grid)
            f, g = coefficients_fg(sv, w, params)
            totals[k] += float(np.abs(accumulate_dstd(f, g, grid) - v_exact).sum())
    return totals / (n * w.shape[0])


def convergence_sweep(
    axis: str,
    values,
    n_samples: int = 1000,
    n_spikes: int = 1000,
    n_out: int = 10,
    e_rev: float = 4.0,
    m_steps: int = 8,
    drive: float = DRIVE_SCALE,
    seeds=(0, 1, 2),
) -> SweepResult:
    """Discretization-error sweep along ``steps`` (M) or ``e_rev`` (|E_rev|).

    For the ``steps`` axis ``e_rev`` is held fixed; for the ``e_rev`` axis
    ``m_steps`` is.  Repeats (seeds) re-draw spike times and weights.
    """
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        raise ValueError("need at least 2 axis values")
    if axis not in ("steps", "e_rev"):
        raise ValueError(f"unknown sweep axis {axis!r}")
    per_seed = []
    for seed in seeds:
        times, w = _sweep_instance(n_samples, n_spikes, n_out, drive, seed)
        if axis == "steps":
            errs = dstd_errors(times, w, NeuronParams.symmetric(e_rev), [int(v) for v in values])
        else:
            errs = np.array([
                dstd_errors(times, w, NeuronParams.symmetric(float(val)), [m_steps])[0]
                for val in values
            ])
        per_seed.append(errs)
    per_seed = np.asarray(per_seed)
    mean = per_seed.mean(axis=0)
    std = per_seed.std(axis=0)
    slope, intercept, r2 = fit_slope(values, mean)
    return SweepResult(axis, values, mean, std, len(seeds), slope, intercept, r2)


def _time_forward(fn, repeats: int) -> float:
    fn()  # warmup
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return float(np.median(samples))


def timing_sweep(
    path: str,
    n_in_values,
    mode: str = "rc_spike",
    m_steps: int = 10,
    n_out: int = 32,
    batch: int = 16,
    e_rev: float = 4.0,
    repeats: int = 5,
    seed: int = 0,
    with_backward: bool = False,
) -> SweepResult:
    """Wall time of one layer forward pass vs input dimension, single thread.

    ``path='exact'`` times the conventional formulation (quadratic in the
    input dimension); ``path='dstd'`` the discretized one (linear).  With
    ``with_backward=True`` the discretized path is recorded on a tape and the
    measured unit is a forward+backward pass.
    """
    if path not in ("exact", "dstd"):
        raise ValueError(f"unknown timing path {path!r}")
    n_in_values = np.asarray(sorted(int(v) for v in n_in_values))
    params = NeuronParams.symmetric(e_rev)
    rng = np.random.default_rng(seed)
    meds = []
    with threadpool_limits(limits=1):
        for n_in in n_in_values:
            times = rng.uniform(0.0, 1.0, (batch, n_in))
            w = rng.uniform(-1.0, 1.0, (n_out, n_in)) * (2.0 / np.sqrt(n_in))
            layer = LayerSpec(w, params, mode)
            if path == "exact":
                fn = lambda: layer_forward(times, layer, grid=None)
            else:
                grid = build_grid(m_steps, mode=mode, t_offset=0.5 / m_steps)
                if with_backward:
                    def fn():
                        tape = Tape()
                        out = taped_layer_forward(
                            tape.constant(times), tape.leaf(w), layer, grid
                        )
                        tape.backward((out * out).sum())
                else:
                    fn = lambda: layer_forward(times, layer, grid=grid)
            meds.append(_time_forward(fn, repeats))
    meds = np.asarray(meds)
    slope, intercept, r2 = fit_slope(n_in_values, meds)
    return SweepResult("n_in", n_in_values, meds, np.zeros_like(meds), repeats, slope, intercept, r2)


def write_sweep_csv(path, result: SweepResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis_value", "mean", "std", "n_repeats"])
        for x, m, s in zip(result.axis, result.mean, result.std):
            w.writerow([x, repr(float(m)), repr(float(s)), result.n_repeats])


def write_slope_json(path, results: dict[str, SweepResult]) -> None:
    with open(path, "w") as fh:
        json.dump({k: r.to_dict() for k, r in results.items()}, fh, indent=2)
