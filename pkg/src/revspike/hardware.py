"""Behavioral analog-circuit simulator and model-to-hardware mapping.

The crossbar circuit stores weights as MOSFET current sources whose output
current varies linearly with the membrane voltage (channel-length modulation,
coefficients lambda).  In circuit polarity the membrane voltage starts at the
resting potential V_0 and is pulled *down* by positive weights (NMOS sinks)
and up by negative ones (PMOS sources); a neuron spikes when, during the
firing phase, the discharger drags the voltage below the sensing-inverter
threshold V_switch.

With u = V - V_0 every phase obeys du/dt = a - b u with piecewise-constant
coefficients, so the simulator reuses the event-exact integration of the
model, just in volts and seconds.  The correspondence is

    weight      w   = +- T I / (C_m V_th)
    reversal    E+  = 1 / (V_th lambda_N),   E- = -1 / (V_th lambda_P)
    discharge   beta_dis = lambda_dis V_th

A configurable per-synapse (and per-neuron, for the discharger) fractional
perturbation of the lambdas stands in for the residual mismatch a fabricated
circuit would show against any single-lambda model.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import Tape
from .neuron import FiringDomainError, NeuronParams, _phi
from .network import (
    ModelConfig,
    SpikingNetwork,
    accumulate_layer_conventional,
    taped_forward,
    _phase_grid,
)
from .training import CostParams, AdamState, adam_step, cost_taped, init_rc

__all__ = [
    "CircuitParams",
    "DerivedModelParams",
    "ScaleVector",
    "CurrentMap",
    "derive_params",
    "to_currents",
    "draw_lambdas",
    "simulate_circuit",
    "model_times_with_discharge",
    "scale_search",
    "firing_rmse",
    "run_mapping",
    "train_mapping_model",
]


@dataclass(frozen=True)
class CircuitParams:
    """Hardware record of the designed two-layer crossbar (SI-scale units)."""

    v_dd: float = 1.8            # V
    c_m: float = 140e-15         # F
    t_circ: float = 1e-6         # s
    v_switch: float = 0.428      # V
    v_0: float = 1.3             # V
    v_b_sense: float = 0.95      # V (context only)
    v_b_dis: float = 0.554       # V (context only)
    lambda_n: float = 0.41       # 1/V
    lambda_p: float = 0.75       # 1/V
    lambda_dis: float = 0.177    # 1/V
    lambda_sigma: float = 0.0    # fractional per-synapse lambda perturbation
    v_fit_range: tuple = (0.43, 1.36)  # V, linear-fit validity window

    def __post_init__(self):
        if self.v_th_circ <= 0:
            raise ValueError("v_0 must exceed v_switch")
        if min(self.lambda_n, self.lambda_p, self.lambda_dis) < 0:
            raise ValueError("lambda values must be >= 0")

    @property
    def v_th_circ(self) -> float:
        return self.v_0 - self.v_switch

    @property
    def unit_current(self) -> float:
        """Current of a unit weight: C_m V_th / T."""
        return self.c_m * self.v_th_circ / self.t_circ


@dataclass(frozen=True)
class DerivedModelParams:
    """Model-side constants implied by the circuit record."""

    neuron: NeuronParams
    discharge_beta: float
    e_rev_dis: float


def derive_params(cp: CircuitParams) -> DerivedModelParams:
    """Map circuit lambdas to reversal potentials and the discharge constant.

    Zero lambdas select the ideal (infinite reversal potential) branch.
    """
    vth = cp.v_th_circ
    e_pos = math.inf if cp.lambda_n == 0 else 1.0 / (vth * cp.lambda_n)
    e_neg = -math.inf if cp.lambda_p == 0 else -1.0 / (vth * cp.lambda_p)
    e_dis = math.inf if cp.lambda_dis == 0 else 1.0 / (vth * cp.lambda_dis)
    return DerivedModelParams(
        neuron=NeuronParams(e_rev_pos=e_pos, e_rev_neg=e_neg),
        discharge_beta=cp.lambda_dis * vth,
        e_rev_dis=e_dis,
    )


@dataclass(frozen=True)
class ScaleVector:
    """Positive scaling of positive/negative currents (the mapping knob)."""

    alpha_pos: float = 1.0
    alpha_neg: float = 1.0

    def __post_init__(self):
        if self.alpha_pos <= 0 or self.alpha_neg <= 0:
            raise ValueError("scales must be positive")


@dataclass(frozen=True)
class CurrentMap:
    """Per-synapse programmed currents, split by device polarity (amps >= 0)."""

    i_nmos: np.ndarray   # sinks; realize positive weights
    i_pmos: np.ndarray   # sources; realize negative weights


def to_currents(weights: np.ndarray, cp: CircuitParams, scale: ScaleVector = ScaleVector()) -> CurrentMap:
    """Convert a trained weight matrix to programmed synaptic currents.

    I = alpha^{sign} * C_m V_th / T * |w|, routed to the NMOS sink for
    positive weights and the PMOS source for negative ones.
    """
    w = np.asarray(weights, dtype=float)
    unit = cp.unit_current
    return CurrentMap(
        i_nmos=scale.alpha_pos * unit * np.where(w >= 0, w, 0.0),
        i_pmos=scale.alpha_neg * unit * np.where(w < 0, -w, 0.0),
    )


def draw_lambdas(cp: CircuitParams, shapes: list[tuple], rng: np.random.Generator):
    """One circuit instance: per-synapse lambda_N/lambda_P matrices and a
    per-neuron discharger lambda per layer, all perturbed by the fractional
    ``lambda_sigma`` (clipped at zero)."""
    draws = []
    for (o, i) in shapes:
        ln = cp.lambda_n * np.maximum(1.0 + cp.lambda_sigma * rng.standard_normal((o, i)), 0.0)
        lp = cp.lambda_p * np.maximum(1.0 + cp.lambda_sigma * rng.standard_normal((o, i)), 0.0)
        ld = cp.lambda_dis * np.maximum(1.0 + cp.lambda_sigma * rng.standard_normal(o), 0.0)
        draws.append((ln, lp, ld))
    return draws


def _crossing_time(u0, a, b, u_target):
    """First t >= 0 with u(t) = u_target for du/dt = a - b u (vectorized).

    Trajectories already at/past the target (moving downward) report 0;
    trajectories that never reach it report +inf.
    """
    u0 = np.asarray(u0, dtype=float)
    a = np.broadcast_to(np.asarray(a, dtype=float), u0.shape)
    b = np.broadcast_to(np.asarray(b, dtype=float), u0.shape)
    small = np.abs(b) < 1e-30
    num = a - b * u0
    den = a - b * u_target
    ok_log = ~small & (num * den > 0)
    ratio = np.where(ok_log, num / np.where(ok_log, den, 1.0), 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_log = np.log(ratio) / np.where(small, 1.0, b)
    ok_lin = small & (a != 0)
    t_lin = (u_target - u0) / np.where(ok_lin, a, 1.0)
    t = np.where(small, np.where(ok_lin, t_lin, np.inf), np.where(ok_log, t_log, np.inf))
    return np.where(t > 0, t, np.inf)


@dataclass
class CircuitResult:
    """Per-layer local firing times (seconds from each firing-phase start)."""

    layer_times_s: list
    v_min: float
    v_max: float
    trace: list | None = None

    @property
    def output_times_s(self) -> np.ndarray:
        return self.layer_times_s[-1]


def simulate_circuit(
    currents: list[CurrentMap],
    cp: CircuitParams,
    in_times: np.ndarray,
    lambdas: list | None = None,
    record_trace: bool = False,
    trace_points: int = 400,
) -> CircuitResult:
    """Event-exact behavioral simulation of the pipelined crossbar.

    ``in_times`` are normalized [0, 1] arrival times within the first
    accumulation window (a time of exactly 1 means "arrives at the window
    end", i.e. contributes nothing).  Layers are pipelined with phase shifts
    of T_circ; returned spike times are local to each layer's firing phase.

    Emits a warning when the membrane voltage leaves the lambda-fit window.
    """
    T = cp.t_circ
    C = cp.c_m
    vth = cp.v_th_circ
    t_norm = np.atleast_2d(np.asarray(in_times, dtype=float))
    B = t_norm.shape[0]
    if lambdas is None:
        lambdas = draw_lambdas(cp, [cm.i_nmos.shape for cm in currents], np.random.default_rng(0))
    layer_times = []
    v_lo, v_hi = cp.v_0, cp.v_0
    trace = [] if record_trace else None
    for li, (cm, (lam_n, lam_p, lam_dis)) in enumerate(zip(currents, lambdas)):
        O, I = cm.i_nmos.shape
        if t_norm.shape[1] != I:
            raise ValueError(f"layer {li}: {t_norm.shape[1]} inputs for {I} synapses")
        # du/dt contributions per synapse (u = V - V0, inverted polarity)
        a_con = (cm.i_pmos - cm.i_nmos) / C                       # V/s
        b_con = (cm.i_pmos * lam_p + cm.i_nmos * lam_n) / C       # 1/s
        order = np.argsort(t_norm, axis=1, kind="stable")
        ts = np.take_along_axis(t_norm, order, axis=1) * T        # seconds
        a_cum = np.cumsum(np.take(a_con, order, axis=1), axis=-1) # (O, B, I)
        b_cum = np.cumsum(np.take(b_con, order, axis=1), axis=-1)
        seg_trace = [] if record_trace else None
        u = np.zeros((O, B))
        t_prev = np.zeros(B)
        for j in range(I + 1):
            t_next = ts[:, j] if j < I else np.full(B, T)
            d = np.maximum(t_next - t_prev, 0.0)
            if j > 0:
                aj, bj = a_cum[:, :, j - 1], b_cum[:, :, j - 1]
                if record_trace:
                    seg_trace.append((t_prev.copy(), d.copy(), u.copy(), aj.copy(), bj.copy()))
                u = u + (aj - bj * u) * d[None, :] * _phi(bj * d[None, :])
            elif record_trace:
                seg_trace.append((t_prev.copy(), d.copy(), u.copy(),
                                  np.zeros((O, B)), np.zeros((O, B))))
            v_lo = min(v_lo, float(u.min()) + cp.v_0)
            v_hi = max(v_hi, float(u.max()) + cp.v_0)
            t_prev = t_next
        # firing phase: per-neuron discharger sized so u(0)=0 reaches -vth at T.
        # The discharge current weakens as the membrane falls (du/dt = a - b u
        # with b > 0), which is what pins the zero-input crossing to exactly T.
        beta_dis = lam_dis * vth                                   # (O,)
        alpha_n = np.where(beta_dis > 0, -np.log1p(-np.minimum(beta_dis, 1 - 1e-15)) / np.where(beta_dis > 0, beta_dis, 1.0), 1.0)
        i_dis = alpha_n * C * vth / T                              # (O,)
        a_f = (-i_dis / C)[:, None]                                # V/s
        b_f = (i_dis * lam_dis / C)[:, None]                       # 1/s
        s = np.where(u <= -vth, 0.0, np.clip(_crossing_time(u, a_f, b_f, -vth), 0.0, T))
        layer_times.append(s.T)                                    # (B, O)
        if record_trace:
            trace.append({"accum": seg_trace, "fire": (u.copy(), a_f, b_f, s.copy())})
        t_norm = s.T / T
    if v_lo < cp.v_fit_range[0] or v_hi > cp.v_fit_range[1]:
        warnings.warn(
            f"membrane voltage range [{v_lo:.3f}, {v_hi:.3f}] V leaves the "
            f"lambda fit window {cp.v_fit_range}"
        )
    result = CircuitResult(layer_times_s=layer_times, v_min=v_lo, v_max=v_hi)
    if record_trace:
        result.trace = _expand_trace(trace, cp, trace_points)
    return result


def _expand_trace(raw, cp: CircuitParams, n_pts: int):
    """Render recorded segments of sample 0 into (layer, phase, global_t, V) rows.

    Pipelined timeline: layer l resets during [lT, (l+1)T), accumulates during
    [(l+1)T, (l+2)T) and fires during [(l+2)T, (l+3)T).
    """
    rows = []
    T = cp.t_circ
    for li, layer in enumerate(raw):
        accum_start = (li + 1) * T
        for tt in np.linspace(0, T, max(2, n_pts // 8)):
            rows.append((li, "reset", accum_start - T + tt, cp.v_0))
        for (t0, d, u0, a, b) in layer["accum"]:
            if d[0] <= 0:
                continue
            local = np.linspace(0.0, d[0], max(2, int(n_pts * d[0] / T)))
            x = b[:, 0:1] * local[None, :]
            uu = u0[:, 0:1] + (a[:, 0:1] - b[:, 0:1] * u0[:, 0:1]) * local[None, :] * _phi(x)
            for k, tt in enumerate(local):
                rows.append((li, "accumulation", accum_start + t0[0] + tt, cp.v_0 + float(uu[0, k])))
        u_end, a_f, b_f, s = layer["fire"]
        local = np.linspace(0.0, T, n_pts // 2)
        x = b_f[:, 0:1] * local[None, :]
        uu = u_end[:, 0:1] + (a_f[:, 0:1] - b_f[:, 0:1] * u_end[:, 0:1]) * local[None, :] * _phi(x)
        for k, tt in enumerate(local):
            # the discharger cannot pull the node below ground
            rows.append((li, "firing", accum_start + T + tt, max(cp.v_0 + float(uu[0, k]), 0.0)))
    return rows


# ---------------------------------------------------------------------------
# Model-side reference (discharge-aware forward) and RMSE
# ---------------------------------------------------------------------------


def _fire_rc_vec(v: np.ndarray, discharge_beta: float) -> np.ndarray:
    """Vectorized non-ideal firing time (see neuron.fire_rc)."""
    if discharge_beta == 0.0:
        return np.clip(1.0 - v, 0.0, 1.0)
    b = discharge_beta
    denom = 1.0 - b * v
    if np.any(denom <= 0.0):
        raise FiringDomainError("potential beyond the discharge fixed point")
    return np.clip(np.log((1.0 - b) / denom) / math.log(1.0 - b), 0.0, 1.0)


def model_times_with_discharge(
    net: SpikingNetwork, times: np.ndarray, discharge_beta: float
) -> list[np.ndarray]:
    """Per-layer firing times ([0,1] local units) of the trained model with
    the non-ideal (exponential) firing phase, the reference side of the
    model-vs-circuit comparison."""
    t = np.atleast_2d(np.asarray(times, dtype=float))
    outs = []
    for layer in net.layers:
        v = accumulate_layer_conventional(t, layer, horizon=1.0)
        t = _fire_rc_vec(v, discharge_beta)
        outs.append(t)
    return outs


def firing_rmse(model_times: np.ndarray, circuit_times: np.ndarray) -> float:
    """Root mean square difference over all spikes (seconds in, seconds out).

    Pairs where either side is a sentinel/non-spike (encoded as NaN) are
    excluded; raises if nothing remains.
    """
    a = np.asarray(model_times, dtype=float)
    b = np.asarray(circuit_times, dtype=float)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    keep = np.isfinite(a) & np.isfinite(b)
    if not keep.any():
        raise ValueError("RMSE undefined: no firing pairs")
    d = a[keep] - b[keep]
    return float(np.sqrt(np.mean(d * d)))


# ---------------------------------------------------------------------------
# Mapping pipelines
# ---------------------------------------------------------------------------


def train_mapping_model(
    features: np.ndarray,
    labels: np.ndarray,
    e_rev_pos: float,
    e_rev_neg: float,
    seed: int,
    epochs: int = 300,
    lr: float = 1e-3,
    batch_size: int = 50,
    hidden: int = 5,
    n_out: int = 5,
    gamma_t: float = 0.1,
    gamma_w: float = 1e-2,
    gamma_v: float = 0.2,
) -> SpikingNetwork:
    """Train the 5-5-5 two-phase model used for hardware mapping.

    On top of the timing-softmax cost this adds the weight 2-norm penalty
    (keeps programmed currents reasonable) and the late-spike pull toward the
    end of the window (keeps early spikes out of the pipeline), both over all
    layers, as the hardware experiments require.
    """
    from .data import encode

    ds = encode(features, labels, scheme="iris")
    cfg = ModelConfig(
        layer_sizes=(ds.n_features, hidden, n_out),
        mode="rc_spike",
        e_rev=e_rev_pos,
        e_rev_neg=e_rev_neg,
        m_train=20,
        m_test=30,
        sigma_spike=0.0,
        seed=seed,
    )
    rng = np.random.default_rng(seed)
    net = SpikingNetwork.build(cfg, init_rc(cfg.layer_sizes, rng))
    cp_cost = CostParams(tau_soft=0.07, gamma1=gamma_t, t_ref=1.0, gamma2=0.0)
    params = [l.weights for l in net.layers]
    state = AdamState.for_params(params, lr)
    n = ds.times.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            sel = order[lo : lo + batch_size]
            tape = Tape()
            grids = [_phase_grid(net, "train", rng) for _ in net.layers]
            out, leaves, layer_outs = taped_forward(tape, ds.times[sel], net, grids, rng)
            loss = cost_taped(out, ds.labels[sel], cp_cost)
            reg = None
            for w in leaves:
                term = (w * w).sum()
                reg = term if reg is None else reg + term
            loss = loss + gamma_w * reg
            late = None
            for o in layer_outs:
                d = o - 1.0
                term = (d * d).sum() / float(len(sel))
                late = term if late is None else late + term
            loss = loss + gamma_v * late
            adj = tape.backward(loss)
            grads = [adj.get(leaf.node_id, np.zeros_like(leaf.value)) for leaf in leaves]
            adam_step(params, grads, state)
    return net


def scale_search(
    net: SpikingNetwork,
    cp: CircuitParams,
    test_times: np.ndarray,
    mode: str,
    lambdas: list,
    model_out: np.ndarray,
    step: float = 0.01,
    window: tuple = (0.5, 1.5),
):
    """Grid search of the current scaling minimizing output-layer timing RMSE.

    ``ann_to_imc`` explores the 2-D (alpha_pos, alpha_neg) grid; the matched
    mode constrains alpha_pos = alpha_neg (1-D).  Returns
    ``(ScaleVector, best_rmse_seconds)``; the grid always contains the unit
    scale, which is returned with a warning when nothing improves on it.
    """
    grid = np.round(np.arange(window[0], window[1] + step / 2, step), 10)
    weights = [l.weights for l in net.layers]

    def rmse_at(ap, an):
        cms = [to_currents(w, cp, ScaleVector(ap, an)) for w in weights]
        res = simulate_circuit(cms, cp, test_times, lambdas=lambdas)
        return firing_rmse(model_out * cp.t_circ, res.output_times_s)

    best = (ScaleVector(1.0, 1.0), rmse_at(1.0, 1.0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if mode == "ann_to_imc":
            for ap in grid:
                for an in grid:
                    r = rmse_at(ap, an)
                    if r < best[1]:
                        best = (ScaleVector(float(ap), float(an)), r)
        else:
            for a in grid:
                r = rmse_at(a, a)
                if r < best[1]:
                    best = (ScaleVector(float(a), float(a)), r)
    if best[0] == ScaleVector(1.0, 1.0):
        warnings.warn("scale search found no improvement over unit scaling (flat landscape?)")
    return best


def run_mapping(
    mode: str,
    features: np.ndarray,
    labels: np.ndarray,
    cp: CircuitParams,
    seed: int = 0,
    epochs: int = 300,
    scale_step: float = 0.01,
    scale_window: tuple = (0.5, 1.5),
    ann_e_rev: float = 100.0,
    n_test: int = 50,
):
    """Full mapping pipeline for one mode ('ann_to_imc' or 'pnn_to_imc').

    Trains the model (ideal reversal potentials for the mismatched mode, the
    circuit-derived ones for the matched mode), converts weights to currents,
    optimizes the current scaling against the behavioral circuit, and reports
    the output-layer firing-time RMSE plus the per-spike histogram rows.
    """
    if mode not in ("ann_to_imc", "pnn_to_imc"):
        raise ValueError(f"unknown mapping mode {mode!r}")
    from .data import encode

    derived = derive_params(cp)
    rng = np.random.default_rng(seed)
    n = len(labels)
    order = rng.permutation(n)
    test_sel = order[:n_test]
    train_sel = order[n_test:]
    if mode == "ann_to_imc":
        e_pos, e_neg = ann_e_rev, -ann_e_rev
    else:
        e_pos, e_neg = derived.neuron.e_rev_pos, derived.neuron.e_rev_neg
    net = train_mapping_model(
        features[train_sel], labels[train_sel], e_pos, e_neg, seed=seed, epochs=epochs
    )
    test_ds = encode(features[test_sel], labels[test_sel], scheme="iris")
    model_layers = model_times_with_discharge(net, test_ds.times, derived.discharge_beta)
    model_out = model_layers[-1]
    shapes = [l.weights.shape for l in net.layers]
    lambdas = draw_lambdas(cp, shapes, np.random.default_rng(seed + 7919))
    scale, best_rmse = scale_search(
        net, cp, test_ds.times, mode, lambdas, model_out,
        step=scale_step, window=scale_window,
    )
    cms = [to_currents(l.weights, cp, scale) for l in net.layers]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = simulate_circuit(cms, cp, test_ds.times, lambdas=lambdas)
    circuit_out = res.output_times_s
    rmse = firing_rmse(model_out * cp.t_circ, circuit_out)
    model_pred = np.argmin(model_out, axis=1)
    circuit_pred = np.argmin(circuit_out, axis=1)
    hist_rows = []
    for b in range(model_out.shape[0]):
        for o in range(model_out.shape[1]):
            ms = model_out[b, o] * cp.t_circ
            cs = circuit_out[b, o]
            hist_rows.append(
                {"sample_id": b, "neuron_id": o, "model_time_s": ms,
                 "circuit_time_s": cs, "delta_s": ms - cs}
            )
    report = {
        "mode": mode,
        "seed": seed,
        "rmse_s": rmse,
        "scale": {"alpha_pos": scale.alpha_pos, "alpha_neg": scale.alpha_neg},
        "e_rev_model": {"pos": e_pos, "neg": e_neg},
        "derived": {
            "e_rev_pos": derived.neuron.e_rev_pos,
            "e_rev_neg": derived.neuron.e_rev_neg,
            "e_rev_dis_from_lambda": derived.e_rev_dis,
            "discharge_beta": derived.discharge_beta,
        },
        "lambda_sigma": cp.lambda_sigma,
        "model_accuracy": float((model_pred == test_ds.labels).mean()),
        "circuit_accuracy": float((circuit_pred == test_ds.labels).mean()),
    }
    return report, hist_rows, net


def write_histogram_csv(path, rows) -> None:
    cols = ["sample_id", "neuron_id", "model_time_s", "circuit_time_s", "delta_s"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow(r)
