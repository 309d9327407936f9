"""Supervised training: timing-softmax cost, initialization, Adam, train loop.

The cost drives the labelled output neuron to fire *early*:

    C = sum_i kappa_i ln S_i(t)  +  gamma1 sum_i (t_i - t_ref)^2  +  gamma2 Q

with S the softmax of t_i / tau_soft (note the positive sign: ln S_i grows
with t_i, so minimizing C pushes the labelled timing down).  Q, used for
threshold-coded networks only, sums the weights of synapses whose spikes
arrived before their neuron fired.  The classification readout is therefore
argmin over output spike times.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor
from .network import (
    ModelConfig,
    SpikingNetwork,
    _phase_grid,
    forward_pass,
    taped_forward,
)
from .neuron import is_fired, sentinel_time

__all__ = [
    "CostParams",
    "AdamState",
    "cost",
    "cost_taped",
    "init_rc",
    "init_ttfs",
    "adam_step",
    "batch_loss_and_grads",
    "evaluate",
    "train_and_eval",
    "HISTORY_COLUMNS",
]

HISTORY_COLUMNS = [
    "epoch",
    "train_loss",
    "test_accuracy",
    "wall_seconds",
    "m_train",
    "m_test",
    "e_rev",
    "sigma_spike",
    "seed",
]


@dataclass(frozen=True)
class CostParams:
    tau_soft: float = 0.07
    gamma1: float = 2.6
    t_ref: float = 0.9
    gamma2: float = 0.0

    def __post_init__(self):
        if self.tau_soft <= 0:
            raise ValueError("tau_soft must be positive")
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("penalty weights must be >= 0")

    @classmethod
    def rc_default(cls) -> "CostParams":
        return cls(tau_soft=0.07, gamma1=2.6, t_ref=0.9, gamma2=0.0)

    @classmethod
    def ttfs_default(cls) -> "CostParams":
        return cls(tau_soft=0.07, gamma1=0.02, t_ref=3.2, gamma2=8e-6)


def _log_softmax(u: np.ndarray) -> np.ndarray:
    shift = u - u.max(axis=-1, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=-1, keepdims=True))


def cost(
    outputs: np.ndarray,
    labels: np.ndarray,
    cp: CostParams,
    q_value: float = 0.0,
) -> float:
    """Batch-mean cost from output spike times (sentinels are finite already).

    ``q_value`` is the pre-computed spike-promotion regularizer for the
    threshold-coded case (0 otherwise).
    """
    t = np.atleast_2d(np.asarray(outputs, dtype=float))
    if t.shape[0] == 0:
        raise ValueError("empty batch")
    y = np.asarray(labels, dtype=int)
    ln_s = _log_softmax(t / cp.tau_soft)
    class_term = ln_s[np.arange(t.shape[0]), y]
    temp_term = ((t - cp.t_ref) ** 2).sum(axis=-1)
    return float((class_term + cp.gamma1 * temp_term).mean() + cp.gamma2 * q_value)


def q_masks(
    inputs_per_layer: list[np.ndarray],
    outputs_per_layer: list[np.ndarray],
    horizon: float,
) -> list[np.ndarray]:
    """Batch-averaged membership masks for the Q regularizer, one per layer.

    Entry (o, i) counts the fraction of batch samples in which input spike i
    arrived (strictly) before output neuron o fired; non-firing outputs and
    non-firing inputs are excluded.
    """
    masks = []
    for t_in, t_out in zip(inputs_per_layer, outputs_per_layer):
        fin = is_fired(t_in, horizon)
        fout = is_fired(t_out, horizon)
        m = (t_in[:, None, :] < t_out[:, :, None]) & fin[:, None, :] & fout[:, :, None]
        masks.append(m.mean(axis=0))
    return masks


def cost_taped(
    out: Tensor,
    labels: np.ndarray,
    cp: CostParams,
    weight_leaves: list[Tensor] | None = None,
    q_mask_per_layer: list[np.ndarray] | None = None,
) -> Tensor:
    """Taped counterpart of :func:`cost`; returns the scalar loss tensor.

    The softmax is evaluated in shifted (stable) form; the shift is a
    constant, which leaves both value and gradient exact.
    """
    y = np.asarray(labels, dtype=int)
    B, O = out.shape
    u = out / cp.tau_soft
    shift = u.value.max(axis=-1, keepdims=True)
    z = (u - shift).exp().sum(axis=-1, keepdims=True)
    ln_s = (u - shift) - z.log()
    kappa = np.zeros((B, O))
    kappa[np.arange(B), y] = 1.0
    class_term = (ln_s * kappa).sum(axis=-1)
    d = out - cp.t_ref
    temp_term = (d * d).sum(axis=-1)
    total = (class_term + cp.gamma1 * temp_term).sum() / float(B)
    if cp.gamma2 > 0.0 and weight_leaves is not None and q_mask_per_layer is not None:
        q = None
        for w, m in zip(weight_leaves, q_mask_per_layer):
            ql = (w * m).sum()
            q = ql if q is None else q + ql
        total = total + cp.gamma2 * q
    return total


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def init_rc(layer_sizes, rng: np.random.Generator) -> list[np.ndarray]:
    """Glorot-uniform weights, U(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    ws = []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-a, a, size=(fan_out, fan_in)))
    return ws


def ttfs_w_max(n_layers: int, e_rev: float, t_ref: float, w_star: float = 2.0) -> float:
    """Maximum initial weight keeping the mean per-layer delay near t_ref / L.

    beta -> 0 recovers the ideal-branch value 4 w* L^2 / t_ref^2; the
    -ln(1-beta)/beta factor corrects for the reversal-potential ceiling.
    """
    if math.isinf(e_rev):
        return 4.0 * w_star * n_layers**2 / t_ref**2
    beta = 1.0 / e_rev
    if not 0.0 < beta < 1.0:
        raise ValueError(f"need |e_rev| > 1 (beta in (0,1)), got beta={beta}")
    return -4.0 * w_star * n_layers**2 / (beta * t_ref**2) * math.log(1.0 - beta)


def init_ttfs(
    layer_sizes,
    e_rev: float,
    t_ref: float,
    rng: np.random.Generator,
    w_star: float = 2.0,
    signed: bool = False,
) -> list[np.ndarray]:
    """Threshold-coded initialization: uniform over [0, w_max / fan_in].

    ``signed=True`` widens the range to [-w_max/fan_in, w_max/fan_in] for
    experiments that want zero-mean starts; the default matches the
    derivation's nonnegative range.
    """
    L = len(layer_sizes) - 1
    w_max = ttfs_w_max(L, e_rev, t_ref, w_star)
    ws = []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        hi = w_max / fan_in
        lo = -hi if signed else 0.0
        ws.append(rng.uniform(lo, hi, size=(fan_out, fan_in)))
    return ws


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float) -> "AdamState":
        st = cls(lr=lr)
        st.m = [np.zeros_like(p) for p in params]
        st.v = [np.zeros_like(p) for p in params]
        return st


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / (1.0 - b1**state.step)
        v_hat = state.v[i] / (1.0 - b2**state.step)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# Train / eval loop
# ---------------------------------------------------------------------------


def batch_loss_and_grads(
    net: SpikingNetwork,
    xb: np.ndarray,
    yb: np.ndarray,
    cp: CostParams,
    rng: np.random.Generator,
):
    """One taped forward/backward on a minibatch; returns (loss, grads).

    The readout layer's firing time enters the cost before the window clip
    (two-phase mode): argmin classification is invariant to the monotone
    clip, while training against the clipped value would permanently silence
    any saturated readout neuron.
    """
    tape = Tape()
    grids = [_phase_grid(net, "train", rng) for _ in net.layers]
    out, leaves, layer_outs = taped_forward(tape, xb, net, grids, rng, readout_preclip=True)
    masks = None
    if cp.gamma2 > 0.0:
        ins = [np.atleast_2d(xb)] + [o.value for o in layer_outs[:-1]]
        masks = q_masks(ins, [o.value for o in layer_outs], net.config.grid_span)
    loss = cost_taped(out, yb, cp, leaves, masks)
    adj = tape.backward(loss)
    grads = [adj.get(leaf.node_id, np.zeros_like(leaf.value)) for leaf in leaves]
    return float(loss.value), grads


def evaluate(
    net: SpikingNetwork,
    times: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    batch_size: int = 256,
    exact: bool = False,
) -> float:
    """Test-phase accuracy with the argmin-time readout."""
    y = np.asarray(labels, dtype=int)
    correct = 0
    for lo in range(0, len(y), batch_size):
        xb = times[lo : lo + batch_size]
        out = forward_pass(xb, net, phase="test", rng=rng, exact=exact)
        correct += int((np.argmin(out, axis=1) == y[lo : lo + batch_size]).sum())
    return correct / len(y)


def train_and_eval(
    net: SpikingNetwork,
    train_times: np.ndarray,
    train_labels: np.ndarray,
    test_times: np.ndarray,
    test_labels: np.ndarray,
    epochs: int,
    cp: CostParams,
    lr: float = 1e-4,
    batch_size: int = 32,
    csv_path=None,
    log=None,
) -> list[dict]:
    """Shuffled minibatch Adam on the timing cost; one history row per epoch.

    Noise injection, grid offsets and shuffling all derive from the config
    seed, so identical configs give identical histories (wall time aside).
    """
    if train_times.shape[0] != len(train_labels):
        raise ValueError("train set size mismatch")
    if train_times.shape[1] != net.config.layer_sizes[0]:
        raise ValueError(
            f"input dim {train_times.shape[1]} != model input {net.config.layer_sizes[0]}"
        )
    rng = np.random.default_rng(net.config.seed)
    params = [l.weights for l in net.layers]
    state = AdamState.for_params(params, lr)
    history = []
    t0 = time.perf_counter()
    n = train_times.shape[0]
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, batch_size):
            sel = order[lo : lo + batch_size]
            loss, grads = batch_loss_and_grads(net, train_times[sel], train_labels[sel], cp, rng)
            adam_step(params, grads, state)
            losses.append(loss)
        acc = evaluate(net, test_times, test_labels, rng) if test_times is not None else float("nan")
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "test_accuracy": acc,
            "wall_seconds": time.perf_counter() - t0,
            "m_train": net.config.m_train,
            "m_test": net.config.m_test,
            "e_rev": net.config.e_rev,
            "sigma_spike": net.config.sigma_spike,
            "seed": net.config.seed,
        }
        history.append(row)
        if log is not None:
            log(
                f"epoch {epoch}: loss={row['train_loss']:.5f} "
                f"acc={acc:.4f} ({row['wall_seconds']:.1f}s)"
            )
    if csv_path is not None:
        write_history_csv(csv_path, history)
    return history


def write_history_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in HISTORY_COLUMNS})
