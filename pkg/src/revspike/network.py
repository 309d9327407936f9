"""Layered model assembly: fully connected spiking networks.

Two forward flavours per layer:

* exact: the conventional formulation of the closed forms.  The step-function
  coefficient sums are evaluated at every spike time through an N x N
  triangular mask (a matmul), which is what makes the conventional path cost
  O(N_in^2 N_out) per sample for the two-phase model and worse for the
  threshold model.  This is the path the timing benchmarks measure.
* dstd: the fast discretized path, O(M N_in N_out).

The taped (differentiable) forward mirrors the plain DSTD ops one to one so
that recorded values reproduce un-taped values bit for bit.
"""

from __future__ import annotations

import base64
import json
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, stack
from .dstd import DstdGrid, build_grid, discretize, coefficients_fg, accumulate_dstd, fire_ttfs_dstd
from .neuron import (
    NeuronParams,
    _phi,
    _ttfs_candidate_vec,
    fire_rc,
    is_fired,
    sentinel_time,
)

__all__ = [
    "LayerSpec",
    "ModelConfig",
    "SpikingNetwork",
    "inject_noise",
    "layer_forward",
    "forward_pass",
    "taped_forward",
    "accumulate_layer_conventional",
    "save_checkpoint",
    "load_checkpoint",
]

_PHI_SMALL = 1e-12
CHECKPOINT_FORMAT = "revspike-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class LayerSpec:
    """One fully connected layer: weight matrix plus shared neuron params."""

    weights: np.ndarray          # (fan_out, fan_in)
    params: NeuronParams
    mode: str = "rc_spike"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("layer weights must be finite")
        if self.mode not in ("rc_spike", "ttfs"):
            raise ValueError(f"unknown layer mode {self.mode!r}")

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]


@dataclass
class ModelConfig:
    """Everything needed to build and run a model reproducibly."""

    layer_sizes: tuple            # e.g. (784, 100, 10)
    mode: str = "rc_spike"
    e_rev: float = 4.0
    e_rev_neg: float | None = None   # default: -e_rev
    alpha: float = 0.0
    m_train: int = 10
    m_test: int = 30
    train_offset: str | float = "random"
    test_offset: float | None = None  # default: delta_tau / 2
    sigma_spike: float = 0.01
    grid_span: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if self.m_test < self.m_train:
            warnings.warn("m_test < m_train: test-phase discretization is coarser than training")

    def neuron_params(self) -> NeuronParams:
        neg = -self.e_rev if self.e_rev_neg is None else self.e_rev_neg
        return NeuronParams(e_rev_pos=self.e_rev, e_rev_neg=neg, alpha=self.alpha)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_sizes"] = list(self.layer_sizes)
        return d


class SpikingNetwork:
    """A stack of :class:`LayerSpec` plus its :class:`ModelConfig`."""

    def __init__(self, layers: list[LayerSpec], config: ModelConfig):
        self.layers = layers
        self.config = config
        sizes = [layers[0].fan_in] + [l.fan_out for l in layers]
        if tuple(sizes) != config.layer_sizes:
            raise ValueError(f"layer shapes {sizes} do not match config {config.layer_sizes}")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @classmethod
    def build(cls, config: ModelConfig, weights: list[np.ndarray]) -> "SpikingNetwork":
        params = config.neuron_params()
        layers = [LayerSpec(w, params, config.mode) for w in weights]
        return cls(layers, config)


def inject_noise(
    times: np.ndarray,
    sigma: float,
    rng: np.random.Generator,
    mode: str = "rc_spike",
    horizon: float = 1.0,
) -> np.ndarray:
    """Additive Gaussian spike-timing noise (the finite-precision stand-in).

    Sentinel entries pass through untouched; rc_spike results are re-clipped
    into [0, 1] to keep the hardware interpretation of the firing phase.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    t = np.asarray(times, dtype=float)
    if sigma == 0.0:
        return t
    fired = is_fired(t, horizon)
    noisy = t + sigma * rng.standard_normal(t.shape) * fired
    if mode == "rc_spike":
        noisy = np.clip(noisy, 0.0, horizon)
    return np.where(fired, noisy, t)


# ---------------------------------------------------------------------------
# Plain (inference) forward passes
# ---------------------------------------------------------------------------


def _conventional_fg(times: np.ndarray, layer: LayerSpec, horizon: float):
    """Sorted times plus coefficient matrices via the triangular step mask.

    Returns (ts, live, f, g) with ts (B, N), f/g (O, B, N).  This is the
    conventional evaluation of the step-function sums at every spike time:
    the N x N arrival mask is materialized and contracted per output neuron,
    which is what makes the conventional path cost O(B N^2 O).  The
    contraction is a plain einsum on purpose; a shape-tuned GEMM would hide
    the algorithmic scaling behind size-dependent kernel efficiency.
    """
    p = layer.params
    t = np.asarray(times, dtype=float)
    fired = is_fired(t, horizon)
    sen = sentinel_time(horizon)
    t_eff = np.where(fired, t, 2.0 * sen)
    order = np.argsort(t_eff, axis=1, kind="stable")
    ts = np.take_along_axis(t_eff, order, axis=1)
    live = np.take_along_axis(fired, order, axis=1)
    ws = np.take(layer.weights, order, axis=1) * live[None, :, :]       # (O, B, N)
    wbs = np.take(layer.weights * p.beta_of(layer.weights), order, axis=1) * live[None, :, :]
    N = t.shape[1]
    mask = np.triu(np.ones((N, N)))                                      # mask[j, k] = j <= k
    f = p.alpha + np.einsum("obj,jk->obk", wbs, mask, optimize=False)
    g = np.einsum("obj,jk->obk", ws, mask, optimize=False)
    return ts, live, f, g


def accumulate_layer_conventional(
    times: np.ndarray, layer: LayerSpec, horizon: float = 1.0
) -> np.ndarray:
    """End-of-accumulation potentials (B, O) via the conventional evaluation."""
    ts, live, f, g = _conventional_fg(times, layer, horizon)
    B, N = ts.shape
    ts_c = np.minimum(np.where(live, ts, horizon), horizon)
    d = np.diff(np.concatenate([ts_c, np.full((B, 1), horizon)], axis=1), axis=1)
    x = f * d[None]
    c = np.cumsum(x, axis=-1)
    v = (g * d[None] * _phi(x) * np.exp(-(c[..., -1:] - c))).sum(-1)     # (O, B)
    return v.T


def _exact_rc_layer(times: np.ndarray, layer: LayerSpec, horizon: float) -> np.ndarray:
    v = accumulate_layer_conventional(times, layer, horizon)
    return np.clip(1.0 - v, 0.0, 1.0)


def _exact_ttfs_layer(times: np.ndarray, layer: LayerSpec, horizon: float) -> np.ndarray:
    ts, live, f, g = _conventional_fg(times, layer, horizon)
    p = layer.params
    sen = sentinel_time(horizon)
    O, B, N = f.shape
    out = np.full((O, B), sen)
    got = np.zeros((O, B), dtype=bool)
    v = np.zeros((O, B))
    for j in range(N):
        t0 = ts[:, j]
        if j > 0:
            dseg = np.where(live[:, j - 1], t0 - ts[:, j - 1], 0.0)
            fj, gj = f[:, :, j - 1], g[:, :, j - 1]
            v = v + (gj - fj * v) * dseg[None, :] * _phi(fj * dseg[None, :])
        t1 = ts[:, j + 1] if j + 1 < N else np.full(B, np.inf)
        cand = _ttfs_candidate_vec(t0[None, :], v, f[:, :, j], g[:, :, j], p.v_th)
        ok = live[None, :, j] & ~got & (cand > t0[None, :]) & (cand <= t1[None, :]) & (cand < sen)
        out = np.where(ok, cand, out)
        got |= ok
    return out.T


def layer_forward(
    times: np.ndarray,
    layer: LayerSpec,
    grid: DstdGrid | None = None,
    horizon: float = 1.0,
) -> np.ndarray:
    """One layer's firing times for a (B, fan_in) batch of input trains.

    ``grid=None`` selects the exact (conventional) path; a grid selects the
    fast DSTD path.  Numeric failures carry the layer shape in the message.
    """
    t = np.atleast_2d(np.asarray(times, dtype=float))
    if t.shape[1] != layer.fan_in:
        raise ValueError(f"input width {t.shape[1]} != fan_in {layer.fan_in}")
    try:
        if grid is None:
            if layer.mode == "rc_spike":
                return _exact_rc_layer(t, layer, horizon)
            return _exact_ttfs_layer(t, layer, horizon)
        sv = discretize(t, grid, horizon=horizon)
        f, g = coefficients_fg(sv, layer.weights, layer.params)
        if layer.mode == "rc_spike":
            v = accumulate_dstd(f, g, grid)
            return np.clip(1.0 - v, 0.0, 1.0)
        return fire_ttfs_dstd(f, g, grid, layer.params, horizon=horizon)
    except FloatingPointError as exc:
        raise type(exc)(f"layer ({layer.fan_out}x{layer.fan_in}): {exc}") from exc


def _phase_grid(net: SpikingNetwork, phase: str, rng: np.random.Generator | None) -> DstdGrid:
    cfg = net.config
    if phase == "train":
        m = cfg.m_train
        off = cfg.train_offset
        if off == "random":
            return build_grid(m, cfg.mode, t_offset=None, rng=rng, span=cfg.grid_span)
        return build_grid(m, cfg.mode, t_offset=float(off), span=cfg.grid_span)
    m = cfg.m_test
    off = cfg.test_offset
    if off is None:
        off = 0.5 * cfg.grid_span / m
    return build_grid(m, cfg.mode, t_offset=float(off), span=cfg.grid_span)


def forward_pass(
    times: np.ndarray,
    net: SpikingNetwork,
    phase: str = "test",
    rng: np.random.Generator | None = None,
    exact: bool = False,
    collect: bool = False,
):
    """Chain the layers; train phase uses M_train and the offset policy,
    test phase uses M_test with a fixed offset.  Noise (when configured) is
    applied to every layer's outputs, inference included; it needs ``rng``.

    With ``collect=True`` returns ``(outputs, [per-layer outputs])``.
    """
    if phase not in ("train", "test"):
        raise ValueError(f"unknown phase {phase!r}")
    cfg = net.config
    if cfg.sigma_spike > 0.0 and rng is None:
        raise ValueError("sigma_spike > 0 requires an rng")
    t = np.atleast_2d(np.asarray(times, dtype=float))
    horizon = cfg.grid_span
    recorded = []
    for layer in net.layers:
        grid = None if exact else _phase_grid(net, phase, rng)
        t = layer_forward(t, layer, grid=grid, horizon=horizon)
        if cfg.sigma_spike > 0.0:
            t = inject_noise(t, cfg.sigma_spike, rng, mode=cfg.mode, horizon=horizon)
        recorded.append(t)
    return (t, recorded) if collect else t


# ---------------------------------------------------------------------------
# Taped (differentiable) forward — mirrors the plain DSTD ops exactly
# ---------------------------------------------------------------------------


def _taped_phi(x: Tensor) -> Tensor:
    small = np.abs(x.value) < _PHI_SMALL
    safe = x.where(~small, 1.0)
    taylor = 1.0 - 0.5 * x + x * x / 6.0
    return taylor.where(small, -((-safe).expm1()) / safe)


def _taped_hat(t: Tensor, grid: DstdGrid) -> Tensor:
    """Dense differentiable hat masses, (B, N, P); matches :func:`discretize`."""
    pts = grid.points
    widths = np.diff(pts)
    left_edge = np.concatenate([[pts[0] - widths[0]], pts[:-1]])
    left_w = np.concatenate([[widths[0]], widths])
    right_edge = np.concatenate([pts[1:], [pts[-1] + widths[-1]]])
    right_w = np.concatenate([widths, [widths[-1]]])
    tb = t[:, :, None] if len(t.shape) == 2 else t[:, None]
    rise = (tb - left_edge) / left_w
    fall = (right_edge - tb) / right_w
    return rise.minimum(fall).clip01()


def _taped_rc_potential(f: Tensor, g: Tensor, widths: np.ndarray) -> Tensor:
    x = f * widths
    c = x.cumsum(-1)
    z = (-(c[..., -1:] - c)).exp()
    return (g * widths * _taped_phi(x) * z).sum(-1)


def _taped_ttfs_fire(
    f: Tensor, g: Tensor, grid: DstdGrid, params: NeuronParams, horizon: float
) -> Tensor:
    sen = sentinel_time(horizon)
    starts = grid.slot_starts
    widths = grid.slot_widths
    v = None
    cands = []
    for m in range(grid.n_slots):
        fm = f[..., m]
        gm = g[..., m]
        small = np.abs(fm.value) < _PHI_SMALL
        if v is None:
            v_val = np.zeros(fm.shape)
            v = fm.tape.constant(v_val)
        # linear branch: t0 + (v_th - v)/g
        lin_ok = small & (gm.value > 0.0)
        g_safe = gm.where(lin_ok, 1.0)
        cand_lin = starts[m] + (params.v_th - v) / g_safe
        # log branch: t0 + ln(a/b)/f
        a = gm - fm * v
        b = gm - fm * params.v_th
        log_ok = ~small & (a.value > 0.0) & (b.value > 0.0) & (a.value >= b.value)
        ratio = (a.where(log_ok, 1.0)) / (b.where(log_ok, 1.0))
        cand_log = starts[m] + ratio.log() / fm.where(log_ok, 1.0)
        cand = cand_lin.where(small, cand_log)
        cv = cand.value
        ok = (lin_ok | log_ok) & (cv > starts[m]) & (cv <= starts[m] + widths[m]) & (cv < sen)
        cands.append(cand.where(ok, np.inf))
        v = v + (gm - fm * v) * widths[m] * _taped_phi(fm * widths[m])
    tmin = stack(cands, axis=-1).reduce_min(axis=-1)
    fired = np.isfinite(tmin.value)
    return tmin.where(fired, sen)


def taped_layer_forward(
    t: Tensor,
    w: Tensor,
    layer: LayerSpec,
    grid: DstdGrid,
    horizon: float = 1.0,
    clip_output: bool = True,
) -> Tensor:
    """Differentiable DSTD layer: spike times (B, I) -> spike times (B, O).

    ``w`` is the taped weight leaf for this layer.  The per-synapse beta mask
    is recomputed from the current weight signs each forward (its weight
    derivative is zero almost everywhere).  ``clip_output=False`` returns the
    raw two-phase firing time 1 - v without the window clip (used for the
    readout layer during training; see :func:`taped_forward`).
    """
    p = layer.params
    s = _taped_hat(t, grid)
    S = s.cumsum(-1)
    S_slots = S[..., :-1]
    g = w @ S_slots
    beta = p.beta_of(w.value)
    f = (w * beta) @ S_slots
    if p.alpha != 0.0:
        f = f + p.alpha
    if layer.mode == "rc_spike":
        v = _taped_rc_potential(f, g, grid.slot_widths)
        out = 1.0 - v
        return out.clip01() if clip_output else out
    return _taped_ttfs_fire(f, g, grid, p, horizon)


def taped_forward(
    tape: Tape,
    times: np.ndarray,
    net: SpikingNetwork,
    grids: list[DstdGrid],
    rng: np.random.Generator | None = None,
    readout_preclip: bool = False,
):
    """Record a full training-phase forward pass on ``tape``.

    Returns ``(outputs, weight_leaves, layer_outputs)``.  Noise draws are
    constants on the tape (gradients pass through the perturbed clip).

    ``readout_preclip=True`` (two-phase mode) leaves the *final* layer's
    firing time unsaturated.  Between layers the window clip is physical and
    stays; at the readout it only feeds the cost, the argmin readout is
    invariant to the monotone clip, and saturated readout neurons would
    otherwise receive zero gradient and stop learning permanently.
    """
    cfg = net.config
    horizon = cfg.grid_span
    t = tape.constant(np.atleast_2d(np.asarray(times, dtype=float)))
    leaves = [tape.leaf(layer.weights, name=f"w{i}") for i, layer in enumerate(net.layers)]
    outs = []
    for li, (layer, w, grid) in enumerate(zip(net.layers, leaves, grids)):
        last = li == len(net.layers) - 1
        clip_out = not (last and readout_preclip and cfg.mode == "rc_spike")
        t = taped_layer_forward(t, w, layer, grid, horizon, clip_output=clip_out)
        if cfg.sigma_spike > 0.0:
            if rng is None:
                raise ValueError("sigma_spike > 0 requires an rng")
            fired = is_fired(t.value, horizon)
            eps = cfg.sigma_spike * rng.standard_normal(t.shape) * fired
            t = t + eps
            if cfg.mode == "rc_spike" and clip_out:
                t = t.clip01()
        outs.append(t)
    return t, leaves, outs


def taped_exact_rc_layer(
    t: Tensor,
    w: Tensor,
    layer: LayerSpec,
    horizon: float = 1.0,
    clip_output: bool = True,
) -> Tensor:
    """Differentiable *exact* two-phase layer (no discretization).

    The sort permutation is recomputed from current values each forward (a
    constant of the tape); gradients flow through the gathered times and
    weights.  Assumes every input fired (the two-phase chain never produces
    sentinels).  Meant for verification-scale models: cost is the
    conventional quadratic one.
    """
    p = layer.params
    tape = t.tape
    order = np.argsort(t.value, axis=1, kind="stable")
    ts = t.take_along(order, axis=1)                        # (B, N)
    ws = w.take(order, axis=1).swap_axes(0, 1)              # (B, O, N)
    wbs = (w * p.beta_of(w.value)).take(order, axis=1).swap_axes(0, 1)
    f = wbs.cumsum(-1)
    if p.alpha != 0.0:
        f = f + p.alpha
    g = ws.cumsum(-1)
    B = t.value.shape[0]
    end = tape.constant(np.full((B, 1), horizon))
    d = ad.concat([ts[:, 1:], end], axis=1) - ts            # (B, N)
    d = d[:, None, :]
    x = f * d
    c = x.cumsum(-1)
    z = (-(c[..., -1:] - c)).exp()
    v = (g * d * _taped_phi(x) * z).sum(-1)                 # (B, O)
    out = 1.0 - v
    return out.clip01() if clip_output else out


def taped_exact_ttfs_layer(
    t: Tensor, w: Tensor, layer: LayerSpec, horizon: float = 1.0
) -> Tensor:
    """Differentiable exact threshold-coded layer (verification scale).

    Same interval walk as the closed-form path, with the sorted spike times
    as differentiable slot boundaries.  Assumes all inputs fired.
    """
    p = layer.params
    sen = sentinel_time(horizon)
    order = np.argsort(t.value, axis=1, kind="stable")
    ts = t.take_along(order, axis=1)                        # (B, N)
    ws = w.take(order, axis=1).swap_axes(0, 1)              # (B, O, N)
    wbs = (w * p.beta_of(w.value)).take(order, axis=1).swap_axes(0, 1)
    f = wbs.cumsum(-1)
    if p.alpha != 0.0:
        f = f + p.alpha
    g = ws.cumsum(-1)
    B, N = t.value.shape
    v = None
    cands = []
    for j in range(N):
        fj = f[..., j]
        gj = g[..., j]
        start = ts[:, j : j + 1]                            # (B, 1)
        if v is None:
            v = fj.tape.constant(np.zeros(fj.shape))
        else:
            dseg = ts[:, j : j + 1] - ts[:, j - 1 : j]
            fp, gp = f[..., j - 1], g[..., j - 1]
            v = v + (gp - fp * v) * dseg * _taped_phi(fp * dseg)
        small = np.abs(fj.value) < _PHI_SMALL
        lin_ok = small & (gj.value > 0.0)
        cand_lin = start + (p.v_th - v) / gj.where(lin_ok, 1.0)
        a = gj - fj * v
        b = gj - fj * p.v_th
        log_ok = ~small & (a.value > 0.0) & (b.value > 0.0) & (a.value >= b.value)
        ratio = (a.where(log_ok, 1.0)) / (b.where(log_ok, 1.0))
        cand_log = start + ratio.log() / fj.where(log_ok, 1.0)
        cand = cand_lin.where(small, cand_log)
        cv = cand.value
        t1 = ts.value[:, j + 1 : j + 2] if j + 1 < N else np.full((B, 1), np.inf)
        ok = (lin_ok | log_ok) & (cv > ts.value[:, j : j + 1]) & (cv <= t1) & (cv < sen)
        cands.append(cand.where(ok, np.inf))
    tmin = ad.stack(cands, axis=-1).reduce_min(axis=-1)
    return tmin.where(np.isfinite(tmin.value), sen)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "<f8", "data": base64.b64encode(a.tobytes()).decode()}


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=d["dtype"]).reshape(d["shape"]).copy()


def save_checkpoint(path, net: SpikingNetwork, extra: dict | None = None) -> None:
    """Versioned JSON container: config, neuron params, row-major f8 weights."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": net.config.to_dict(),
        "layers": [_encode_array(l.weights) for l in net.layers],
    }
    if extra:
        doc["extra"] = extra
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> SpikingNetwork:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} file: {path}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    cfg_d = dict(doc["config"])
    cfg = ModelConfig(**cfg_d)
    weights = [_decode_array(d) for d in doc["layers"]]
    return SpikingNetwork.build(cfg, weights)
