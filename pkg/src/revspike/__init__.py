"""Spiking networks with reversal potentials: event-exact closed forms, a fast
differentiable spike-time discretization, training, and behavioral mapping of
trained models onto an analog in-memory-computing circuit."""

from .neuron import (
    NeuronParams,
    SortedSpikes,
    sort_spikes,
    accumulate_exact,
    trace_exact,
    fire_rc,
    fire_ttfs,
    oracle_rk4,
    sentinel_time,
    is_fired,
)
from .dstd import (
    DstdGrid,
    SpikeVariables,
    build_grid,
    discretize,
    coefficients_fg,
    accumulate_dstd,
    fire_ttfs_dstd,
)
from .autodiff import Tape, Tensor, forward_record, backward, grad_check
from .network import (
    LayerSpec,
    ModelConfig,
    SpikingNetwork,
    inject_noise,
    layer_forward,
    forward_pass,
    save_checkpoint,
    load_checkpoint,
)
from .training import (
    CostParams,
    AdamState,
    cost,
    init_rc,
    init_ttfs,
    adam_step,
    train_and_eval,
    evaluate,
)
from .data import EncodedDataset, load_idx, load_iris_csv, encode, synth_spikes
from .hardware import CircuitParams, ScaleVector, derive_params, to_currents, simulate_circuit, run_mapping
from .bench import SweepResult, fit_slope, convergence_sweep, timing_sweep
from .estimator import SpikingClassifier

__version__ = "0.1.0"
