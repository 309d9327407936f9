"""Batch-experiment front door.

Subcommands wire JSON configs to the library and write all artifacts into an
output directory.  Every run echoes its fully resolved configuration as
``config.resolved.json`` next to its outputs.  Exit codes: 0 success,
1 usage/config error, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    from contextlib import nullcontext

    def threadpool_limits(limits=None):
        return nullcontext()

from . import bench as bench_mod
from . import hardware as hw
from .autodiff import TapeDomainError, grad_check
from .data import DataFormatError, IdxFormatError, encode, load_idx, load_iris_csv
from .dstd import GridError, build_grid
from .network import (
    ModelConfig,
    SpikingNetwork,
    load_checkpoint,
    save_checkpoint,
    taped_layer_forward,
    _phase_grid,
)
from .neuron import FiringDomainError, NeuronParams, NumericOverflowError
from .training import CostParams, evaluate, init_rc, init_ttfs, train_and_eval

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(ValueError):
    pass


def _merge_config(defaults: dict, overrides: dict, path: str = "") -> dict:
    """Defaults updated by overrides; unknown keys are rejected."""
    out = dict(defaults)
    for key, val in overrides.items():
        if key not in defaults:
            raise UsageError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict) and isinstance(val, dict):
            out[key] = _merge_config(defaults[key], val, path=f"{path}{key}.")
        else:
            out[key] = val
    return out


def _load_config(args, defaults: dict) -> dict:
    cfg = defaults
    if args.config is not None:
        p = Path(args.config)
        if not p.exists():
            raise UsageError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"malformed config JSON: {exc}") from exc
        cfg = _merge_config(defaults, user)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, command: str, cfg: dict) -> None:
    doc = {"command": command, **cfg}
    (out / "config.resolved.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def _load_dataset(ds_cfg: dict, seed: int):
    """Returns (train EncodedDataset, test EncodedDataset, meta)."""
    kind = ds_cfg["kind"]
    if kind == "fashion_idx":
        xtr, ytr = load_idx(ds_cfg["train_images"], ds_cfg["train_labels"])
        xte, yte = load_idx(ds_cfg["test_images"], ds_cfg["test_labels"])
        tr = encode(xtr.reshape(len(xtr), -1), ytr, scheme="image", split="train")
        te = encode(xte.reshape(len(xte), -1), yte, scheme="image", split="test")
    elif kind == "iris_csv":
        x, y = load_iris_csv(ds_cfg["csv"])
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(y))
        n_test = int(ds_cfg["test_count"])
        te_i, tr_i = order[:n_test], order[n_test:]
        tr = encode(x[tr_i], y[tr_i], scheme="iris", split="train")
        te = encode(x[te_i], y[te_i], scheme="iris", split="test")
    elif kind == "digits_builtin":
        from sklearn.datasets import load_digits

        x, y = load_digits(return_X_y=True)
        x = x / 16.0
        n_test = int(ds_cfg["test_count"])
        tr = encode(x[:-n_test], y[:-n_test], scheme="image", split="train")
        te = encode(x[-n_test:], y[-n_test:], scheme="image", split="test")
    else:
        raise UsageError(f"unknown dataset kind {kind!r}")
    lim_tr = ds_cfg.get("limit_train") or 0
    lim_te = ds_cfg.get("limit_test") or 0
    if lim_tr:
        tr = type(tr)(times=tr.times[:lim_tr], labels=tr.labels[:lim_tr], split="train")
    if lim_te:
        te = type(te)(times=te.times[:lim_te], labels=te.labels[:lim_te], split="test")
    return tr, te


TRAIN_DEFAULTS = {
    "seed": 0,
    "dataset": {
        "kind": "digits_builtin",
        "train_images": "",
        "train_labels": "",
        "test_images": "",
        "test_labels": "",
        "csv": "",
        "test_count": 397,
        "limit_train": 0,
        "limit_test": 0,
    },
    "model": {
        "hidden": [100],
        "mode": "rc_spike",
        "e_rev": 4.0,
        "m_train": 10,
        "m_test": 30,
        "train_offset": "random",
        "sigma_spike": 0.01,
        "grid_span": 1.0,
    },
    "training": {
        "epochs": 10,
        "batch_size": 32,
        "learning_rate": 0.0,   # 0 -> mode default
        "tau_soft": 0.07,
        "gamma1": -1.0,         # <0 -> mode default
        "t_ref": -1.0,
        "gamma2": -1.0,
        "w_star": 2.0,
    },
}


def _build_model(model_cfg: dict, train_cfg: dict, n_in: int, n_out: int, seed: int):
    mode = model_cfg["mode"]
    base = CostParams.rc_default() if mode == "rc_spike" else CostParams.ttfs_default()
    cp = CostParams(
        tau_soft=train_cfg["tau_soft"],
        gamma1=base.gamma1 if train_cfg["gamma1"] < 0 else train_cfg["gamma1"],
        t_ref=base.t_ref if train_cfg["t_ref"] < 0 else train_cfg["t_ref"],
        gamma2=base.gamma2 if train_cfg["gamma2"] < 0 else train_cfg["gamma2"],
    )
    sizes = (n_in, *[int(h) for h in model_cfg["hidden"]], n_out)
    off = model_cfg["train_offset"]
    cfg = ModelConfig(
        layer_sizes=sizes,
        mode=mode,
        e_rev=model_cfg["e_rev"],
        m_train=model_cfg["m_train"],
        m_test=model_cfg["m_test"],
        train_offset=off if off == "random" else float(off),
        sigma_spike=model_cfg["sigma_spike"],
        grid_span=model_cfg["grid_span"],
        seed=seed,
    )
    rng = np.random.default_rng(seed)
    if mode == "rc_spike":
        weights = init_rc(sizes, rng)
        lr = 1e-4 if train_cfg["learning_rate"] == 0 else train_cfg["learning_rate"]
    else:
        weights = init_ttfs(sizes, cfg.e_rev, cp.t_ref, rng, w_star=train_cfg["w_star"])
        lr = 2e-4 if train_cfg["learning_rate"] == 0 else train_cfg["learning_rate"]
    return SpikingNetwork.build(cfg, weights), cp, lr


def cmd_train(args) -> int:
    cfg = _load_config(args, TRAIN_DEFAULTS)
    out = _out_dir(args)
    _write_resolved(out, "train", cfg)
    tr, te = _load_dataset(cfg["dataset"], cfg["seed"])
    n_out = int(max(tr.labels.max(), te.labels.max())) + 1
    net, cp, lr = _build_model(cfg["model"], cfg["training"], tr.n_features, n_out, cfg["seed"])
    history = train_and_eval(
        net, tr.times, tr.labels, te.times, te.labels,
        epochs=cfg["training"]["epochs"], cp=cp, lr=lr,
        batch_size=cfg["training"]["batch_size"],
        csv_path=out / "history.csv", log=print,
    )
    save_checkpoint(out / "checkpoint.json", net, extra={"final": history[-1]})
    print(f"final test accuracy: {history[-1]['test_accuracy']:.4f}")
    return EXIT_OK


EVAL_DEFAULTS = {"seed": 0, "checkpoint": "", "dataset": TRAIN_DEFAULTS["dataset"]}


def cmd_eval(args) -> int:
    cfg = _load_config(args, EVAL_DEFAULTS)
    out = _out_dir(args)
    _write_resolved(out, "eval", cfg)
    if not cfg["checkpoint"]:
        raise UsageError("eval requires a 'checkpoint' path in the config")
    net = load_checkpoint(cfg["checkpoint"])
    _, te = _load_dataset(cfg["dataset"], cfg["seed"])
    acc = evaluate(net, te.times, te.labels, np.random.default_rng(cfg["seed"]))
    (out / "metrics.json").write_text(json.dumps({"test_accuracy": acc}, indent=2))
    print(f"test accuracy: {acc:.4f}")
    return EXIT_OK


CONV_DEFAULTS = {
    "seed": 0,
    "n_samples": 1000,
    "n_spikes": 1000,
    "n_out": 10,
    "drive": bench_mod.DRIVE_SCALE,
    "m_values": [4, 8, 16, 32, 64, 128],
    "e_rev_values": [2.0, 4.0, 8.0, 16.0, 32.0, 64.0],
    "e_rev": 4.0,
    "m_steps": 8,
    "n_seeds": 3,
}


def cmd_convergence(args) -> int:
    cfg = _load_config(args, CONV_DEFAULTS)
    out = _out_dir(args)
    _write_resolved(out, "convergence", cfg)
    seeds = [cfg["seed"] + i for i in range(cfg["n_seeds"])]
    common = dict(
        n_samples=cfg["n_samples"], n_spikes=cfg["n_spikes"], n_out=cfg["n_out"],
        drive=cfg["drive"], seeds=seeds,
    )
    res_m = bench_mod.convergence_sweep("steps", cfg["m_values"], e_rev=cfg["e_rev"], **common)
    res_e = bench_mod.convergence_sweep("e_rev", cfg["e_rev_values"], m_steps=cfg["m_steps"], **common)
    bench_mod.write_sweep_csv(out / "convergence_steps.csv", res_m)
    bench_mod.write_sweep_csv(out / "convergence_e_rev.csv", res_e)
    bench_mod.write_slope_json(out / "slopes.json", {"steps": res_m, "e_rev": res_e})
    print(f"steps slope {res_m.slope:.3f} (r2 {res_m.r2:.3f}); "
          f"e_rev slope {res_e.slope:.3f} (r2 {res_e.r2:.3f})")
    return EXIT_OK


BENCH_DEFAULTS = {
    "seed": 0,
    "n_in_values": [100, 200, 500, 1000, 2000],
    "n_out": 32,
    "batch": 16,
    "repeats": 5,
    "m_rc": 10,
    "m_ttfs": 20,
    "e_rev": 4.0,
}


def cmd_bench(args) -> int:
    cfg = _load_config(args, BENCH_DEFAULTS)
    out = _out_dir(args)
    _write_resolved(out, "bench", cfg)
    results = {}
    for mode, m in (("rc_spike", cfg["m_rc"]), ("ttfs", cfg["m_ttfs"])):
        for path in ("exact", "dstd"):
            key = f"{mode}_{path}"
            results[key] = bench_mod.timing_sweep(
                path, cfg["n_in_values"], mode=mode, m_steps=m, n_out=cfg["n_out"],
                batch=cfg["batch"], e_rev=cfg["e_rev"], repeats=cfg["repeats"],
                seed=cfg["seed"],
            )
            bench_mod.write_sweep_csv(out / f"timing_{key}.csv", results[key])
            print(f"{key}: exponent {results[key].slope:.3f}")
    bench_mod.write_slope_json(out / "slopes.json", results)
    for mode in ("rc_spike", "ttfs"):
        i = list(results[f"{mode}_exact"].axis).index(1000) if 1000 in results[f"{mode}_exact"].axis else -1
        sp = results[f"{mode}_exact"].mean[i] / results[f"{mode}_dstd"].mean[i]
        print(f"{mode} speedup at n_in={int(results[f'{mode}_exact'].axis[i])}: {sp:.1f}x")
    return EXIT_OK


MAP_DEFAULTS = {
    "seed": 0,
    "dataset": {"kind": "iris_csv", "csv": "", "test_count": 50},
    "modes": ["ann_to_imc", "pnn_to_imc"],
    "lambda_sigma": 0.02,
    "epochs": 300,
    "scale_step": 0.01,
    "scale_window": [0.5, 1.5],
    "ann_e_rev": 100.0,
    "circuit": {},
}


def cmd_map(args) -> int:
    cfg = _load_config(args, MAP_DEFAULTS)
    out = _out_dir(args)
    _write_resolved(out, "map", cfg)
    if cfg["dataset"]["kind"] != "iris_csv" or not cfg["dataset"]["csv"]:
        raise UsageError("map requires dataset.kind='iris_csv' with a csv path")
    x, y = load_iris_csv(cfg["dataset"]["csv"])
    cp = hw.CircuitParams(lambda_sigma=cfg["lambda_sigma"], **cfg["circuit"])
    reports = {}
    for mode in cfg["modes"]:
        report, hist_rows, _ = hw.run_mapping(
            mode, x, y, cp, seed=cfg["seed"], epochs=cfg["epochs"],
            scale_step=cfg["scale_step"], scale_window=tuple(cfg["scale_window"]),
            ann_e_rev=cfg["ann_e_rev"], n_test=cfg["dataset"]["test_count"],
        )
        reports[mode] = report
        hw.write_histogram_csv(out / f"histogram_{mode}.csv", hist_rows)
        print(f"{mode}: rmse {report['rmse_s'] * 1e9:.3f} ns, "
              f"scale ({report['scale']['alpha_pos']:.2f}, {report['scale']['alpha_neg']:.2f})")
    (out / "report.json").write_text(json.dumps(reports, indent=2))
    return EXIT_OK


SIM_DEFAULTS = {
    "seed": 0,
    "dataset": {"kind": "iris_csv", "csv": "", "test_count": 50},
    "sample_index": 0,
    "checkpoint": "",
    "lambda_sigma": 0.0,
    "scale": [1.0, 1.0],
    "circuit": {},
}


def cmd_simulate(args) -> int:
    cfg = _load_config(args, SIM_DEFAULTS)
    out = _out_dir(args)
    _write_resolved(out, "simulate", cfg)
    if not cfg["dataset"]["csv"]:
        raise UsageError("simulate requires dataset.csv")
    x, y = load_iris_csv(cfg["dataset"]["csv"])
    ds = encode(x, y, scheme="iris")
    idx = int(cfg["sample_index"])
    if not 0 <= idx < len(ds):
        raise UsageError(f"sample_index {idx} out of range [0, {len(ds)})")
    cp = hw.CircuitParams(lambda_sigma=cfg["lambda_sigma"], **cfg["circuit"])
    if cfg["checkpoint"]:
        net = load_checkpoint(cfg["checkpoint"])
    else:
        derived = hw.derive_params(cp)
        mc = ModelConfig(
            layer_sizes=(ds.n_features, 5, 5), mode="rc_spike",
            e_rev=derived.neuron.e_rev_pos, e_rev_neg=derived.neuron.e_rev_neg,
            sigma_spike=0.0, seed=cfg["seed"],
        )
        net = SpikingNetwork.build(mc, init_rc(mc.layer_sizes, np.random.default_rng(cfg["seed"])))
    scale = hw.ScaleVector(*cfg["scale"])
    cms = [hw.to_currents(l.weights, cp, scale) for l in net.layers]
    res = hw.simulate_circuit(cms, cp, ds.times[idx : idx + 1], record_trace=True)
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "phase", "time_s", "voltage_v"])
        for row in res.trace:
            w.writerow([row[0], row[1], repr(float(row[2])), repr(float(row[3]))])
    spikes = [t[0].tolist() for t in res.layer_times_s]
    (out / "spikes.json").write_text(json.dumps({"layer_firing_times_s": spikes}, indent=2))
    print(f"trace written ({len(res.trace)} rows)")
    return EXIT_OK


GRADCHECK_DEFAULTS = {
    "seed": 0,
    "modes": ["rc_spike", "ttfs"],
    "n_models": 5,
    "tolerance": 1e-5,
    "sizes": [5, 6, 4],
    "m_steps": 6,
}


def cmd_gradcheck(args) -> int:
    from .autodiff import Tape
    from .training import cost_taped

    cfg = _load_config(args, GRADCHECK_DEFAULTS)
    out = _out_dir(args)
    _write_resolved(out, "gradcheck", cfg)
    rng = np.random.default_rng(cfg["seed"])
    sizes = tuple(cfg["sizes"])
    worst = 0.0
    for mode in cfg["modes"]:
        for k in range(cfg["n_models"]):
            params = NeuronParams.symmetric(2.0 + rng.uniform(0, 4))
            grids = [build_grid(cfg["m_steps"], mode, t_offset=float(rng.uniform(0.01, 0.9)) / cfg["m_steps"])
                     for _ in range(len(sizes) - 1)]
            x = rng.uniform(0.05, 0.95, (3, sizes[0]))
            if mode == "rc_spike":
                ws = [rng.uniform(-0.8, 0.8, (o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
            else:
                ws = [rng.uniform(0.5, 2.0, (o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
            from .network import LayerSpec

            layers = [LayerSpec(w, params, mode) for w in ws]

            def prog(*leaves):
                t = leaves[0].tape.constant(x)
                for layer, w, grid in zip(layers, leaves, grids):
                    t = taped_layer_forward(t, w, layer, grid)
                return (t * t).sum()

            err = grad_check(prog, ws)
            worst = max(worst, err)
    (out / "gradcheck.json").write_text(json.dumps({"max_rel_err": worst}, indent=2))
    print(f"max relative gradient error: {worst:.3e}")
    if worst > cfg["tolerance"]:
        print(f"FAIL: exceeds tolerance {cfg['tolerance']}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="revspike", description=__doc__)
    ap.add_argument("--config", default=None, help="JSON config file")
    ap.add_argument("--seed", type=int, default=None, help="override config seed")
    ap.add_argument("--out", default="runs", help="output directory")
    ap.add_argument("--threads", type=int, default=0, help="worker thread cap (0 = default)")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name)
        sp.set_defaults(func=fn)
    return ap


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "convergence": cmd_convergence,
    "bench": cmd_bench,
    "map": cmd_map,
    "simulate": cmd_simulate,
    "gradcheck": cmd_gradcheck,
}


def dispatch(argv) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        if args.threads and args.threads > 0:
            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except (UsageError, GridError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FiringDomainError, ArithmeticError) as exc:
        # ArithmeticError covers overflow and tape-domain failures
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IdxFormatError, DataFormatError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
