import csv
import math

import numpy as np
import pytest

from revspike.network import ModelConfig, SpikingNetwork, forward_pass
from revspike.training import (
    AdamState,
    CostParams,
    adam_step,
    batch_loss_and_grads,
    cost,
    evaluate,
    init_rc,
    init_ttfs,
    train_and_eval,
    ttfs_w_max,
    write_history_csv,
    HISTORY_COLUMNS,
)


class TestCost:
    def test_two_neuron_value(self):
        # t=(0,1), label 0, tau=1: ln(e^0/(e^0+e^1)) = -ln(1+e)
        cp = CostParams(tau_soft=1.0, gamma1=0.0, t_ref=0.0, gamma2=0.0)
        c = cost(np.array([[0.0, 1.0]]), np.array([0]), cp)
        assert c == pytest.approx(-math.log(1.0 + math.e), abs=1e-12)

    def test_uniform_outputs_symmetry(self):
        cp = CostParams(tau_soft=0.07, gamma1=0.0, t_ref=0.0)
        for const in (0.1, 0.5, 0.9):
            c = cost(np.full((3, 10), const), np.array([0, 3, 7]), cp)
            assert c == pytest.approx(math.log(1.0 / 10.0), abs=1e-12)

    def test_temporal_zero_at_reference(self):
        cp = CostParams(tau_soft=0.07, gamma1=5.0, t_ref=0.4)
        base = CostParams(tau_soft=0.07, gamma1=0.0, t_ref=0.4)
        t = np.full((2, 4), 0.4)
        y = np.array([0, 1])
        assert cost(t, y, cp) == pytest.approx(cost(t, y, base))

    def test_shift_invariance_of_classification_term(self, rng):
        cp = CostParams(tau_soft=0.07, gamma1=0.0, t_ref=0.0)
        t = rng.uniform(0, 1, (5, 6))
        y = rng.integers(0, 6, 5)
        assert cost(t, y, cp) == pytest.approx(cost(t + 0.3, y, cp), abs=1e-9)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            cost(np.zeros((0, 3)), np.array([], dtype=int), CostParams())

    def test_q_term_added(self):
        cp = CostParams(tau_soft=1.0, gamma1=0.0, t_ref=0.0, gamma2=0.5)
        base = cost(np.array([[0.0, 1.0]]), np.array([0]),
                    CostParams(tau_soft=1.0, gamma1=0.0, t_ref=0.0))
        assert cost(np.array([[0.0, 1.0]]), np.array([0]), cp, q_value=2.0) == pytest.approx(base + 1.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            CostParams(tau_soft=0.0)
        with pytest.raises(ValueError):
            CostParams(gamma1=-1.0)


class TestInit:
    def test_rc_scale(self):
        ws = init_rc((784, 400, 10), np.random.default_rng(0))
        a0 = math.sqrt(6.0 / (784 + 400))
        assert a0 == pytest.approx(0.0711868, abs=1e-6)
        assert np.abs(ws[0]).max() <= a0
        assert ws[0].shape == (400, 784)

    def test_rc_reproducible(self):
        w1 = init_rc((10, 5), np.random.default_rng(42))
        w2 = init_rc((10, 5), np.random.default_rng(42))
        assert np.array_equal(w1[0], w2[0])

    def test_ttfs_w_max_value(self):
        # L=2, t_ref=3.2, beta=0.25 (e_rev=4), w*=2
        wm = ttfs_w_max(2, 4.0, 3.2, w_star=2.0)
        assert wm == pytest.approx(3.5960259, abs=1e-6)

    def test_ttfs_w_max_ideal_limit(self):
        exact = ttfs_w_max(2, math.inf, 3.2)
        near = ttfs_w_max(2, 1e8, 3.2)
        assert near == pytest.approx(exact, rel=1e-7)
        assert exact == pytest.approx(4 * 2 * 4 / 3.2**2)

    def test_ttfs_nonnegative_default(self):
        ws = init_ttfs((20, 10, 3), 4.0, 3.2, np.random.default_rng(0))
        assert all(np.all(w >= 0) for w in ws)
        assert np.max(ws[0]) <= ttfs_w_max(2, 4.0, 3.2) / 20

    def test_ttfs_signed_toggle(self):
        ws = init_ttfs((20, 3), 4.0, 3.2, np.random.default_rng(0), signed=True)
        assert np.min(ws[0]) < 0 < np.max(ws[0])

    def test_ttfs_invalid_e_rev(self):
        with pytest.raises(ValueError):
            init_ttfs((5, 2), 0.8, 3.2, np.random.default_rng(0))


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = [np.ones((2, 2))]
        st = AdamState.for_params(p, lr=0.1)
        adam_step(p, [np.zeros((2, 2))], st)
        assert np.array_equal(p[0], np.ones((2, 2)))
        assert st.step == 1

    def test_first_step_magnitude(self):
        p = [np.zeros(3)]
        st = AdamState.for_params(p, lr=0.01)
        adam_step(p, [np.full(3, 7.0)], st)
        assert np.allclose(np.abs(p[0]), 0.01, rtol=1e-6)

    def test_deterministic_trajectory(self):
        def run():
            rng = np.random.default_rng(0)
            p = [rng.uniform(-1, 1, (3, 3))]
            st = AdamState.for_params(p, lr=0.05)
            for _ in range(20):
                adam_step(p, [np.sin(p[0])], st)
            return p[0]

        assert np.array_equal(run(), run())


def toy_separable(n=60, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.uniform(0.4, 0.9, (n, 2))
    x[np.arange(n), y] = rng.uniform(0.0, 0.2, n)
    return x, y


class TestTrainLoop:
    def test_single_epoch_history_row(self):
        x, y = toy_separable(10)
        cfg = ModelConfig(layer_sizes=(2, 4, 2), mode="rc_spike", e_rev=3.0,
                          m_train=4, m_test=8, sigma_spike=0.0, seed=0)
        net = SpikingNetwork.build(cfg, init_rc(cfg.layer_sizes, np.random.default_rng(0)))
        hist = train_and_eval(net, x, y, x, y, epochs=1, cp=CostParams.rc_default(), lr=1e-3)
        assert len(hist) == 1
        assert set(HISTORY_COLUMNS) <= set(hist[0])

    def test_loss_decreases_on_fixed_batch(self):
        x, y = toy_separable(32)
        cfg = ModelConfig(layer_sizes=(2, 6, 2), mode="rc_spike", e_rev=3.0,
                          m_train=6, m_test=8, sigma_spike=0.0, seed=1)
        net = SpikingNetwork.build(cfg, init_rc(cfg.layer_sizes, np.random.default_rng(1)))
        # 50 full-batch steps on the same fixed batch
        hist = train_and_eval(net, x, y, None, None, epochs=50,
                              cp=CostParams.rc_default(), lr=1e-3, batch_size=32)
        assert hist[-1]["train_loss"] < hist[0]["train_loss"]

    def test_argmin_readout(self):
        # identity layer: outputs equal inputs, argmin rule picks column 0
        cfg = ModelConfig(layer_sizes=(2, 2), mode="rc_spike", e_rev=1e9,
                          m_train=4, m_test=8, sigma_spike=0.0, seed=0)
        net = SpikingNetwork.build(cfg, [np.eye(2)])
        acc = evaluate(net, np.array([[0.2, 0.9]]), np.array([0]), np.random.default_rng(0))
        assert acc == 1.0
        out = forward_pass(np.array([[0.2, 0.9]]), net, phase="test")
        assert np.argmin(out, axis=1)[0] == 0

    def test_dimension_mismatch(self):
        x, y = toy_separable(8)
        cfg = ModelConfig(layer_sizes=(3, 2), mode="rc_spike")
        net = SpikingNetwork.build(cfg, [np.zeros((2, 3))])
        with pytest.raises(ValueError):
            train_and_eval(net, x, y, x, y, epochs=1, cp=CostParams.rc_default())

    def test_history_deterministic(self, tmp_path):
        def run(path):
            x, y = toy_separable(24, seed=3)
            cfg = ModelConfig(layer_sizes=(2, 3, 2), mode="rc_spike", e_rev=2.0,
                              m_train=4, m_test=6, sigma_spike=0.01, seed=11)
            net = SpikingNetwork.build(cfg, init_rc(cfg.layer_sizes, np.random.default_rng(11)))
            train_and_eval(net, x, y, x, y, epochs=3, cp=CostParams.rc_default(),
                           lr=1e-3, csv_path=path)

        run(tmp_path / "h1.csv")
        run(tmp_path / "h2.csv")
        rows1 = list(csv.DictReader(open(tmp_path / "h1.csv")))
        rows2 = list(csv.DictReader(open(tmp_path / "h2.csv")))
        for r1, r2 in zip(rows1, rows2):
            for col in HISTORY_COLUMNS:
                if col == "wall_seconds":
                    continue
                assert r1[col] == r2[col]

    def test_q_regularizer_changes_ttfs_gradients(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0.1, 0.9, (6, 4))
        y = rng.integers(0, 3, 6)
        cfg = ModelConfig(layer_sizes=(4, 5, 3), mode="ttfs", e_rev=4.0,
                          m_train=6, m_test=6, sigma_spike=0.0, seed=0)
        ws = [rng.uniform(0.6, 1.8, (o, i)) for i, o in zip(cfg.layer_sizes[:-1], cfg.layer_sizes[1:])]
        net = SpikingNetwork.build(cfg, ws)
        cp0 = CostParams(tau_soft=0.07, gamma1=0.1, t_ref=0.6, gamma2=0.0)
        cpq = CostParams(tau_soft=0.07, gamma1=0.1, t_ref=0.6, gamma2=1e-3)
        _, g0 = batch_loss_and_grads(net, x, y, cp0, np.random.default_rng(1))
        _, gq = batch_loss_and_grads(net, x, y, cpq, np.random.default_rng(1))
        diff = gq[0] - g0[0]
        # Q adds +gamma2 * (mean arrival mask), a nonnegative perturbation
        assert diff.max() > 0
        assert diff.min() >= -1e-12
        assert np.abs(diff).max() <= 1e-3 + 1e-12


def test_history_csv_format(tmp_path):
    rows = [dict(epoch=1, train_loss=-1.5, test_accuracy=0.5, wall_seconds=0.1,
                 m_train=4, m_test=8, e_rev=4.0, sigma_spike=0.01, seed=0)]
    path = tmp_path / "h.csv"
    write_history_csv(path, rows)
    got = list(csv.DictReader(open(path)))
    assert list(got[0].keys()) == HISTORY_COLUMNS
