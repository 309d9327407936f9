import numpy as np
import pytest

from revspike.autodiff import Tape, grad_check
from revspike.dstd import build_grid
from revspike.network import (
    LayerSpec,
    ModelConfig,
    SpikingNetwork,
    forward_pass,
    inject_noise,
    layer_forward,
    load_checkpoint,
    save_checkpoint,
    taped_exact_rc_layer,
    taped_exact_ttfs_layer,
    taped_forward,
    taped_layer_forward,
    _phase_grid,
)
from revspike.neuron import NeuronParams, fire_rc, fire_ttfs, sentinel_time, sort_spikes, accumulate_exact
from revspike.training import init_rc

IDEAL = NeuronParams()


def small_net(mode="rc_spike", sizes=(5, 4, 3), e_rev=3.0, sigma=0.0, seed=0, **kw):
    cfg = ModelConfig(layer_sizes=sizes, mode=mode, e_rev=e_rev, m_train=6, m_test=12,
                      sigma_spike=sigma, seed=seed, **kw)
    rng = np.random.default_rng(seed)
    if mode == "rc_spike":
        ws = init_rc(sizes, rng)
    else:
        ws = [rng.uniform(0.5, 2.0, (o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
    return SpikingNetwork.build(cfg, ws)


class TestLayerForward:
    def test_identity_like_layer(self):
        # single input, w=1, beta=0: clip(1 - (1 - t)) = t
        lay = LayerSpec(np.array([[1.0]]), IDEAL, "rc_spike")
        out = layer_forward(np.array([[0.4]]), lay)
        assert out[0, 0] == pytest.approx(0.4, abs=1e-14)

    def test_zero_weights_rc(self):
        lay = LayerSpec(np.zeros((3, 4)), IDEAL, "rc_spike")
        out = layer_forward(np.random.default_rng(0).uniform(0, 1, (2, 4)), lay)
        assert np.all(out == 1.0)

    def test_zero_weights_ttfs(self):
        lay = LayerSpec(np.zeros((3, 4)), IDEAL, "ttfs")
        out = layer_forward(np.random.default_rng(0).uniform(0, 1, (2, 4)), lay)
        assert np.all(out == sentinel_time())

    def test_width_mismatch(self):
        lay = LayerSpec(np.zeros((3, 4)), IDEAL, "rc_spike")
        with pytest.raises(ValueError):
            layer_forward(np.zeros((2, 5)), lay)

    def test_exact_layer_matches_scalar_forms(self, rng):
        t = rng.uniform(0, 1, (5, 7))
        w = rng.uniform(-1, 1, (4, 7))
        p = NeuronParams(e_rev_pos=2.0, e_rev_neg=-3.0)
        out = layer_forward(t, LayerSpec(w, p, "rc_spike"))
        ref = np.array([[fire_rc(accumulate_exact(sort_spikes(t[b]), w[o], p), p)
                         for o in range(4)] for b in range(5)])
        assert np.allclose(out, ref, atol=1e-13)
        out_t = layer_forward(t, LayerSpec(3 * np.abs(w), p, "ttfs"))
        ref_t = np.array([[fire_ttfs(sort_spikes(t[b]), 3 * np.abs(w)[o], p)
                           for o in range(4)] for b in range(5)])
        assert np.allclose(out_t, ref_t, atol=1e-12)

    def test_dstd_plain_matches_taped(self, rng):
        t = rng.uniform(0, 1, (4, 6))
        w = rng.uniform(-1, 1, (3, 6))
        p = NeuronParams(e_rev_pos=2.0, e_rev_neg=-2.0)
        for mode, wm in (("rc_spike", w), ("ttfs", 2 + w)):
            lay = LayerSpec(wm, p, mode)
            grid = build_grid(7, mode=mode, t_offset=0.02)
            plain = layer_forward(t, lay, grid=grid)
            tape = Tape()
            taped = taped_layer_forward(tape.constant(t), tape.leaf(wm), lay, grid)
            assert np.abs(plain - taped.value).max() < 1e-15

    def test_taped_exact_layers_match_plain(self, rng):
        t = rng.uniform(0.05, 0.95, (4, 6))
        w = rng.uniform(-0.8, 0.8, (3, 6))
        p = NeuronParams(e_rev_pos=2.5, e_rev_neg=-2.0)
        tape = Tape()
        out = taped_exact_rc_layer(tape.constant(t), tape.leaf(w), LayerSpec(w, p, "rc_spike"))
        assert np.abs(out.value - layer_forward(t, LayerSpec(w, p, "rc_spike"))).max() < 1e-12
        wt = np.abs(w) * 3 + 0.2
        tape2 = Tape()
        out_t = taped_exact_ttfs_layer(tape2.constant(t), tape2.leaf(wt), LayerSpec(wt, p, "ttfs"))
        assert np.abs(out_t.value - layer_forward(t, LayerSpec(wt, p, "ttfs"))).max() < 1e-12

    def test_taped_exact_gradients(self, rng):
        t = rng.uniform(0.1, 0.9, (3, 5))
        w = rng.uniform(0.4, 1.2, (4, 5))
        p = NeuronParams(e_rev_pos=3.0, e_rev_neg=-3.0)

        def prog_rc(tt, ww):
            lay = LayerSpec(ww.value, p, "rc_spike")
            o = taped_exact_rc_layer(tt, ww, lay, clip_output=False)
            return (o * o).sum()

        assert grad_check(prog_rc, [t, w]) < 1e-6

        def prog_ttfs(tt, ww):
            lay = LayerSpec(ww.value, p, "ttfs")
            o = taped_exact_ttfs_layer(tt, ww, lay)
            return (o * o).sum()

        assert grad_check(prog_ttfs, [t, w]) < 1e-6


class TestForwardPass:
    def test_zero_hidden_equals_single_layer(self, rng):
        cfg = ModelConfig(layer_sizes=(5, 3), mode="rc_spike", e_rev=3.0,
                          m_train=6, m_test=12, sigma_spike=0.0, seed=0)
        net = SpikingNetwork.build(cfg, init_rc(cfg.layer_sizes, np.random.default_rng(0)))
        x = rng.uniform(0, 1, (4, 5))
        out = forward_pass(x, net, phase="test")
        grid = _phase_grid(net, "test", None)
        ref = layer_forward(x, net.layers[0], grid=grid)
        assert np.array_equal(out, ref)

    def test_deterministic_given_seed(self, rng):
        net = small_net(sigma=0.01)
        x = rng.uniform(0, 1, (6, 5))
        o1 = forward_pass(x, net, phase="test", rng=np.random.default_rng(7))
        o2 = forward_pass(x, net, phase="test", rng=np.random.default_rng(7))
        assert np.array_equal(o1, o2)

    def test_large_shape_contract(self):
        sizes = (784, 400, 400, 10)
        cfg = ModelConfig(layer_sizes=sizes, mode="rc_spike", e_rev=4.0,
                          m_train=10, m_test=10, sigma_spike=0.01, seed=0)
        net = SpikingNetwork.build(cfg, init_rc(sizes, np.random.default_rng(0)))
        x = np.random.default_rng(1).uniform(0, 1, (32, 784))
        out = forward_pass(x, net, phase="test", rng=np.random.default_rng(2))
        assert out.shape == (32, 10)
        assert np.all((out >= 0) & (out <= 1))

    def test_train_phase_needs_rng_with_noise(self):
        net = small_net(sigma=0.01)
        with pytest.raises(ValueError):
            forward_pass(np.zeros((1, 5)), net, phase="test")

    def test_unknown_phase(self):
        net = small_net()
        with pytest.raises(ValueError):
            forward_pass(np.zeros((1, 5)), net, phase="validate")

    def test_batch_equivariance(self, rng):
        net = small_net(sigma=0.0)
        x = rng.uniform(0, 1, (8, 5))
        perm = rng.permutation(8)
        out = forward_pass(x, net, phase="test")
        out_p = forward_pass(x[perm], net, phase="test")
        assert np.allclose(out[perm], out_p, atol=0)

    def test_rc_output_range(self, rng):
        net = small_net(sigma=0.01)
        out = forward_pass(rng.uniform(0, 1, (16, 5)), net, phase="test",
                           rng=np.random.default_rng(0))
        assert np.all((out >= 0) & (out <= 1))

    def test_ttfs_outputs_not_before_earliest_input_exact(self, rng):
        net = small_net(mode="ttfs")
        x = rng.uniform(0.2, 0.9, (10, 5))
        out = forward_pass(x, net, phase="test", exact=True)
        assert np.all(out >= x.min(axis=1, keepdims=True) - 1e-12)

    def test_exact_dstd_agreement_trained_model(self, digits):
        from revspike.data import encode
        from revspike.training import CostParams, train_and_eval

        X, y = digits
        ds = encode(X[:300], y[:300], scheme="image")
        cfg = ModelConfig(layer_sizes=(64, 16, 10), mode="rc_spike", e_rev=4.0,
                          m_train=8, m_test=200, sigma_spike=0.0, seed=0)
        net = SpikingNetwork.build(cfg, init_rc(cfg.layer_sizes, np.random.default_rng(0)))
        train_and_eval(net, ds.times, ds.labels, None, None, epochs=2,
                       cp=CostParams.rc_default(), lr=1e-3)
        out_d = forward_pass(ds.times[:64], net, phase="test")
        out_e = forward_pass(ds.times[:64], net, phase="test", exact=True)
        assert np.abs(out_d - out_e).mean() < 1e-3


class TestInjectNoise:
    def test_sigma_zero_identity(self, rng):
        t = rng.uniform(0, 1, (4, 6))
        assert np.array_equal(inject_noise(t, 0.0, np.random.default_rng(0)), t)

    def test_sentinel_untouched(self):
        t = np.array([[0.5, sentinel_time()]])
        out = inject_noise(t, 0.05, np.random.default_rng(0), mode="ttfs")
        assert out[0, 1] == sentinel_time()
        assert out[0, 0] != 0.5

    def test_rc_clipped(self):
        t = np.full((1, 1000), 0.999)
        out = inject_noise(t, 0.05, np.random.default_rng(0), mode="rc_spike")
        assert np.all(out <= 1.0)

    def test_mean_shift_small(self):
        t = np.full((1, 100000), 0.5)
        out = inject_noise(t, 0.01, np.random.default_rng(3), mode="ttfs")
        assert abs((out - t).mean()) < 1e-3

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            inject_noise(np.zeros((1, 1)), -0.1, np.random.default_rng(0))


class TestNoiseOrderInTraining:
    def test_taped_noise_matches_plain_forward(self, rng):
        # same rng stream => taped train forward equals the plain train phase
        net = small_net(sigma=0.02)
        x = rng.uniform(0, 1, (5, 5))
        g1 = np.random.default_rng(9)
        grids = [_phase_grid(net, "train", g1) for _ in net.layers]
        tape = Tape()
        out, _, _ = taped_forward(tape, x, net, grids, np.random.default_rng(4))
        t = x
        gp = np.random.default_rng(4)
        for layer, grid in zip(net.layers, grids):
            t = layer_forward(t, layer, grid=grid)
            t = inject_noise(t, 0.02, gp, mode="rc_spike")
        assert np.abs(out.value - t).max() < 1e-15


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        net = small_net(seed=5)
        p = tmp_path / "ckpt.json"
        save_checkpoint(p, net, extra={"note": 1})
        back = load_checkpoint(p)
        assert back.config.layer_sizes == net.config.layer_sizes
        assert back.config.mode == net.config.mode
        for a, b in zip(net.layers, back.layers):
            assert np.array_equal(a.weights, b.weights)

    def test_bad_format_rejected(self, tmp_path):
        p = tmp_path / "x.json"
        p.write_text('{"format": "something-else"}')
        with pytest.raises(ValueError):
            load_checkpoint(p)


def test_m_test_smaller_warns():
    with pytest.warns(UserWarning):
        ModelConfig(layer_sizes=(4, 2), m_train=10, m_test=5)


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        LayerSpec(np.array([[np.inf]]), IDEAL, "rc_spike")
    with pytest.raises(ValueError):
        LayerSpec(np.zeros((2, 2)), IDEAL, "conv")
