import numpy as np
import pytest

from revspike.autodiff import (
    Tape,
    TapeDomainError,
    backward,
    concat,
    forward_record,
    grad_check,
    stack,
)


def test_forward_record_and_replay():
    tape, out = forward_record(lambda x: (x * 2.0).exp().sum(), [np.array([0.0, 0.1])])
    assert out.value == pytest.approx(1.0 + np.exp(0.2))
    before = out.value.copy()
    tape.replay()
    assert np.array_equal(before, out.value)


def test_simple_derivatives():
    t = Tape()
    x = t.leaf(np.array(0.0))
    y = x.exp()
    y.backward()
    assert x.grad == pytest.approx(1.0)

    t2 = Tape()
    v = t2.leaf(np.array(0.3))
    out = (1.0 - v).clip01()
    assert out.value == pytest.approx(0.7)
    out.backward()
    assert v.grad == pytest.approx(-1.0)


def test_single_spike_time_gradient():
    # v = w (1 - t0): dv/dt0 = -1 at w = 1
    t = Tape()
    t0 = t.leaf(np.array(0.4))
    v = 1.0 * (1.0 - t0)
    v.backward()
    assert t0.grad == pytest.approx(-1.0)


def test_weight_gradient_exponential():
    # v = 1 - e^{-w}: dv/dw at w=1 is e^{-1}
    t = Tape()
    w = t.leaf(np.array(1.0))
    v = -((-w).expm1())
    v.backward()
    assert w.grad == pytest.approx(np.exp(-1.0), abs=1e-12)


@pytest.mark.parametrize(
    "prog,inputs",
    [
        (lambda x: (x * 3.0 - 1.0).sum(), [np.array([0.2, -0.4])]),
        (lambda x, y: ((x / y).log() * y).sum(), [np.array([2.0, 3.0]), np.array([0.7, 1.3])]),
        (lambda x: ((x.abs() + 0.5).exp() / (x * x + 1.0)).sum(), [np.array([0.4, -0.8])]),
        (lambda x: (-x).expm1().minimum(x).sum(), [np.array([0.3, 1.2, -0.2])]),
        (lambda w, s: (w @ s).cumsum(-1).flip(-1).sum(), [np.ones((2, 3)), np.arange(12.0).reshape(3, 4) / 7]),
        (lambda x: x.reduce_min(axis=-1).sum(), [np.array([[3.0, 1.0, 2.0], [5.0, 4.0, 6.0]])]),
        (lambda x: x.take(np.array([1, 0, 1]), axis=0).sum(axis=0).sum(), [np.array([0.3, 0.9])]),
        (lambda x: x.take_along(np.array([[1, 0], [0, 1]]), axis=1).sum(), [np.arange(4.0).reshape(2, 2) + 0.5]),
        (lambda x: x.swap_axes(0, 1)[0].sum(), [np.arange(6.0).reshape(2, 3) + 0.1]),
        (lambda x: x[:, ::2].sum(), [np.arange(8.0).reshape(2, 4)]),
    ],
)
def test_primitive_gradients_match_central_differences(prog, inputs):
    assert grad_check(prog, inputs) < 1e-7


def test_stack_and_concat_gradients():
    def prog(x):
        cols = [x[:, i] * float(i + 1) for i in range(3)]
        return stack(cols, axis=-1).sum() + concat([x, x * 2.0], axis=1).sum()

    assert grad_check(prog, [np.arange(6.0).reshape(2, 3) + 0.25]) < 1e-8


def test_clip_gradient_convention():
    # 1 inside and at the boundaries, 0 strictly outside
    t = Tape()
    x = t.leaf(np.array([-0.5, 0.0, 0.5, 1.0, 1.5]))
    y = x.clip01().sum()
    y.backward()
    assert np.allclose(x.grad, [0.0, 1.0, 1.0, 1.0, 0.0])


def test_relu_kink_and_abs_kink_are_zero():
    t = Tape()
    x = t.leaf(np.array([0.0]))
    (x.relu() + x.abs()).sum().backward()
    assert x.grad == pytest.approx(0.0)


def test_min_tie_routes_to_first():
    t = Tape()
    x = t.leaf(np.array([[2.0, 2.0, 3.0]]))
    x.reduce_min(axis=-1).sum().backward()
    assert np.allclose(x.grad, [[1.0, 0.0, 0.0]])

    t2 = Tape()
    a = t2.leaf(np.array(1.0))
    b = t2.leaf(np.array(1.0))
    a.minimum(b).backward()
    assert a.grad == pytest.approx(1.0) and b.grad == pytest.approx(0.0)


def test_where_masks_gradient():
    t = Tape()
    x = t.leaf(np.array([1.0, 2.0]))
    mask = np.array([True, False])
    y = (x * 3.0).where(mask, x * 5.0).sum()
    y.backward()
    assert np.allclose(x.grad, [3.0, 5.0])


def test_zero_adjoint_for_masked_out_branch():
    # parameters feeding only a masked-out (sentinel-like) branch get zero grad
    t = Tape()
    w = t.leaf(np.array([0.7]))
    dead = (w * 2.0).where(np.array([False]), 1.0)
    dead.sum().backward()
    assert w.grad == pytest.approx(0.0)


def test_log_domain_error_carries_node_info():
    t = Tape()
    x = t.leaf(np.array([-1.0]))
    with pytest.raises(TapeDomainError) as err:
        x.log()
    assert "log" in str(err.value)


def test_div_by_zero_raises():
    t = Tape()
    x = t.leaf(np.array([1.0]))
    with pytest.raises(TapeDomainError):
        x / 0.0


def test_mixed_tapes_rejected():
    t1, t2 = Tape(), Tape()
    a = t1.leaf(np.array(1.0))
    b = t2.leaf(np.array(1.0))
    with pytest.raises(ValueError):
        a + b


def test_backward_requires_scalar_seed():
    t = Tape()
    x = t.leaf(np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        backward(t, x * 2.0)


def test_broadcasting_unbroadcast():
    def prog(a, b):
        return ((a + b) * (a * b)).sum()

    assert grad_check(prog, [np.ones((3, 1)) * 0.4, np.arange(4.0) + 0.5]) < 1e-8


def test_tape_determinism_bit_identical():
    rng = np.random.default_rng(0)
    x = rng.uniform(0.1, 1.0, (4, 5))

    def run():
        tape = Tape()
        leaf = tape.leaf(x)
        out = ((leaf * 1.7).exp().cumsum(-1) / 3.0).sum()
        adj = tape.backward(out)
        return out.value.copy(), adj[leaf.node_id].copy()

    v1, g1 = run()
    v2, g2 = run()
    assert np.array_equal(v1, v2) and np.array_equal(g1, g2)


def test_taped_dstd_reproduces_untaped_bit_for_bit(rng):
    from revspike.dstd import accumulate_dstd, build_grid, coefficients_fg, discretize
    from revspike.network import _taped_rc_potential
    from revspike.neuron import NeuronParams

    grid = build_grid(9, mode="rc_spike", t_offset=0.03)
    t = rng.uniform(0, 1, (6, 14))
    w = rng.uniform(-1, 1, (4, 14))
    p = NeuronParams(e_rev_pos=2.0, e_rev_neg=-1.5)
    sv = discretize(t, grid)
    f, g = coefficients_fg(sv, w, p)
    plain = accumulate_dstd(f, g, grid)
    tape = Tape()
    taped = _taped_rc_potential(tape.constant(f), tape.constant(g), grid.slot_widths)
    assert np.array_equal(plain, taped.value)
    tape.replay()
    assert np.array_equal(plain, taped.value)
