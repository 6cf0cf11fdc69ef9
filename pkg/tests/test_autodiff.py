"""Engine unit tests: forward determinism, backward identities, FD checks."""
import numpy as np
import pytest

from protomtl import autodiff as ad
from protomtl.autodiff import Parameter, ParameterStore, ShapeError, Tape, Tensor
from protomtl.gradcheck import finite_difference_check


def test_identity_model_passes_input_through():
    x = ad.constant([1.0, 2.0, 3.0])
    y = ad.add(x, 0.0)
    assert np.array_equal(y.data, [1.0, 2.0, 3.0])


def test_zero_weight_1x1_conv_gives_zero_output():
    x = ad.constant(np.random.default_rng(0).standard_normal((3, 5, 4)))
    w = ad.constant(np.zeros((2, 3, 1, 1)))
    b = ad.constant(np.zeros(2))
    out = ad.conv2d(x, w, b)
    assert out.shape == (2, 5, 4)
    assert np.all(out.data == 0.0)


def test_seeded_two_layer_perceptron_is_bit_deterministic():
    def run():
        store = ParameterStore(42)
        w1 = store.create("l1/w", (4, 3), 3)
        b1 = store.create("l1/b", (4,), 3)
        w2 = store.create("l2/w", (2, 4), 4)
        b2 = store.create("l2/b", (2,), 4)
        x = ad.constant(np.linspace(-1, 1, 6).reshape(2, 3))
        return ad.linear(ad.relu(ad.linear(x, w1, b1)), w2, b2).data

    first, second = run(), run()
    assert np.array_equal(first, second)


def test_backward_linear_map_gradient():
    w = Parameter("w", [1.5])
    with Tape() as tape:
        out = ad.mul(w, ad.constant([2.0]))
    tape.backward(out, np.ones(1))
    assert w.grad[0] == 2.0


def test_backward_constant_function_gives_zero_gradients():
    w = Parameter("w", [3.0, -1.0])
    with Tape() as tape:
        out = ad.tsum(ad.mul(ad.constant([1.0, 1.0]), 2.0))
    tape.backward(out, np.float64(1.0))
    assert np.all(w.grad == 0.0)


def test_backward_sigmoid_at_zero():
    w = Parameter("w", [0.0])
    with Tape() as tape:
        out = ad.sigmoid(w)
    tape.backward(out, np.ones(1))
    assert w.grad[0] == pytest.approx(0.25, abs=1e-15)


def test_unreachable_parameter_keeps_zero_gradient():
    used = Parameter("used", [1.0])
    unused = Parameter("unused", [5.0])
    with Tape() as tape:
        out = ad.mul(used, 3.0)
    tape.backward(out, np.ones(1))
    assert np.all(unused.grad == 0.0)
    assert used.grad[0] == 3.0


def test_backward_cotangent_shape_mismatch_raises():
    w = Parameter("w", [0.0, 1.0])
    with Tape() as tape:
        out = ad.relu(w)
    with pytest.raises(ShapeError, match="cotangent"):
        tape.backward(out, np.ones(3))


def test_shape_mismatch_identifies_primitive_and_shapes():
    a = ad.constant(np.zeros((2, 3)))
    b = ad.constant(np.zeros((3, 2)))
    with pytest.raises(ShapeError, match=r"add.*\(2, 3\).*\(3, 2\)"):
        ad.add(a, b)
    x = ad.constant(np.zeros((3, 4, 4)))
    w = ad.constant(np.zeros((2, 5, 3, 3)))
    with pytest.raises(ShapeError, match="conv2d"):
        ad.conv2d(x, w, ad.constant(np.zeros(2)))


def test_gradient_accumulates_across_consumers():
    w = Parameter("w", [2.0])
    with Tape() as tape:
        a = ad.mul(w, 3.0)
        b = ad.mul(w, 4.0)
        out = ad.add(a, b)
    tape.backward(out, np.ones(1))
    assert w.grad[0] == 7.0


def test_detach_blocks_gradient_exactly():
    a = Parameter("a", [1.0, 2.0])
    b = Parameter("b", [3.0, 4.0])
    with Tape() as tape:
        out = ad.tsum(ad.mul(ad.detach(a), b))
    tape.backward(out, np.float64(1.0))
    assert np.all(a.grad == 0.0)
    assert np.array_equal(b.grad, [1.0, 2.0])


def test_tape_replay_reproduces_outputs_bit_identically():
    store = ParameterStore(7)
    w = store.create("w", (2, 3, 3, 3), 27)
    b = store.create("b", (2,), 27)
    x = ad.constant(np.random.default_rng(5).standard_normal((3, 6, 6)))
    with Tape() as tape:
        out = ad.tmean(ad.sigmoid(ad.conv2d(x, w, b)))
    snapshot = [node.out.data.copy() for node in tape.nodes]
    tape.replay()
    for node, before in zip(tape.nodes, snapshot):
        assert np.array_equal(node.out.data, before)
    assert out.shape == ()


def test_take_accumulates_duplicate_indices():
    a = Parameter("a", [1.0, 2.0, 3.0])
    with Tape() as tape:
        out = ad.tsum(ad.take(a, np.array([0, 0, 2])))
    tape.backward(out, np.float64(1.0))
    assert np.array_equal(a.grad, [2.0, 0.0, 1.0])


def test_max_reduction_routes_ties_to_first_index():
    a = Parameter("a", [[1.0, 5.0], [5.0, 2.0], [5.0, 5.0]])
    with Tape() as tape:
        out = ad.tsum(ad.amax(a, axis=0))
    tape.backward(out, np.float64(1.0))
    assert np.array_equal(a.grad, [[0.0, 1.0], [1.0, 0.0], [0.0, 0.0]])


# ---------------------------------------------------------------------------
# finite-difference verifier
# ---------------------------------------------------------------------------

def test_fd_check_quadratic_is_exact():
    w = Parameter("w", [3.0])

    def loss():
        return ad.tsum(ad.mul(w, w))

    report = finite_difference_check(loss, [w], epsilon=1e-3)
    assert report.ok
    # central differences are exact for quadratics up to rounding
    assert report.max_abs_err["w"] < 1e-9
    with Tape() as tape:
        out = loss()
    w.zero_grad()
    tape.backward(out, np.float64(1.0))
    assert w.grad[0] == pytest.approx(6.0, abs=1e-12)


def test_fd_check_loss_independent_of_parameter_passes():
    w = Parameter("w", [1.0, -2.0])

    def loss():
        return ad.tsum(ad.constant([4.0]))

    report = finite_difference_check(loss, [w])
    assert report.ok
    assert report.max_abs_err["w"] == 0.0


def test_fd_check_conv_sigmoid_mean_composite():
    rng = np.random.default_rng(123)
    x = Parameter("x", rng.standard_normal((4, 8, 8)))
    w = Parameter("w", rng.standard_normal((3, 4, 3, 3)) * 0.4)
    b = Parameter("b", rng.standard_normal(3) * 0.1)

    def loss():
        return ad.tmean(ad.sigmoid(ad.conv2d(x, w, b)))

    report = finite_difference_check(loss, [x, w, b], epsilon=1e-5)
    assert report.ok
    assert max(report.max_rel_err.values()) < 1e-4


def test_fd_check_rejects_non_scalar_loss():
    w = Parameter("w", [1.0, 2.0])
    with pytest.raises(ShapeError, match="scalar"):
        finite_difference_check(lambda: ad.relu(w), [w])


def test_fd_check_rejects_non_positive_epsilon():
    w = Parameter("w", [1.0])
    with pytest.raises(ValueError):
        finite_difference_check(lambda: ad.tsum(w), [w], epsilon=0.0)


def test_two_op_composition_matches_finite_differences():
    # chain rule through randomized compositions
    for trial in range(10):
        rng = np.random.default_rng(1000 + trial)
        x = Parameter("x", rng.standard_normal((2, 5, 5)))
        w = Parameter("w", rng.standard_normal((2, 2, 3, 3)) * 0.5)
        b = Parameter("b", rng.standard_normal(2) * 0.1)
        g = Parameter("g", rng.standard_normal(2))

        def loss():
            return ad.tmean(ad.scale_channels(ad.sigmoid(ad.conv2d(x, w, b)), g))

        report = finite_difference_check(loss, [x, w, b, g])
        assert report.ok, report.max_rel_err


def test_parameter_store_rejects_duplicates_and_is_order_independent():
    s1 = ParameterStore(9)
    a1 = s1.create("alpha", (3,), 3)
    b1 = s1.create("beta", (3,), 3)
    s2 = ParameterStore(9)
    b2 = s2.create("beta", (3,), 3)
    a2 = s2.create("alpha", (3,), 3)
    assert np.array_equal(a1.data, a2.data)
    assert np.array_equal(b1.data, b2.data)
    with pytest.raises(ValueError, match="duplicate"):
        s1.create("alpha", (3,), 3)


def test_parameter_init_respects_fan_in_bound():
    store = ParameterStore(3)
    p = store.create("w", (100,), 16)
    assert np.all(np.abs(p.data) <= 1.0 / 4.0)
