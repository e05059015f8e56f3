import numpy as np
import numpy.testing as npt
import pytest

from swpnet import autodiff as ad
from swpnet.autodiff import (
    GradTape,
    RandomFill,
    Tensor,
    backward,
    grad_check,
    tensor_create,
)


class TestTensorCreate:
    def test_zero_fill(self):
        t = tensor_create([2, 2], 0)
        npt.assert_array_equal(t.data, np.zeros((2, 2), dtype=np.float32))

    def test_sequence_fill(self):
        t = tensor_create([3], [1, 2, 3])
        npt.assert_array_equal(t.data, np.array([1, 2, 3], dtype=np.float32))

    def test_length_mismatch(self):
        with pytest.raises(ad.ShapeMismatch):
            tensor_create([2], [1, 2, 3])

    def test_zero_extent(self):
        with pytest.raises(ad.ShapeMismatch):
            tensor_create([2, 0], 1.0)

    def test_random_fill_deterministic(self):
        a = tensor_create([4, 4], RandomFill("normal", seed=9))
        b = tensor_create([4, 4], RandomFill("normal", seed=9))
        npt.assert_array_equal(a.data, b.data)
        c = tensor_create([4, 4], RandomFill("normal", seed=10))
        assert not np.array_equal(a.data, c.data)


class TestMatmul:
    def test_identity_exact(self):
        eye = tensor_create([2, 2], [1, 0, 0, 1])
        x = tensor_create([2, 2], RandomFill("uniform", seed=3, low=-2, high=2))
        out = ad.matmul(eye, x)
        npt.assert_array_equal(out.data, x.data)

    def test_scalar_product(self):
        out = ad.matmul(tensor_create([1, 1], 2.0), tensor_create([1, 1], 3.0))
        npt.assert_array_equal(out.data, [[6.0]])

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(3, 3)).astype(np.float32)
        b = rng.normal(size=(3, 3)).astype(np.float32)
        expected = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    expected[i, j] += float(a[i, k]) * float(b[k, j])
        out = ad.matmul(Tensor(a), Tensor(b))
        npt.assert_allclose(out.data, expected, atol=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(ad.ShapeMismatch):
            ad.matmul(tensor_create([2, 3], 1.0), tensor_create([2, 3], 1.0))


class TestElementwise:
    def test_relu(self):
        out = ad.relu(tensor_create([3], [-1, 0, 2]))
        npt.assert_array_equal(out.data, [0, 0, 2])

    def test_add_identity(self):
        x = tensor_create([4], RandomFill("normal", seed=1))
        out = ad.add(x, tensor_create([4], 0.0))
        npt.assert_array_equal(out.data, x.data)

    def test_mul_matches_scalar_loop(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=4).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        expected = [float(a[i]) * float(b[i]) for i in range(4)]
        out = ad.elementwise("mul", Tensor(a), Tensor(b))
        npt.assert_allclose(out.data, expected, rtol=1e-6)

    def test_trailing_broadcast_bias_pattern(self):
        x = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
        bias = Tensor(np.array([1.0, 2.0, 3.0], dtype=np.float32), requires_grad=True)
        with GradTape():
            out = ad.add(x, bias)
            backward(ad.sum_all(out))
        npt.assert_array_equal(out.data, [[2, 3, 4], [2, 3, 4]])
        npt.assert_array_equal(bias.grad, [2, 2, 2])

    def test_non_broadcastable(self):
        with pytest.raises(ad.ShapeMismatch):
            ad.add(tensor_create([2, 3], 1.0), tensor_create([2], 1.0))


class TestBackward:
    def test_sum_of_squares(self):
        x = tensor_create([3], [1, 2, 3], requires_grad=True)
        with GradTape():
            loss = ad.sum_all(ad.mul(x, x))
            backward(loss)
        npt.assert_allclose(x.grad, [2, 4, 6], rtol=1e-6)

    def test_constant_loss_zero_grads(self):
        x = tensor_create([3], [1, 2, 3], requires_grad=True)
        with GradTape():
            loss = ad.sum_all(ad.scale(ad.mul(x, x), 0.0))
            backward(loss)
        npt.assert_array_equal(x.grad, [0, 0, 0])

    def test_linear_grad_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        w = Tensor(rng.normal(size=(4, 3)), requires_grad=True, dtype=np.float64)
        x = Tensor(rng.normal(size=(3, 2)), dtype=np.float64)
        err = grad_check(lambda: ad.sum_all(ad.matmul(w, x)), [w])
        assert err < 1e-5

    def test_non_scalar_loss(self):
        x = tensor_create([3], [1, 2, 3], requires_grad=True)
        with GradTape():
            y = ad.mul(x, x)
            with pytest.raises(ad.AutodiffError):
                backward(y)

    def test_detached_loss(self):
        x = tensor_create([1], [1.0], requires_grad=True)
        with pytest.raises(ad.AutodiffError):
            backward(x)

    def test_repeated_backward_accumulates(self):
        x = tensor_create([2], [1, 2], requires_grad=True)
        with GradTape():
            loss = ad.sum_all(ad.mul(x, x))
            backward(loss)
            once = x.grad.copy()
            backward(loss)
        npt.assert_allclose(x.grad, 2 * once, rtol=1e-7)

    def test_replay_bit_identical(self):
        rng = np.random.default_rng(7)
        w = Tensor(rng.normal(size=(5, 5)).astype(np.float32), requires_grad=True)
        x = Tensor(rng.normal(size=(5, 5)).astype(np.float32))
        with GradTape():
            loss = ad.sum_all(ad.relu(ad.matmul(w, x)))
            backward(loss)
            first = x if False else w.grad.copy()
            w.grad = None
            backward(loss)
        assert w.grad.tobytes() == first.tobytes()

    def test_tape_is_topologically_ordered(self):
        x = tensor_create([3], [1, 2, 3], requires_grad=True)
        with GradTape() as tape:
            y = ad.mul(x, x)
            z = ad.add(y, x)
            ad.sum_all(z)
        seen = set()
        for node in tape.nodes:
            for inp in node.inputs:
                if inp._node is not None:
                    assert id(inp) in seen, "input recorded after its consumer"
            seen.add(id(node.out))

    def test_shared_intermediate_fanout(self):
        # y used twice: d/dx of (x*x + x*x) = 4x
        x = tensor_create([2], [1.0, 3.0], requires_grad=True)
        with GradTape():
            y = ad.mul(x, x)
            backward(ad.sum_all(ad.add(y, y)))
        npt.assert_allclose(x.grad, [4.0, 12.0], rtol=1e-6)


class TestNumerics:
    def test_nan_raises_when_enabled(self):
        x = Tensor(np.array([1e30], dtype=np.float32))
        with np.errstate(over="ignore"), pytest.raises(ad.NumericsError):
            ad.mul(ad.mul(x, x), ad.mul(x, x))

    def test_bench_mode_disables_check(self):
        x = Tensor(np.array([1e30], dtype=np.float32))
        with np.errstate(over="ignore"), ad.numerics_checks(False):
            out = ad.mul(ad.mul(x, x), ad.mul(x, x))
        assert np.isinf(out.data).all()


class TestGradCheck:
    def test_quadratic_form_beats_closed_form(self):
        rng = np.random.default_rng(21)
        a = Tensor(rng.normal(size=(4, 4)), dtype=np.float64)
        x = Tensor(rng.normal(size=(4, 1)), requires_grad=True, dtype=np.float64)

        def quad():
            return ad.sum_all(ad.matmul(ad.matmul(reshape_t(x), a), x))

        def reshape_t(t):
            return ad.reshape(t, (1, 4))

        err = grad_check(quad, [x])
        assert err < 1e-7
        # independent closed form: grad = (A + A^T) x
        x.grad = None
        with GradTape():
            backward(quad())
        closed = (a.data + a.data.T) @ x.data
        npt.assert_allclose(x.grad, closed, rtol=1e-9, atol=1e-12)

    def test_relu_network_away_from_kinks(self):
        rng = np.random.default_rng(3)
        w1 = Tensor(rng.normal(size=(6, 4)), requires_grad=True, dtype=np.float64)
        w2 = Tensor(rng.normal(size=(1, 6)), requires_grad=True, dtype=np.float64)
        x = Tensor(rng.normal(size=(4, 2)) + 0.5, dtype=np.float64)

        def net():
            return ad.sum_all(ad.matmul(w2, ad.relu(ad.matmul(w1, x))))

        sink = []
        ad.relu_input_sink = sink
        try:
            net()
        finally:
            ad.relu_input_sink = None
        assert min(np.abs(v).min() for v in sink) > 1e-3, "probe point too close to a relu kink"
        assert grad_check(net, [w1, w2]) < 1e-5

    def test_linear_function_near_exact(self):
        rng = np.random.default_rng(4)
        w = Tensor(rng.normal(size=(3, 3)), requires_grad=True, dtype=np.float64)
        x = Tensor(rng.normal(size=(3, 3)), dtype=np.float64)
        assert grad_check(lambda: ad.sum_all(ad.matmul(w, x)), [w]) < 1e-9

    def test_rejects_f32_params(self):
        w = tensor_create([2], [1.0, 2.0], requires_grad=True)
        with pytest.raises(ad.AutodiffError):
            grad_check(lambda: ad.sum_all(w), [w])

    def test_rejects_nondeterministic_function(self):
        w = tensor_create([2], [1.0, 2.0], requires_grad=True, dtype=np.float64)
        counter = {"n": 0}

        def wobbly():
            counter["n"] += 1
            return ad.sum_all(ad.scale(w, 1.0 + 0.1 * counter["n"]))

        with pytest.raises(ad.AutodiffError):
            grad_check(wobbly, [w])
