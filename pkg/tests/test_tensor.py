import numpy as np
import pytest

from adarank import tensor as T


def finite_difference(f, arrays, index, h=1e-5):
    """Central-difference gradient of scalar f w.r.t. arrays[index]."""
    base = [a.copy() for a in arrays]
    grad = np.zeros_like(base[index])
    flat = grad.reshape(-1)
    probe = base[index].reshape(-1)
    for i in range(probe.size):
        orig = probe[i]
        probe[i] = orig + h
        hi = f(*base)
        probe[i] = orig - h
        lo = f(*base)
        probe[i] = orig
        flat[i] = (hi - lo) / (2 * h)
    return grad


def check_gradients(op, arrays, seed_note=""):
    """Tape gradients of sum(op(...)) vs finite differences, rel err < 1e-6."""
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    with T.GradTape() as tape:
        out = op(*tensors)
        loss = out if out.data.ndim == 0 else T.tensor_sum(out)
    tape.backward(loss)

    def scalar(*raw):
        result = op(*[T.Tensor(r) for r in raw])
        return float(result.data.sum())

    for i, tensor in enumerate(tensors):
        fd = finite_difference(scalar, [t.data for t in tensors], i)
        got = tensor.grad
        assert got is not None, f"missing grad for input {i} {seed_note}"
        denom = np.maximum(np.abs(fd), 1.0)
        rel = np.abs(got - fd) / denom
        assert rel.max() < 1e-6, f"input {i} rel err {rel.max():.3g} {seed_note}"


RNG = np.random.default_rng(20240814)


class TestGradients:
    def test_matmul(self):
        check_gradients(T.matmul, [RNG.standard_normal((4, 4)), RNG.standard_normal((4, 4))])

    def test_matmul_batched(self):
        check_gradients(T.matmul,
                        [RNG.standard_normal((2, 3, 4)), RNG.standard_normal((4, 5))])

    def test_add_broadcast(self):
        check_gradients(T.add, [RNG.standard_normal((4, 4)), RNG.standard_normal((4,))])

    def test_mul(self):
        check_gradients(T.mul, [RNG.standard_normal((4, 4)), RNG.standard_normal((4, 4))])

    def test_scale(self):
        check_gradients(lambda a: T.scale(a, -2.5), [RNG.standard_normal((4, 4))])

    def test_reshape_transpose(self):
        check_gradients(lambda a: T.transpose(T.reshape(a, (2, 2, 4)), (1, 0, 2)),
                        [RNG.standard_normal((4, 4))])

    def test_gelu(self):
        check_gradients(T.gelu, [RNG.standard_normal((4, 4))])

    def test_softmax(self):
        # weight the rows so the softmax jacobian is exercised beyond sum=1
        w = T.Tensor(RNG.standard_normal((4, 4)))
        check_gradients(lambda a: T.mul(T.softmax_lastdim(a), w),
                        [RNG.standard_normal((4, 4))])

    def test_layer_norm(self):
        check_gradients(lambda x, g, b: T.layer_norm(x, g, b, 1e-12),
                        [RNG.standard_normal((4, 4)),
                         RNG.standard_normal(4),
                         RNG.standard_normal(4)])

    def test_embedding_lookup(self):
        ids = np.array([[0, 2], [2, 1]])
        check_gradients(lambda t: T.embedding_lookup(t, ids),
                        [RNG.standard_normal((3, 4))])

    def test_first_token(self):
        check_gradients(T.first_token, [RNG.standard_normal((2, 3, 4))])

    def test_softmax_cross_entropy(self):
        labels = np.array([1, 0, 3, 2])
        check_gradients(lambda a: T.softmax_cross_entropy(a, labels),
                        [RNG.standard_normal((4, 4))])

    def test_mean(self):
        check_gradients(T.tensor_mean, [RNG.standard_normal((4, 4))])

    def test_diamond_reuse_accumulates(self):
        # y used twice; d(sum(y*y + y))/dx must accumulate both paths
        check_gradients(lambda a: T.add(T.mul(T.gelu(a), T.gelu(a)), T.gelu(a)),
                        [RNG.standard_normal((4, 4))])


class TestForwardContracts:
    def test_matmul_identity(self):
        x = RNG.standard_normal((4, 4))
        out = T.matmul(T.Tensor(np.eye(4)), T.Tensor(x))
        assert np.array_equal(out.data, np.eye(4) @ x)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4, 2))))

    def test_softmax_uniform_on_constant_rows(self):
        out = T.softmax_lastdim(T.Tensor(np.zeros((1, 3))))
        np.testing.assert_allclose(out.data, np.full((1, 3), 1 / 3), rtol=0, atol=0)

    def test_softmax_rows_sum_to_one(self):
        out = T.softmax_lastdim(T.Tensor(RNG.standard_normal((8, 16)) * 10))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)

    def test_layer_norm_moments(self):
        x = T.Tensor(RNG.standard_normal((6, 32)) * 3 + 1)
        gain = T.Tensor(np.ones(32))
        bias = T.Tensor(np.zeros(32))
        out = T.layer_norm(x, gain, bias, 1e-12).data
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-9)

    def test_layer_norm_feature_mismatch(self):
        with pytest.raises(ValueError):
            T.layer_norm(T.Tensor(np.ones((2, 4))), T.Tensor(np.ones(3)),
                         T.Tensor(np.ones(3)))

    def test_cross_entropy_matches_log_softmax(self):
        logits = RNG.standard_normal((5, 3))
        labels = np.array([0, 2, 1, 1, 0])
        loss = T.softmax_cross_entropy(T.Tensor(logits), labels)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        expected = -logp[np.arange(5), labels].mean()
        np.testing.assert_allclose(float(loss.data), expected, rtol=1e-14)

    def test_determinism(self):
        def run():
            x = T.Tensor(np.full((3, 3), 0.7))
            return T.softmax_lastdim(T.gelu(T.matmul(x, x))).data
        assert np.array_equal(run(), run())


class TestTape:
    def test_backward_requires_scalar(self):
        x = T.Tensor(np.ones((2, 2)), requires_grad=True)
        with T.GradTape() as tape:
            y = T.gelu(x)
        with pytest.raises(ValueError):
            tape.backward(y)

    def test_tape_single_use(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with T.GradTape() as tape:
            loss = T.tensor_sum(T.gelu(x))
        tape.backward(loss)
        with pytest.raises(RuntimeError):
            tape.backward(loss)

    def test_no_tracking_outside_tape(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        y = T.gelu(x)
        assert y.requires_grad is False

    def test_each_record_visited_once(self):
        x = T.Tensor(np.full(4, 0.3), requires_grad=True)
        with T.GradTape() as tape:
            y = T.gelu(x)
            loss = T.tensor_sum(T.add(y, y))
        calls = []

        def counted(vjp):
            def wrapper(g):
                calls.append(vjp)
                return vjp(g)
            return wrapper

        tape._records = [(out, inputs, counted(vjp)) for out, inputs, vjp in tape._records]
        expected = len(tape._records)
        tape.backward(loss)
        assert len(calls) == expected


class TestReductions:
    def test_population_std_constant(self):
        assert T.population_std(T.Tensor([5, 5, 5, 5])) == 0.0

    def test_population_std_hand_value(self):
        np.testing.assert_allclose(T.population_std(T.Tensor([1, 2, 3, 4])),
                                   np.sqrt(1.25), rtol=1e-15)

    def test_population_std_empty(self):
        with pytest.raises(ValueError, match="empty tensor"):
            T.population_std(T.Tensor(np.zeros(0)))

    def test_population_std_scale_law(self):
        x = RNG.standard_normal(100)
        for c in (-3.0, 0.5, 1e3):
            np.testing.assert_allclose(T.population_std(c * x),
                                       abs(c) * T.population_std(x), rtol=1e-12)

    def test_l1_diff_identity_and_hand_value(self):
        a = T.Tensor([1.0, 2.0])
        assert T.l1_diff(a, a) == 0.0
        assert T.l1_diff(a, T.Tensor([0.0, 4.0])) == 3.0

    def test_l1_diff_symmetry(self):
        for _ in range(5):
            a, b = RNG.standard_normal((2, 7, 3))
            assert T.l1_diff(a, b) == T.l1_diff(b, a)

    def test_l1_diff_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.l1_diff(np.ones(3), np.ones(4))
