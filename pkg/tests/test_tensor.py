"""Tensor test module. Gradients of every operation are checked against
central differences in 64-bit mode.
"""

# import modules
import numpy as np
import pytest

from posestream.exceptions import ContractError, ShapeError
from posestream.tensor import (Tensor, add, avgpool_global, batch_norm,
                               conv3d, conv_output_geometry, default_dtype,
                               get_default_dtype, get_tape, group_norm,
                               matmul, maxpool_spatial, mean, mse, mul,
                               no_grad, relu, reshape, sigmoid,
                               softmax_crossentropy, sub, tensor_sum)
from posestream.utils import numerical_gradient, relative_error
from tests.data_generator import random_array


def check_gradients(build, arrays, tol=1e-6):
    """
    Compare the back-propagated gradients of ``sum(build(*inputs) * R)``
    with central differences, for every array of ``arrays``.
    """
    with default_dtype(np.float64):
        projection = None

        def loss_of(tensors):
            nonlocal projection
            out = build(*tensors)
            if projection is None:
                projection = random_array(out.shape, seed=99)
            return tensor_sum(mul(out, projection))

        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        loss_of(leaves).backward()

        def value():
            with no_grad():
                return loss_of([Tensor(a) for a in arrays]).item()

        for leaf, arr in zip(leaves, arrays):
            numeric = numerical_gradient(value, arr, eps=1e-6)
            assert relative_error(leaf.grad, numeric) < tol


class TestTensor:
    """
    This class is to test the Tensor container and the tape.
    """
    def setup_method(self, method):
        get_tape().clear()

    def test_errors(self):
        # test for error when requires_grad is not boolean
        with pytest.raises(TypeError):
            Tensor([1.0], requires_grad=1)
        # test for error on an empty extent
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))
        # test for error when backward gets a non scalar loss
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            mul(x, 2.0).backward()
        get_tape().clear()
        # test for error when the tape is empty
        with pytest.raises(ContractError):
            Tensor(1.0, requires_grad=True).backward()
        # test for error on item of a vector
        with pytest.raises(ContractError):
            Tensor(np.ones(2)).item()

    def test_read_only(self):
        t = Tensor(np.arange(4.0))
        with pytest.raises(ValueError):
            t.data[0] = 10.0
        # the constructor copies its input
        source = np.zeros(3)
        t = Tensor(source)
        source[0] = 5.0
        assert t.data[0] == 0.0

    def test_default_dtype(self):
        assert get_default_dtype() == np.float32
        with default_dtype(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32
        with pytest.raises(ValueError):
            with default_dtype(np.int32):
                pass

    def test_backward_visits_each_operation(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        y = relu(add(mul(x, 3.0), 1.0))
        loss = tensor_sum(y)
        assert len(get_tape()) == 4
        assert get_tape().names == ('mul', 'add', 'relu', 'sum')
        assert get_tape().backward(loss) == 4
        assert len(get_tape()) == 0
        np.testing.assert_allclose(x.grad, np.full((2, 3), 3.0))

    def test_gradients_accumulate(self):
        x = Tensor(np.ones(3), requires_grad=True)
        tensor_sum(x).backward()
        tensor_sum(mul(x, 2.0)).backward()
        np.testing.assert_allclose(x.grad, np.full(3, 3.0))
        x.zero_grad()
        assert x.grad is None

    def test_shared_input(self):
        # y = x * x uses x twice
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        tensor_sum(mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, [2.0, -4.0])

    def test_no_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = tensor_sum(mul(x, 2.0))
        assert len(get_tape()) == 0
        assert not y.requires_grad
        assert get_tape().enabled

    def test_constants_are_not_recorded(self):
        a = Tensor(np.ones(3))
        b = add(a, a)
        assert not b.requires_grad
        assert len(get_tape()) == 0

    def test_detach(self):
        x = Tensor(np.ones(2), requires_grad=True)
        d = mul(x, 2.0).detach()
        assert not d.requires_grad
        np.testing.assert_array_equal(d.data, [2.0, 2.0])
        get_tape().clear()


class TestElementwise:
    """
    This class is to test the elementwise operations and the broadcast
    rule.
    """
    def setup_method(self, method):
        get_tape().clear()

    def test_broadcast_rule(self):
        a = Tensor(np.ones((2, 3)))
        # one operand has the result shape
        assert add(a, Tensor(np.ones(3))).shape == (2, 3)
        assert mul(a, Tensor(np.ones((2, 1)))).shape == (2, 3)
        assert add(a, 1.0).shape == (2, 3)
        # test for error when both operands would need expanding
        with pytest.raises(ShapeError):
            add(Tensor(np.ones((2, 1))), Tensor(np.ones((1, 3))))
        # test for error on incompatible shapes
        with pytest.raises(ShapeError):
            sub(a, Tensor(np.ones(4)))

    def test_operators(self):
        a = Tensor(np.array([1.0, 2.0]))
        np.testing.assert_allclose((a + 1.0).data, [2.0, 3.0])
        np.testing.assert_allclose((1.0 - a).data, [0.0, -1.0])
        np.testing.assert_allclose((-a).data, [-1.0, -2.0])
        np.testing.assert_allclose((a * a).data, [1.0, 4.0])

    def test_gradients(self):
        a = random_array((3, 4), seed=1)
        b = random_array((4,), seed=2)
        check_gradients(add, [a, b])
        check_gradients(sub, [a, b])
        check_gradients(mul, [a, b])
        check_gradients(matmul, [a, random_array((4, 2), seed=3)])
        check_gradients(lambda x: reshape(x, (2, 6)), [a])
        check_gradients(lambda x: tensor_sum(x, axis=1), [a])
        check_gradients(lambda x: mean(x, axis=0, keepdims=True), [a])
        check_gradients(sigmoid, [a])
        # values away from the kink of relu
        check_gradients(relu, [a + np.sign(a) * 0.1])

    def test_matmul_errors(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 1))))


class TestConvolution:
    """
    This class is to test conv3d, pooling and their geometry.
    """
    def setup_method(self, method):
        get_tape().clear()

    def test_geometry(self):
        assert conv_output_geometry(224, 7, 2, 'same') == (112, (2, 3))
        assert conv_output_geometry(16, 3, 1, 'same') == (16, (1, 1))
        assert conv_output_geometry(8, 3, 1, 'valid') == (6, (0, 0))
        with pytest.raises(ShapeError):
            conv_output_geometry(2, 3, 1, 'valid')

    def test_conv3d_shapes(self):
        x = Tensor(np.ones((2, 4, 9, 9, 3)))
        w = Tensor(np.ones((3, 3, 3, 3, 5)))
        assert conv3d(x, w).shape == (2, 4, 9, 9, 5)
        assert conv3d(x, w, stride=(1, 2, 2)).shape == (2, 4, 5, 5, 5)
        assert conv3d(x, w, padding='valid').shape == (2, 2, 7, 7, 5)
        # test for error on a channel mismatch
        with pytest.raises(ShapeError):
            conv3d(x, Tensor(np.ones((1, 1, 1, 2, 5))))
        # test for error on a zero stride
        with pytest.raises(ContractError):
            conv3d(x, w, stride=(0, 1, 1))
        with pytest.raises(ContractError):
            conv3d(x, w, padding='full')

    def test_conv3d_values(self):
        # a 1x1x1 kernel is a per-position channel mixing
        x = random_array((1, 2, 3, 3, 2), seed=4)
        w = random_array((1, 1, 1, 2, 3), seed=5)
        with default_dtype(np.float64):
            out = conv3d(Tensor(x), Tensor(w))
        np.testing.assert_allclose(out.data, x @ w[0, 0, 0])
        # no kernel flip: a kernel picking the next frame shifts time
        w = np.zeros((3, 1, 1, 1, 1))
        w[2] = 1.0
        x = np.arange(4.0).reshape(1, 4, 1, 1, 1)
        with default_dtype(np.float64):
            out = conv3d(Tensor(x), Tensor(w))
        np.testing.assert_allclose(out.data.ravel(), [1.0, 2.0, 3.0, 0.0])

    def test_conv3d_gradients(self):
        check_gradients(
            lambda x, w: conv3d(x, w, stride=(1, 2, 2)),
            [random_array((1, 3, 5, 4, 2), seed=6),
             random_array((2, 3, 3, 2, 3), seed=7)])
        check_gradients(
            lambda x, w: conv3d(x, w, padding='valid'),
            [random_array((2, 3, 4, 4, 1), seed=8),
             random_array((3, 2, 2, 1, 2), seed=9)])

    def test_maxpool(self):
        x = random_array((1, 2, 5, 5, 2), seed=10)
        with default_dtype(np.float64):
            out = maxpool_spatial(Tensor(x))
        assert out.shape == (1, 2, 3, 3, 2)
        # the padded border never wins
        assert out.data[0, 0, 0, 0, 0] == x[0, 0, :2, :2, 0].max()
        check_gradients(maxpool_spatial, [x])
        # test for error when pooling reaches across frames
        with pytest.raises(ContractError):
            maxpool_spatial(Tensor(x), kernel=(2, 3, 3))
        with pytest.raises(ContractError):
            maxpool_spatial(Tensor(x), stride=(2, 2, 2))

    def test_avgpool(self):
        x = random_array((2, 3, 4, 4, 5), seed=11)
        with default_dtype(np.float64):
            out = avgpool_global(Tensor(x))
        assert out.shape == (2, 5)
        np.testing.assert_allclose(out.data, x.mean(axis=(1, 2, 3)))
        check_gradients(avgpool_global, [x])


class TestLossesAndNormalisation:
    """
    This class is to test the losses and the normalisation layers.
    """
    def setup_method(self, method):
        get_tape().clear()

    def test_crossentropy(self):
        logits = random_array((4, 3), seed=12)
        labels = np.array([0, 2, 1, 2])
        check_gradients(lambda z: softmax_crossentropy(z, labels), [logits])
        # uniform logits give log K
        loss = softmax_crossentropy(Tensor(np.zeros((2, 5))), [0, 4])
        assert loss.item() == pytest.approx(np.log(5), rel=1e-5)
        # large logits stay finite
        loss = softmax_crossentropy(Tensor([[1000.0, 0.0]]), [1])
        assert np.isfinite(loss.item())
        # test for error on labels out of range
        with pytest.raises(IndexError):
            softmax_crossentropy(Tensor(np.zeros((2, 3))), [0, 3])
        with pytest.raises(ShapeError):
            softmax_crossentropy(Tensor(np.zeros((2, 3))), [0])

    def test_mse(self):
        a = random_array((3, 4), seed=13)
        b = random_array((3, 4), seed=14)
        check_gradients(mse, [a, b])
        with default_dtype(np.float64):
            value = mse(Tensor(a), Tensor(b)).item()
        assert value == pytest.approx(np.mean((a - b) ** 2))
        with pytest.raises(ShapeError):
            mse(Tensor(a), Tensor(b[:2]))

    def test_batch_norm(self):
        x = random_array((2, 2, 3, 3, 4), seed=15, scale=3.0) + 1.0
        gamma = random_array((4,), seed=16)
        beta = random_array((4,), seed=17)
        running_mean, running_var = np.zeros(4), np.ones(4)

        def train_mode(x, gamma, beta):
            return batch_norm(x, gamma, beta, running_mean, running_var,
                              training=True)[0]

        def eval_mode(x, gamma, beta):
            return batch_norm(x, gamma, beta, running_mean, running_var,
                              training=False)[0]
        check_gradients(train_mode, [x, gamma, beta], tol=1e-5)
        check_gradients(eval_mode, [x, gamma, beta])

        with default_dtype(np.float64):
            out, new_mean, new_var = batch_norm(
                Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)),
                running_mean, running_var, training=True, momentum=0.1)
        flat = out.data.reshape(-1, 4)
        np.testing.assert_allclose(flat.mean(axis=0), 0.0, atol=1e-10)
        np.testing.assert_allclose(flat.std(axis=0), 1.0, atol=1e-3)
        np.testing.assert_allclose(new_mean,
                                   0.1 * x.reshape(-1, 4).mean(axis=0))
        with pytest.raises(ShapeError):
            batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                       running_mean, running_var)

    def test_group_norm(self):
        x = random_array((2, 2, 3, 3, 4), seed=18, scale=2.0)
        gamma = random_array((4,), seed=19)
        beta = random_array((4,), seed=20)
        check_gradients(lambda x, g, b: group_norm(x, g, b, groups=2),
                        [x, gamma, beta], tol=1e-5)
        with pytest.raises(ShapeError):
            group_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)),
                       groups=3)
