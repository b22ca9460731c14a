"""This module contains the Tensor class, a small dense array type with
reverse-mode automatic differentiation, and the operations the backbone,
the losses and Grad-CAM are built from.

Layout convention: video tensors are ``[batch, time, height, width,
channels]`` row-major, convolution kernels are
``[kT, kH, kW, C_in, C_out]``.
"""

# import modules
import logging
from contextlib import contextmanager

import numpy as np
from scipy.special import expit, logsumexp

from .exceptions import ContractError, ShapeError

logger = logging.getLogger(__name__)

# the production path is 32-bit, 64-bit exists for gradient tests
_DEFAULT_DTYPE = [np.dtype(np.float32)]
_SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def get_default_dtype() -> np.dtype:
    """
    Get the dtype new tensors are created with.

    Returns
    -------
    numpy.dtype
        ``float32`` (default) or ``float64``.
    """
    return _DEFAULT_DTYPE[0]


def set_default_dtype(dtype) -> None:
    """
    Set the dtype new tensors are created with.

    Parameters
    ----------
    dtype : numpy dtype-like
        ``numpy.float32`` or ``numpy.float64``.

    Raises
    ------
    ValueError
        If ``dtype`` is neither float32 nor float64.
    """
    dtype = np.dtype(dtype)
    if dtype not in _SUPPORTED_DTYPES:
        raise ValueError("'dtype' should be float32 or float64.")
    _DEFAULT_DTYPE[0] = dtype


@contextmanager
def default_dtype(dtype):
    """
    Context manager switching the default dtype, e.g. to float64 for
    finite-difference gradient checks.
    """
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class _Operation:
    """One recorded operation: its inputs, its output and its backward
    rule, which maps the output gradient to one gradient per input."""
    __slots__ = ('name', 'inputs', 'output', 'backward_fn')

    def __init__(self, name, inputs, output, backward_fn) -> None:
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """
    Ordered record of the operations executed since the last backward
    pass. Operations are appended as they run, so every operation's inputs
    precede it; :meth:`backward` visits each one exactly once, in reverse
    order, and then clears the tape.

    Attributes
    ----------
    enabled : bool, readonly
        Whether operations are currently being recorded.
    """
    def __init__(self) -> None:
        self._ops = []
        self._enabled = True

    def __len__(self) -> int:
        return len(self._ops)

    @property
    def enabled(self) -> bool:
        """
        Get whether recording is enabled.

        Returns
        -------
        bool
            True when operations are recorded.
        """
        return self._enabled

    @property
    def names(self) -> tuple:
        """
        Get the names of the recorded operations, in recording order.

        Returns
        -------
        tuple of str
            The operation names.
        """
        return tuple(op.name for op in self._ops)

    def record(self, name, inputs, output, backward_fn) -> None:
        """
        Record an operation if recording is enabled and any input takes
        part in differentiation; the output then requires grad too.
        """
        if not self._enabled:
            return
        if not any(t.requires_grad for t in inputs):
            return
        output._requires_grad = True
        self._ops.append(_Operation(name, inputs, output, backward_fn))

    def clear(self) -> None:
        """Drop every recorded operation."""
        self._ops = []

    def backward(self, loss) -> int:
        """
        Back-propagate from a scalar loss through the recorded operations.
        Gradients accumulate additively into ``grad`` of every tensor that
        requires grad, intermediate tensors included.

        Parameters
        ----------
        loss : Tensor
            A single-element tensor produced by recorded operations.

        Raises
        ------
        TypeError
            If ``loss`` is not a Tensor.
        ContractError
            If ``loss`` is not scalar, does not require grad, or the tape
            is empty.

        Returns
        -------
        int
            The number of recorded operations visited.
        """
        # check the loss
        if not isinstance(loss, Tensor):
            raise TypeError("'loss' should be a Tensor.")
        if loss.size != 1:
            raise ContractError(
                f'backward needs a scalar loss, got shape {loss.shape}.')
        if len(self._ops) == 0:
            raise ContractError('backward called on an empty tape.')
        if not loss.requires_grad:
            raise ContractError('the loss does not depend on any tensor '
                                'that requires grad.')

        loss._accumulate(np.ones(loss.shape, dtype=loss.dtype))
        visited = 0
        for op in reversed(self._ops):
            visited += 1
            grad = op.output.grad
            if grad is None:
                continue
            input_grads = op.backward_fn(grad)
            for tensor, tensor_grad in zip(op.inputs, input_grads):
                if tensor_grad is not None and tensor.requires_grad:
                    tensor._accumulate(tensor_grad)
        logger.debug('backward visited %d operations', visited)
        self.clear()
        return visited


_TAPE = Tape()


def get_tape() -> Tape:
    """
    Get the tape operations are recorded on.

    Returns
    -------
    Tape
        The module tape (single-threaded by contract).
    """
    return _TAPE


@contextmanager
def no_grad():
    """Context manager disabling recording, for inference."""
    previous = _TAPE._enabled
    _TAPE._enabled = False
    try:
        yield
    finally:
        _TAPE._enabled = previous


class Tensor:
    """
    A dense real array which can take part in reverse-mode automatic
    differentiation.

    The data buffer is read-only after construction; only ``grad`` changes,
    by accumulation during :func:`backward`.

    Attributes
    ----------
    data : numpy.ndarray, readonly
        The values, float32 (or float64 in 64-bit mode).
    shape : tuple of int, readonly
        The extents of the array.
    requires_grad : bool, readonly
        Whether gradients are accumulated into ``grad``.
    grad : numpy.ndarray or None
        The accumulated gradient, same shape as ``data``.
    """
    def __init__(self, data, requires_grad=False, dtype=None) -> None:
        """
        Constructor for Tensor; ``data`` is copied.

        Parameters
        ----------
        data : array-like
            The values.
        requires_grad : bool, optional
            Whether the tensor is a differentiation leaf, defaults to False.
        dtype : numpy dtype-like, optional
            Defaults to :func:`get_default_dtype`.
        """
        if not isinstance(requires_grad, bool):
            raise TypeError("'requires_grad' should be boolean.")
        dtype = get_default_dtype() if dtype is None else np.dtype(dtype)
        array = np.array(data, dtype=dtype, copy=True)
        self._set_data(array)
        self._requires_grad = requires_grad
        self.grad = None

    @classmethod
    def _wrap(cls, array) -> 'Tensor':
        """Wrap a freshly computed array without copying it."""
        tensor = cls.__new__(cls)
        tensor._set_data(np.asarray(array))
        tensor._requires_grad = False
        tensor.grad = None
        return tensor

    def _set_data(self, array) -> None:
        if array.ndim > 0 and 0 in array.shape:
            raise ShapeError(f'tensor extents should be positive, got '
                             f'{array.shape}.')
        array.setflags(write=False)
        self._data = array

    @property
    def data(self) -> np.ndarray:
        """
        Get the (read-only) values.

        Returns
        -------
        numpy.ndarray
            The values.
        """
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    def _accumulate(self, grad) -> None:
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            grad = np.broadcast_to(grad, self.shape)
        if self.grad is None:
            self.grad = np.array(grad, copy=True)
        else:
            self.grad = self.grad + grad

    def zero_grad(self) -> None:
        """Forget the accumulated gradient."""
        self.grad = None

    def detach(self) -> 'Tensor':
        """
        A tensor sharing the values but cut from the tape.

        Returns
        -------
        Tensor
            The detached tensor (``requires_grad`` False).
        """
        return Tensor._wrap(self._data)

    def numpy(self) -> np.ndarray:
        """Return a writable copy of the values."""
        return np.array(self._data, copy=True)

    def item(self) -> float:
        """Return the value of a single-element tensor as a float."""
        if self.size != 1:
            raise ContractError('item() needs a single-element tensor.')
        return float(self._data.reshape(-1)[0])

    def backward(self) -> None:
        """Back-propagate from this scalar tensor, see :func:`backward`."""
        backward(self)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> 'Tensor':
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> 'Tensor':
        return mean(self, axis=axis, keepdims=keepdims)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return (f'Tensor(shape={self.shape}, dtype={self.dtype.name}, '
                f'requires_grad={self._requires_grad})')


def as_tensor(value) -> Tensor:
    """
    Return ``value`` if it is a Tensor, otherwise a constant Tensor of it.
    """
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def backward(loss) -> None:
    """
    Back-propagate from a scalar loss; every leaf with ``requires_grad``
    gets a populated ``grad``. See :meth:`Tape.backward`.
    """
    _TAPE.backward(loss)


def _record(name, inputs, data, backward_fn) -> Tensor:
    out = Tensor._wrap(data)
    _TAPE.record(name, inputs, out, backward_fn)
    return out


def _unbroadcast(grad, shape) -> np.ndarray:
    """Sum a gradient over the axes that were broadcast to reach it."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b) -> tuple:
    """
    Broadcast rule: numpy broadcasting where one operand already has the
    result shape (the other is expanded along singleton or missing
    leading axes).
    """
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f'shapes {a.shape} and {b.shape} do not '
                         f'broadcast.') from None
    if shape != a.shape and shape != b.shape:
        raise ShapeError(f'shapes {a.shape} and {b.shape} would both need '
                         f'expanding.')
    return shape


def add(a, b) -> Tensor:
    """Elementwise ``a + b`` under the broadcast rule."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _record('add', (a, b), a.data + b.data, backward_fn)


def sub(a, b) -> Tensor:
    """Elementwise ``a - b`` under the broadcast rule."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _record('sub', (a, b), a.data - b.data, backward_fn)


def mul(a, b) -> Tensor:
    """Elementwise ``a * b`` under the broadcast rule."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward_fn(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))
    return _record('mul', (a, b), a.data * b.data, backward_fn)


def matmul(a, b) -> Tensor:
    """
    Matrix product of ``a[m, k]`` and ``b[k, n]``.

    Raises
    ------
    ShapeError
        If an operand is not 2-D or the inner dimensions differ.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError('matmul needs two 2-D tensors.')
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f'matmul inner dimensions differ: {a.shape} and '
                         f'{b.shape}.')

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g
    return _record('matmul', (a, b), a.data @ b.data, backward_fn)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f'cannot reshape {x.shape} to {shape}.') from None

    def backward_fn(g):
        return (g.reshape(x.shape),)
    return _record('reshape', (x,), data, backward_fn)


def _normalize_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tensor_sum(x, axis=None, keepdims=False) -> Tensor:
    """Sum over ``axis`` (all axes by default)."""
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)
    return _record('sum', (x,), np.asarray(data), backward_fn)


def mean(x, axis=None, keepdims=False) -> Tensor:
    """Mean over ``axis`` (all axes by default)."""
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    data = x.data.mean(axis=axes, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)
    return _record('mean', (x,), np.asarray(data), backward_fn)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward_fn(g):
        return (g * mask,)
    return _record('relu', (x,), np.where(mask, x.data, 0).astype(x.dtype),
                   backward_fn)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)

    def backward_fn(g):
        return (g * s * (1 - s),)
    return _record('sigmoid', (x,), s, backward_fn)


def conv_output_geometry(size, kernel, stride, padding) -> tuple:
    """Output extent and (before, after) padding for one axis."""
    if padding == 'valid':
        out = (size - kernel) // stride + 1
        pads = (0, 0)
    else:
        # 'same': ceil(size / stride) outputs, extra padding goes after
        out = -(-size // stride)
        total = max((out - 1) * stride + kernel - size, 0)
        pads = (total // 2, total - total // 2)
    if out < 1:
        raise ShapeError(f'kernel {kernel} does not fit extent {size}.')
    return out, pads


def _check_triple(name, value) -> tuple:
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise ContractError(f"'{name}' should have three entries.")
    if min(value) < 1:
        raise ContractError(f"'{name}' entries should be at least 1.")
    return value


def conv3d(x, w, stride=(1, 1, 1), padding='same') -> Tensor:
    """
    3D cross-correlation (no kernel flip) of ``x[B, T, H, W, C_in]`` with
    ``w[kT, kH, kW, C_in, C_out]``.

    ``'same'`` padding produces ``ceil(extent / stride)`` outputs per axis,
    so extents are kept when the stride is 1; ``'valid'`` uses no padding.

    Parameters
    ----------
    x : Tensor
        The input video batch.
    w : Tensor
        The kernel.
    stride : tuple of int, optional
        ``(sT, sH, sW)``, defaults to ``(1, 1, 1)``.
    padding : str, optional
        ``'same'`` or ``'valid'``, defaults to ``'same'``.

    Raises
    ------
    ShapeError
        If ranks or channel counts mismatch, or the kernel does not fit.
    ContractError
        If a stride is below 1 or the padding mode is unknown.

    Returns
    -------
    Tensor
        The output ``[B, T', H', W', C_out]``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError('conv3d needs a 5-D input and a 5-D kernel.')
    if x.shape[4] != w.shape[3]:
        raise ShapeError(f'conv3d channel mismatch: input has {x.shape[4]}, '
                         f'kernel expects {w.shape[3]}.')
    stride = _check_triple('stride', stride)
    if padding not in ('same', 'valid'):
        raise ContractError("'padding' should be 'same' or 'valid'.")

    geometry = [conv_output_geometry(x.shape[i + 1], w.shape[i], stride[i],
                                     padding) for i in range(3)]
    out_size = [g[0] for g in geometry]
    pads = [g[1] for g in geometry]
    xp = np.pad(x.data, [(0, 0)] + pads + [(0, 0)])
    kt, kh, kw = w.shape[:3]

    def window(dt, dh, dw):
        return (slice(None),
                slice(dt, dt + stride[0] * (out_size[0] - 1) + 1, stride[0]),
                slice(dh, dh + stride[1] * (out_size[1] - 1) + 1, stride[1]),
                slice(dw, dw + stride[2] * (out_size[2] - 1) + 1, stride[2]))

    out = np.zeros([x.shape[0]] + out_size + [w.shape[4]], dtype=x.dtype)
    for dt in range(kt):
        for dh in range(kh):
            for dw in range(kw):
                out += np.tensordot(xp[window(dt, dh, dw)], w.data[dt, dh, dw],
                                    axes=([4], [0]))

    def backward_fn(g):
        grad_xp = np.zeros_like(xp)
        grad_w = np.zeros_like(w.data)
        for dt in range(kt):
            for dh in range(kh):
                for dw in range(kw):
                    sl = window(dt, dh, dw)
                    grad_w[dt, dh, dw] = np.tensordot(
                        xp[sl], g, axes=([0, 1, 2, 3], [0, 1, 2, 3]))
                    grad_xp[sl] += np.tensordot(g, w.data[dt, dh, dw],
                                                axes=([4], [1]))
        grad_x = grad_xp[:,
                         pads[0][0]:pads[0][0] + x.shape[1],
                         pads[1][0]:pads[1][0] + x.shape[2],
                         pads[2][0]:pads[2][0] + x.shape[3]]
        return grad_x, grad_w
    return _record('conv3d', (x, w), out, backward_fn)


def maxpool_spatial(x, kernel=(1, 3, 3), stride=(1, 2, 2),
                    padding='same') -> Tensor:
    """
    Spatial max pooling of ``x[B, T, H, W, C]``. Pooling never reaches
    across frames: the temporal kernel extent and stride must be 1.

    Raises
    ------
    ContractError
        If temporal pooling is requested.
    ShapeError
        If ``x`` is not 5-D.
    """
    x = as_tensor(x)
    kernel = _check_triple('kernel', kernel)
    stride = _check_triple('stride', stride)
    if kernel[0] != 1 or stride[0] != 1:
        raise ContractError('temporal pooling is not allowed: kernel and '
                            'stride must have temporal extent 1.')
    if x.ndim != 5:
        raise ShapeError('maxpool_spatial needs a 5-D input.')
    if padding not in ('same', 'valid'):
        raise ContractError("'padding' should be 'same' or 'valid'.")

    out_h, pad_h = conv_output_geometry(x.shape[2], kernel[1], stride[1],
                                        padding)
    out_w, pad_w = conv_output_geometry(x.shape[3], kernel[2], stride[2],
                                        padding)
    xp = np.pad(x.data, [(0, 0), (0, 0), pad_h, pad_w, (0, 0)],
                constant_values=-np.inf)
    offsets = [(dh, dw) for dh in range(kernel[1]) for dw in range(kernel[2])]

    def window(dh, dw):
        return (slice(None), slice(None),
                slice(dh, dh + stride[1] * (out_h - 1) + 1, stride[1]),
                slice(dw, dw + stride[2] * (out_w - 1) + 1, stride[2]))

    best = None
    argbest = None
    for k, (dh, dw) in enumerate(offsets):
        patch = xp[window(dh, dw)]
        if best is None:
            best = patch.copy()
            argbest = np.zeros(patch.shape, dtype=np.int32)
        else:
            # strict comparison keeps the first maximum on ties
            mask = patch > best
            best = np.where(mask, patch, best)
            argbest[mask] = k

    def backward_fn(g):
        grad_xp = np.zeros_like(xp)
        for k, (dh, dw) in enumerate(offsets):
            grad_xp[window(dh, dw)] += np.where(argbest == k, g, 0)
        grad_x = grad_xp[:, :, pad_h[0]:pad_h[0] + x.shape[2],
                         pad_w[0]:pad_w[0] + x.shape[3]]
        return (grad_x,)
    return _record('maxpool_spatial', (x,), best, backward_fn)


def avgpool_global(x) -> Tensor:
    """Global average pooling of ``x[B, T, H, W, C]`` to ``[B, C]``."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise ShapeError('avgpool_global needs a 5-D input.')
    return mean(x, axis=(1, 2, 3))


def softmax_crossentropy(logits, labels) -> Tensor:
    """
    Mean softmax cross-entropy of ``logits[B, K]`` against integer class
    labels, stabilised by max subtraction (``logsumexp``).

    Raises
    ------
    ShapeError
        If ``logits`` is not 2-D or the label count differs from B.
    IndexError
        If a label is outside ``[0, K)``.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2:
        raise ShapeError('softmax_crossentropy needs 2-D logits.')
    batch, classes = logits.shape
    if labels.shape[0] != batch:
        raise ShapeError(f'{labels.shape[0]} labels for a batch of {batch}.')
    if labels.min() < 0 or labels.max() >= classes:
        raise IndexError(f'class index out of range [0, {classes}).')

    log_probs = logits.data - logsumexp(logits.data, axis=1, keepdims=True)
    rows = np.arange(batch)
    loss = -log_probs[rows, labels].mean()

    def backward_fn(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1
        return (grad * (g / batch),)
    return _record('softmax_crossentropy', (logits,),
                   np.asarray(loss, dtype=logits.dtype), backward_fn)


def mse(pred, target) -> Tensor:
    """Mean of squared differences over all elements."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f'mse shapes differ: {pred.shape} and '
                         f'{target.shape}.')
    diff = pred.data - target.data
    loss = np.mean(diff * diff)

    def backward_fn(g):
        grad = diff * (2 * g / diff.size)
        return grad, -grad
    return _record('mse', (pred, target), np.asarray(loss, dtype=pred.dtype),
                   backward_fn)


def _normalize_backward(dxhat, xhat, inv_std, axes) -> np.ndarray:
    return inv_std * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))


def batch_norm(x, gamma, beta, running_mean, running_var, training=True,
               momentum=0.1, eps=1e-5) -> tuple:
    """
    Per-channel batch normalisation over every axis but the last.

    In training mode the batch statistics normalise ``x`` and the running
    statistics are updated (unbiased variance); in evaluation mode the
    running statistics are used.

    Parameters
    ----------
    x : Tensor
        The input, channels last.
    gamma, beta : Tensor
        Scale and shift, shape ``[C]``.
    running_mean, running_var : numpy.ndarray
        Running statistics, shape ``[C]``.
    training : bool, optional
        Defaults to True.
    momentum : float, optional
        Running statistics update rate, defaults to 0.1.
    eps : float, optional
        Variance floor, defaults to 1e-5.

    Returns
    -------
    tuple
        ``(output Tensor, new running mean, new running variance)``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    channels = x.shape[-1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f'batch_norm parameters should have shape '
                         f'({channels},).')
    flat = x.data.reshape(-1, channels)
    count = flat.shape[0]
    if training:
        mu = flat.mean(axis=0)
        var = flat.var(axis=0)
        new_mean = (1 - momentum) * running_mean + momentum * mu
        new_var = ((1 - momentum) * running_var
                   + momentum * var * count / max(count - 1, 1))
    else:
        mu = np.asarray(running_mean, dtype=x.dtype)
        var = np.asarray(running_var, dtype=x.dtype)
        new_mean, new_var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (flat - mu) * inv_std
    out = (xhat * gamma.data + beta.data).reshape(x.shape)

    def backward_fn(g):
        g = g.reshape(-1, channels)
        dxhat = g * gamma.data
        if training:
            grad_x = _normalize_backward(dxhat, xhat, inv_std, 0)
        else:
            grad_x = dxhat * inv_std
        return (grad_x.reshape(x.shape), (g * xhat).sum(axis=0),
                g.sum(axis=0))
    result = _record('batch_norm', (x, gamma, beta), out.astype(x.dtype),
                     backward_fn)
    return (result, np.asarray(new_mean, dtype=x.dtype),
            np.asarray(new_var, dtype=x.dtype))


def group_norm(x, gamma, beta, groups, eps=1e-5) -> Tensor:
    """
    Group normalisation: per sample, channels are split into ``groups``
    groups normalised over all their positions. Behaves identically in
    training and evaluation.

    Raises
    ------
    ShapeError
        If ``groups`` does not divide the channel count.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    channels = x.shape[-1]
    if channels % groups != 0:
        raise ShapeError(f'{groups} groups do not divide {channels} channels.')
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f'group_norm parameters should have shape '
                         f'({channels},).')
    grouped = x.data.reshape(x.shape[0], -1, groups, channels // groups)
    axes = (1, 3)
    mu = grouped.mean(axis=axes, keepdims=True)
    var = grouped.var(axis=axes, keepdims=True)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = ((grouped - mu) * inv_std).reshape(x.shape)
    out = xhat * gamma.data + beta.data

    def backward_fn(g):
        dxhat = (g * gamma.data).reshape(grouped.shape)
        grad_x = _normalize_backward(dxhat, xhat.reshape(grouped.shape),
                                     inv_std, axes)
        reduce_axes = tuple(range(x.ndim - 1))
        return (grad_x.reshape(x.shape), (g * xhat).sum(axis=reduce_axes),
                g.sum(axis=reduce_axes))
    return _record('group_norm', (x, gamma, beta), out.astype(x.dtype),
                   backward_fn)
