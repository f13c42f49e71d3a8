import logging
import unittest
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.special import expit

logger = logging.getLogger(__name__)

# tapes currently recording; a None entry suspends recording (no-gradient evaluation)
_RECORDING: List[Optional['Tape']] = []


class TapeError(RuntimeError):
    pass


class Tensor:
    """
    A dense float64 array that can take part in reverse-mode differentiation.
    """

    # numpy operators defer to the Tensor overloads below
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        """
        Initialize a tensor.
        :param data: array-like values, copied to a float64 numpy array
        :param requires_grad: whether gradients are accumulated for this tensor
        """
        self.data = np.array(data, dtype=np.float64, order='C')
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.tape = None  # the tape that produced this tensor, None for leaves

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f'item() of a tensor of shape {self.shape}')
        return float(self.data.reshape(-1)[0])

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

    def __repr__(self):
        return f'Tensor(shape={self.shape}, requires_grad={self.requires_grad})'


@dataclass
class Operation:
    """
    One recorded primitive: the output, its inputs and the function mapping the output gradient
    to one gradient per input (None for inputs that need none).
    """
    name: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """
    Define-by-run record of primitive operations. Use as a context manager around a forward pass,
    then call backward once.
    """

    def __init__(self):
        self.operations: List[Operation] = []
        self.consumed = False

    def __enter__(self) -> 'Tape':
        if self.consumed:
            raise TapeError('tape was already consumed by a backward pass')
        _RECORDING.append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _RECORDING.pop()

    def record(self, name: str, output: Tensor, inputs: Sequence[Tensor],
               backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> None:
        if self.consumed:
            raise TapeError('cannot record on a consumed tape')
        for tensor in inputs:
            if tensor.tape is not None and tensor.tape is not self:
                raise TapeError(f'{name}: input tensor was produced on a different tape')
        output.tape = self
        self.operations.append(Operation(name, output, tuple(inputs), backward))

    def backward(self, loss: Tensor) -> None:
        """
        Populate .grad of every requires_grad tensor with d(loss)/d(tensor).
        :param loss: scalar tensor produced on this tape
        :raises TapeError: if loss is not a scalar, not from this tape, or the tape was consumed
        """
        if loss.data.size != 1:
            raise TapeError(f'backward needs a scalar loss, got shape {loss.shape}')
        if loss.tape is not self:
            raise TapeError('loss was not produced on this tape')
        if self.consumed:
            raise TapeError('tape was already consumed by a backward pass')
        self.consumed = True

        loss.grad = np.ones_like(loss.data)
        for operation in reversed(self.operations):
            output = operation.output
            if not output.requires_grad or not np.any(output.grad):
                continue
            grads = operation.backward(output.grad)
            for tensor, grad in zip(operation.inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                tensor.grad = tensor.grad + grad
        for operation in self.operations:
            for tensor in operation.inputs:
                if tensor.requires_grad and not np.all(np.isfinite(tensor.grad)):
                    raise FloatingPointError(f'non-finite gradient flowing into {operation.name}')
        logger.debug(f'backward through {len(self.operations)} operations')


class no_grad:
    """
    Context manager suspending tape recording; tensors computed inside carry values only.
    """

    def __enter__(self):
        _RECORDING.append(None)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _RECORDING.pop()


def backward(tape: Tape, loss: Tensor) -> None:
    """
    Run the backward pass of a tape from a scalar loss
    :param tape: the tape the forward pass was recorded on
    :param loss: the scalar loss tensor
    :return: None
    """
    tape.backward(loss)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    # sum over the axes numpy broadcasting expanded
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _emit(name: str, value: np.ndarray, inputs: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f'non-finite output from {name}')
    tape = _RECORDING[-1] if _RECORDING else None
    requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    output = Tensor(value, requires_grad=requires_grad)
    if requires_grad:
        tape.record(name, output, inputs, backward_fn)
    return output


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit('add', a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit('sub', a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit('mul', a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product of two 2-D tensors
    :raises ValueError: if the inner dimensions differ
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f'matmul shape mismatch: {a.shape} @ {b.shape}')
    return _emit('matmul', a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def sparse_matmul(matrix: Union[sparse.spmatrix, np.ndarray], a: Tensor) -> Tensor:
    """
    Product of a constant (possibly sparse) matrix with a tensor. The matrix carries no gradient.
    :param matrix: m x n constant operator
    :param a: n x d tensor
    :return: m x d tensor
    """
    if matrix.shape[1] != a.shape[0]:
        raise ValueError(f'sparse_matmul shape mismatch: {matrix.shape} @ {a.shape}')
    value = matrix @ a.data
    value = np.asarray(value.toarray() if sparse.issparse(value) else value)
    transposed = matrix.T
    return _emit('sparse_matmul', value, (a,), lambda g: (np.asarray(transposed @ g),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit('relu', a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    value = expit(a.data)
    return _emit('sigmoid', value, (a,), lambda g: (g * value * (1.0 - value),))


def tanh(a: Tensor) -> Tensor:
    value = np.tanh(a.data)
    return _emit('tanh', value, (a,), lambda g: (g * (1.0 - value ** 2),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError('log of a non-positive value')
    return _emit('log', np.log(a.data), (a,), lambda g: (g / a.data,))


def clip(a: Tensor, low: float, high: float) -> Tensor:
    inside = (a.data >= low) & (a.data <= high)
    return _emit('clip', np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


def abs_(a: Tensor) -> Tensor:
    return _emit('abs', np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sum_(a: Tensor, axis: Optional[int] = None) -> Tensor:
    def grad(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit('sum', np.sum(a.data, axis=axis), (a,), grad)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _emit('mean', np.mean(a.data), (a,), lambda g: (np.full(a.shape, g / n),))


def l1_norm(a: Tensor, axis: int = -1) -> Tensor:
    """
    L1 norm along an axis, ||a||_1
    """
    return _emit('l1_norm', np.abs(a.data).sum(axis=axis), (a,),
                 lambda g: (np.expand_dims(g, axis) * np.sign(a.data),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _emit('concat', np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def gather_rows(a: Tensor, index: Sequence[int]) -> Tensor:
    index = np.asarray(index, dtype=np.int64)

    def grad(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit('gather_rows', a.data[index], (a,), grad)


def slice_columns(a: Tensor, start: int, stop: int) -> Tensor:
    def grad(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _emit('slice_columns', a.data[:, start:stop], (a,), grad)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _emit('reshape', a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """
    Same-length 1-D convolution of each row of x with a bank of kernels, zero-padded at both ends.
    :param x: batch x d input
    :param weight: kernels x window filter bank, window odd
    :param bias: one bias per kernel
    :return: batch x kernels x d pre-activations
    """
    batch, d = x.shape
    kernels, window = weight.shape
    half = window // 2
    padded = np.pad(x.data, ((0, 0), (half, half)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, window, axis=1)  # batch x d x window
    value = np.einsum('biw,kw->bki', windows, weight.data) + bias.data[None, :, None]

    def grad(g):
        grad_weight = np.einsum('bki,biw->kw', g, windows)
        grad_bias = g.sum(axis=(0, 2))
        grad_windows = np.einsum('bki,kw->biw', g, weight.data)
        grad_padded = np.zeros_like(padded)
        for j in range(window):
            grad_padded[:, j:j + d] += grad_windows[:, :, j]
        return grad_padded[:, half:half + d], grad_weight, grad_bias

    return _emit('conv1d', value, (x, weight, bias), grad)


def max_pool1d(c: Tensor, window: int) -> Tensor:
    """
    Non-overlapping max over the last axis; the final window may be partial.
    Gradient flows to the first maximal element of each window.
    """
    length = c.shape[-1]
    pooled = -(-length // window)
    padded = np.full(c.shape[:-1] + (pooled * window,), -np.inf)
    padded[..., :length] = c.data
    blocks = padded.reshape(c.shape[:-1] + (pooled, window))
    argmax = blocks.argmax(axis=-1)
    value = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]

    def grad(g):
        full = np.zeros(blocks.shape)
        np.put_along_axis(full, argmax[..., None], g[..., None], axis=-1)
        return (full.reshape(padded.shape)[..., :length],)

    return _emit('max_pool1d', value, (c,), grad)


def binary_cross_entropy(probabilities: Tensor, labels: Sequence[float], eps: float = 1e-7) -> Tensor:
    """
    Mean binary cross-entropy with probabilities clamped to [eps, 1 - eps]
    :param probabilities: batch x 1 (or batch) predicted fraud probabilities
    :param labels: batch of 0/1 labels
    :return: scalar loss
    :raises ValueError: if the batch is empty
    """
    if probabilities.data.size == 0:
        raise ValueError('cross-entropy of an empty batch')
    y = np.asarray(labels, dtype=np.float64).reshape(probabilities.shape)
    q = clip(probabilities, eps, 1.0 - eps)
    log_likelihood = y * log(q) + (1.0 - y) * log(1.0 - q)
    return -mean(log_likelihood)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Mlp:
    """
    A multi-layer perceptron with ReLU hidden layers and a sigmoid output.
    """

    def __init__(self, dims: Sequence[int], rng: np.random.Generator = None):
        """
        Initialize an MLP with glorot-uniform weights and zero biases.
        :param dims: layer widths from input to output, e.g. [8, 64, 1]
        :param rng: random generator for the initial weights. defaults to a generator seeded with 0
        """
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f'invalid MLP dimensions {list(dims)}')
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dims = list(dims)
        self.weights = [Tensor(glorot_uniform(rng, i, o), requires_grad=True) for i, o in zip(dims[:-1], dims[1:])]
        self.biases = [Tensor(np.zeros(o), requires_grad=True) for o in dims[1:]]

    def parameters(self, prefix: str = 'mlp') -> Dict[str, Tensor]:
        params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f'{prefix}.layer{i}.weight'] = w
            params[f'{prefix}.layer{i}.bias'] = b
        return params

    def __call__(self, h: Tensor) -> Tensor:
        return mlp_forward(self, h)


def mlp_forward(mlp: Mlp, h: Tensor) -> Tensor:
    """
    Apply the MLP row-wise: sigmoid(MLP(h_i)) for every row i
    :param mlp: the network
    :param h: batch x d_in input
    :return: batch x d_out probabilities
    :raises ValueError: if the column count differs from the first layer width
    """
    h = _as_tensor(h)
    if h.data.ndim != 2 or h.shape[1] != mlp.dims[0]:
        raise ValueError(f'MLP expects {mlp.dims[0]} input columns, got shape {h.shape}')
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = matmul(h, w) + b
        h = relu(h) if i < last else sigmoid(h)
    return h


@dataclass
class AdamState:
    """
    First and second moment estimates of Adam for a named parameter set.
    """
    params: Mapping[str, Tensor]
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, param in self.params.items():
            self.m[name] = np.zeros_like(param.data)
            self.v[name] = np.zeros_like(param.data)


def adam_step(state: AdamState, params: Mapping[str, Tensor]) -> Mapping[str, Tensor]:
    """
    Apply one bias-corrected Adam update in place using the gradients stored on the parameters,
    then zero the gradients.
    :param state: the optimizer state
    :param params: the parameters, keyed as in the state
    :return: the updated parameters
    :raises ValueError: if a parameter is unknown to the state or its shape changed
    """
    for name, param in params.items():
        if name not in state.m or state.m[name].shape != param.data.shape:
            raise ValueError(f'parameter {name} with shape {param.data.shape} does not match the optimizer state')
    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for name, param in params.items():
        grad = param.grad
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * grad
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * grad ** 2
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        param.data = param.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
        param.zero_grad()
    return params


def gradient_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
                   kink: float = 1e-3) -> float:
    """
    Compare analytic gradients with central finite differences.
    Components whose one-sided differences disagree (a kink of relu/max inside the step) are skipped.
    :param loss_fn: builds the scalar loss from the current parameter values
    :param params: tensors to check; they must require gradients
    :param step: finite difference step
    :param kink: one-sided slopes differing by more than this (relative to their size) mark a kink
    :return: the largest relative error found
    """
    for param in params:
        param.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = [param.grad.copy() for param in params]

    worst = 0.0
    with no_grad():
        base = loss_fn().item()
        for param, grad in zip(params, analytic):
            flat = param.data.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + step
                plus = loss_fn().item()
                flat[i] = original - step
                minus = loss_fn().item()
                flat[i] = original
                forward, backward_ = (plus - base) / step, (base - minus) / step
                if abs(forward - backward_) > kink * max(1.0, abs(forward) + abs(backward_)):
                    continue
                numeric = (plus - minus) / (2 * step)
                exact = grad.reshape(-1)[i]
                error = abs(exact - numeric) / max(1e-6, abs(exact) + abs(numeric))
                worst = max(worst, error)
    for param in params:
        param.zero_grad()
    return worst


class TestBackward(unittest.TestCase):

    def test_product_rule(self):
        x = Tensor(3.0, requires_grad=True)
        y = Tensor(4.0, requires_grad=True)
        with Tape() as tape:
            loss = x * y
        backward(tape, loss)
        self.assertEqual(x.grad, 4.0)
        self.assertEqual(y.grad, 3.0)

    def test_relu_gate(self):
        w = Tensor([-1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = sum_(relu(w))
        tape.backward(loss)
        np.testing.assert_array_equal(w.grad, [0.0, 1.0])

    def test_non_scalar_loss(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            out = w * 2.0
        with self.assertRaises(TapeError):
            tape.backward(out)

    def test_foreign_tape(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            out = w * 2.0
        with Tape() as tape:
            with self.assertRaises(TapeError):
                sum_(out)
        self.assertEqual(tape.operations, [])

    def test_tape_consumed_once(self):
        w = Tensor(2.0, requires_grad=True)
        with Tape() as tape:
            loss = w * w
        tape.backward(loss)
        with self.assertRaises(TapeError):
            tape.backward(loss)

    def test_no_grad_records_nothing(self):
        w = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            with no_grad():
                out = relu(w)
        self.assertFalse(out.requires_grad)
        self.assertEqual(len(tape.operations), 0)

    def test_item_of_scalar_only(self):
        self.assertEqual(Tensor([[2.5]]).item(), 2.5)
        with self.assertRaises(ValueError):
            Tensor([1.0, 2.0]).item()

    def test_mlp_cross_entropy_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(100):
            dims = [int(d) for d in rng.integers(1, 7, size=int(rng.integers(1, 4)))] + [1]
            mlp = Mlp(dims, rng)
            x = Tensor(rng.normal(size=(int(rng.integers(1, 5)), dims[0])))
            labels = rng.integers(0, 2, size=x.shape[0])
            worst = max(worst, gradient_check(lambda: binary_cross_entropy(mlp(x), labels),
                                              list(mlp.parameters().values())))
        self.assertLess(worst, 1e-4)

    def test_concatenation_splits_gradient(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        weights = rng.normal(size=(3, 6))
        with Tape() as tape:
            loss = sum_(concat([a, b], axis=1) * weights)
        tape.backward(loss)
        np.testing.assert_array_equal(np.concatenate([a.grad, b.grad], axis=1), weights)


class TestPrimitiveGradients(unittest.TestCase):

    def check(self, build, shapes, draws=100, seed=0):
        rng = np.random.default_rng(seed)
        for _ in range(draws):
            tensors = [Tensor(rng.normal(size=shape), requires_grad=True) for shape in shapes]
            readout = rng.normal(size=np.shape(build(*[Tensor(t.data) for t in tensors]).data))
            error = gradient_check(lambda: sum_(build(*tensors) * readout), tensors)
            self.assertLess(error, 1e-4)

    def test_matmul(self):
        self.check(matmul, [(3, 4), (4, 2)])

    def test_elementwise(self):
        self.check(lambda a, b: tanh(a) * sigmoid(b) + relu(a - b), [(2, 3), (2, 3)])

    def test_broadcast_add(self):
        self.check(lambda a, b: a + b, [(4, 3), (3,)])

    def test_l1_norm(self):
        self.check(lambda a: l1_norm(a, axis=1), [(3, 5)])

    def test_gather_and_slice(self):
        self.check(lambda a: slice_columns(gather_rows(a, [2, 0, 2]), 1, 3), [(3, 4)])

    def test_conv1d(self):
        self.check(conv1d, [(2, 6), (3, 3), (3,)])

    def test_max_pool(self):
        self.check(lambda c: max_pool1d(c, 3), [(2, 2, 7)])

    def test_log_and_abs(self):
        self.check(lambda a: log(abs_(a) + 0.5), [(3, 4)])

    def test_clip(self):
        self.check(lambda a: clip(a, -0.5, 0.5) * a, [(3, 4)])

    def test_axis_sum_and_mean(self):
        self.check(lambda a: sum_(a, axis=0) * mean(a), [(4, 3)])
        self.check(lambda a: sum_(a, axis=1), [(4, 3)])

    def test_concat_and_reshape(self):
        self.check(lambda a, b: reshape(concat([a, b], axis=1), (3, 4)), [(2, 2), (2, 4)])

    def test_sparse_matmul(self):
        matrix = sparse.csr_matrix(np.array([[0.5, 0.5, 0.0], [0.0, 1.0, 0.0]]))
        self.check(lambda a: sparse_matmul(matrix, a), [(3, 2)])

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(3)
        mlp = Mlp([5, 7, 2], rng)
        x = Tensor(rng.normal(size=(4, 5)))
        self.assertTrue(np.array_equal(mlp(x).data, mlp(x).data))


class TestMlp(unittest.TestCase):

    def test_zero_map(self):
        mlp = Mlp([3, 4, 2])
        for p in mlp.parameters().values():
            p.data[...] = 0.0
        out = mlp_forward(mlp, Tensor(np.ones((5, 3))))
        np.testing.assert_array_equal(out.data, np.full((5, 2), 0.5))

    def test_single_linear_layer(self):
        mlp = Mlp([2, 1])
        mlp.weights[0].data = np.array([[1.0], [-1.0]])
        out = mlp_forward(mlp, Tensor([[2.0, 1.0]]))
        self.assertAlmostEqual(out.item(), 0.7310586, places=7)

    def test_batch_shape(self):
        self.assertEqual(mlp_forward(Mlp([4, 8, 1]), Tensor(np.zeros((3, 4)))).shape, (3, 1))

    def test_dimension_mismatch(self):
        with self.assertRaises(ValueError):
            mlp_forward(Mlp([4, 1]), Tensor(np.zeros((3, 5))))


class TestAdam(unittest.TestCase):

    def test_zero_gradient(self):
        param = Tensor([1.0, -2.0], requires_grad=True)
        state = AdamState({'w': param})
        adam_step(state, {'w': param})
        np.testing.assert_array_equal(param.data, [1.0, -2.0])

    def test_first_step(self):
        param = Tensor(1.0, requires_grad=True)
        param.grad = np.array(1.0)
        state = AdamState({'w': param}, learning_rate=0.01)
        adam_step(state, {'w': param})
        self.assertAlmostEqual(float(param.data), 0.99, places=7)
        self.assertEqual(float(param.grad), 0.0)
        self.assertEqual(state.t, 1)

    def test_updates_do_not_grow(self):
        param = Tensor(1.0, requires_grad=True)
        state = AdamState({'w': param})
        previous = float(param.data)
        updates = []
        for _ in range(2):
            param.grad = np.array(0.3)
            adam_step(state, {'w': param})
            updates.append(abs(float(param.data) - previous))
            previous = float(param.data)
        self.assertLessEqual(updates[1], updates[0] + 1e-12)

    def test_shape_mismatch(self):
        state = AdamState({'w': Tensor([1.0, 2.0], requires_grad=True)})
        with self.assertRaises(ValueError):
            adam_step(state, {'w': Tensor([1.0, 2.0, 3.0], requires_grad=True)})


if __name__ == '__main__':
    unittest.main(exit=False)

    # fit a logistic regression on two blobs
    rng = np.random.default_rng(0)
    features = np.vstack([rng.normal(-1, 1, (50, 2)), rng.normal(1, 1, (50, 2))])
    labels = np.repeat([0.0, 1.0], 50)
    model = Mlp([2, 1], rng)
    optimizer = AdamState(model.parameters())
    for epoch in range(100):
        with Tape() as tape:
            loss = binary_cross_entropy(model(Tensor(features)), labels)
        tape.backward(loss)
        adam_step(optimizer, model.parameters())
    print(f'logistic loss after 100 Adam steps: {loss.item():.4f}')
