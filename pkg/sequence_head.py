import logging
import unittest
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from autodiff import (Mlp, Tensor, conv1d, glorot_uniform, gradient_check, matmul, max_pool1d, mean, mlp_forward, mul,
                      relu, reshape, sigmoid, slice_columns, tanh)

logger = logging.getLogger(__name__)

CELLS = ('paper-rnn', 'standard-lstm')


@dataclass
class ConvSpec:
    """
    A bank of 1-D kernels of width 2k + 1 with one bias per kernel, followed by ReLU.
    """
    weight: Tensor
    bias: Tensor
    half_width: int

    def __post_init__(self):
        if self.weight.shape != (self.weight.shape[0], 2 * self.half_width + 1) or self.weight.shape[0] < 1:
            raise ValueError(f'kernel bank of shape {self.weight.shape} does not match half width {self.half_width}')
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f'expected {self.weight.shape[0]} biases, got shape {self.bias.shape}')

    @classmethod
    def initialize(cls, rng: np.random.Generator, num_kernels: int, half_width: int) -> 'ConvSpec':
        window = 2 * half_width + 1
        return cls(Tensor(glorot_uniform(rng, window, num_kernels).T, requires_grad=True),
                   Tensor(np.zeros(num_kernels), requires_grad=True), half_width)

    @property
    def num_kernels(self) -> int:
        return self.weight.shape[0]

    @property
    def window(self) -> int:
        return 2 * self.half_width + 1


@dataclass(frozen=True)
class PoolSpec:
    half_width: int

    def __post_init__(self):
        if self.half_width < 0:
            raise ValueError(f'pool half width must be non-negative, got {self.half_width}')

    @property
    def window(self) -> int:
        return 2 * self.half_width + 1


@dataclass(frozen=True)
class SequenceLayout:
    """
    How the pooled feature vector is cut into a sequence: steps chunks of width width.
    """
    steps: int
    width: int

    def __post_init__(self):
        if self.steps < 1 or self.width < 1:
            raise ValueError(f'invalid sequence layout {self.steps} x {self.width}')

    @classmethod
    def for_features(cls, feature_dim: int, num_kernels: int, window: int, steps: int) -> 'SequenceLayout':
        """
        Lay out the pooled feature map of a feature_dim-wide embedding into steps chunks
        :raises ValueError: if the pooled length is not a multiple of steps
        """
        pooled = num_kernels * -(-feature_dim // window)
        if steps < 1 or pooled % steps:
            raise ValueError(f'pooled length {pooled} cannot be cut into {steps} equal chunks')
        return cls(steps, pooled // steps)


@dataclass
class BiRnnParams:
    """
    Weights of the bidirectional recurrent layer. For 'paper-rnn' each direction has an input and a recurrent
    matrix and the final states are mixed through a sigmoid gate; 'standard-lstm' replaces each direction
    with a gated LSTM cell.
    """
    cell: str
    input_dim: int
    hidden: int
    weights: Dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def initialize(cls, rng: np.random.Generator, input_dim: int, hidden: int, cell: str = 'paper-rnn') -> 'BiRnnParams':
        if cell not in CELLS:
            raise ValueError(f'unknown recurrent cell {cell!r}, expected one of {CELLS}')
        gates = 4 if cell == 'standard-lstm' else 1
        weights = {}
        for direction in ('forward', 'backward'):
            weights[f'{direction}.input'] = Tensor(glorot_uniform(rng, input_dim, gates * hidden), requires_grad=True)
            weights[f'{direction}.recurrent'] = Tensor(glorot_uniform(rng, hidden, gates * hidden), requires_grad=True)
            if cell == 'standard-lstm':
                weights[f'{direction}.bias'] = Tensor(np.zeros(gates * hidden), requires_grad=True)
            weights[f'{direction}.mix'] = Tensor(glorot_uniform(rng, hidden, hidden), requires_grad=True)
        return cls(cell, input_dim, hidden, weights)

    def parameters(self, prefix: str = 'birnn') -> Dict[str, Tensor]:
        return {f'{prefix}.{name}': tensor for name, tensor in self.weights.items()}


def conv1d_forward(spec: ConvSpec, x: Tensor) -> Tensor:
    """
    Convolve every row with each kernel, zero-padded to the same length, then ReLU
    :param spec: the kernel bank
    :param x: batch x d embeddings
    :return: batch x num_kernels x d feature maps
    :raises ValueError: if d is shorter than the kernel window
    """
    if x.shape[1] < spec.window:
        raise ValueError(f'input length {x.shape[1]} is shorter than the kernel window {spec.window}')
    return relu(conv1d(x, spec.weight, spec.bias))


def max_pool(spec: PoolSpec, c: Tensor) -> Tensor:
    """
    Max over non-overlapping windows of width 2k + 1; the last window may be partial
    :param spec: the pooling window
    :param c: feature maps, pooled along the last axis
    :return: feature maps of length ceil(d / window)
    :raises ValueError: if the feature map is empty
    """
    if c.shape[-1] == 0:
        raise ValueError('cannot pool an empty feature map')
    return max_pool1d(c, spec.window)


def _elman_pass(x_steps: Sequence[Tensor], input_weight: Tensor, recurrent_weight: Tensor, hidden: int) -> List[Tensor]:
    state = Tensor(np.zeros((x_steps[0].shape[0], hidden)))
    states = []
    for x in x_steps:
        state = tanh(matmul(x, input_weight) + matmul(state, recurrent_weight))
        states.append(state)
    return states


def _lstm_pass(x_steps: Sequence[Tensor], input_weight: Tensor, recurrent_weight: Tensor, bias: Tensor,
               hidden: int) -> List[Tensor]:
    state = Tensor(np.zeros((x_steps[0].shape[0], hidden)))
    memory = Tensor(np.zeros((x_steps[0].shape[0], hidden)))
    states = []
    for x in x_steps:
        gates = matmul(x, input_weight) + matmul(state, recurrent_weight) + bias
        input_gate = sigmoid(slice_columns(gates, 0, hidden))
        forget_gate = sigmoid(slice_columns(gates, hidden, 2 * hidden))
        output_gate = sigmoid(slice_columns(gates, 2 * hidden, 3 * hidden))
        candidate = tanh(slice_columns(gates, 3 * hidden, 4 * hidden))
        memory = mul(forget_gate, memory) + mul(input_gate, candidate)
        state = mul(output_gate, tanh(memory))
        states.append(state)
    return states


def birnn_forward(params: BiRnnParams, sequence: Sequence[Tensor]) -> Tensor:
    """
    Run the bidirectional recurrence over a sequence and fuse both directions at the final step,
    sigmoid(h_fwd W_f + h_bwd W_b). Initial states are zero.
    :param params: the recurrent weights
    :param sequence: T tensors of shape batch x s
    :return: batch x H fused state
    :raises ValueError: if the sequence is empty or a chunk width differs from the input width
    """
    if not sequence:
        raise ValueError('recurrent layer needs at least one step')
    for x in sequence:
        if x.shape[1] != params.input_dim:
            raise ValueError(f'chunk width {x.shape[1]} does not match the recurrent input width {params.input_dim}')
    w = params.weights
    passes = {}
    for direction, steps in (('forward', list(sequence)), ('backward', list(reversed(sequence)))):
        if params.cell == 'standard-lstm':
            passes[direction] = _lstm_pass(steps, w[f'{direction}.input'], w[f'{direction}.recurrent'],
                                           w[f'{direction}.bias'], params.hidden)
        else:
            passes[direction] = _elman_pass(steps, w[f'{direction}.input'], w[f'{direction}.recurrent'], params.hidden)
    # the backward state aligned with the final step is the first one the reversed pass produced
    forward_state, backward_state = passes['forward'][-1], passes['backward'][0]
    return sigmoid(matmul(forward_state, w['forward.mix']) + matmul(backward_state, w['backward.mix']))


def head_predict(conv: ConvSpec, pool: PoolSpec, birnn: BiRnnParams, classifier: Mlp, h: Tensor) -> Tensor:
    """
    Fraud probability of each node from its top-layer embedding:
    conv -> pool -> flatten -> tanh -> chunks -> bidirectional recurrence -> classifier.
    :param conv: the kernel bank
    :param pool: the pooling window
    :param birnn: the recurrent layer; its input width fixes the chunk width
    :param classifier: MLP from the fused state to one probability
    :param h: batch x d embeddings
    :return: batch x 1 probabilities
    """
    pooled = max_pool(pool, conv1d_forward(conv, h))
    batch, kernels, length = pooled.shape
    flat = tanh(reshape(pooled, (batch, kernels * length)))
    if flat.shape[1] % birnn.input_dim:
        raise ValueError(f'pooled length {flat.shape[1]} is not a multiple of the chunk width {birnn.input_dim}')
    width = birnn.input_dim
    steps = [slice_columns(flat, t * width, (t + 1) * width) for t in range(flat.shape[1] // width)]
    return mlp_forward(classifier, birnn_forward(birnn, steps))


class SequenceHead:
    """
    The convolution + recurrent classifier that turns a top-layer node embedding into a fraud probability.
    """

    def __init__(self, feature_dim: int, rng: np.random.Generator = None, num_kernels: int = 4, half_width: int = 1,
                 hidden: int = 16, steps: int = 4, cell: str = 'paper-rnn'):
        """
        Initialize the head. The pooled layout is validated here, once.
        :param feature_dim: width d of the embeddings fed to the head
        :param rng: generator for the initial weights
        :param num_kernels: number of convolution kernels
        :param half_width: k, the kernel and pooling window is 2k + 1
        :param hidden: recurrent width H
        :param steps: number of chunks T
        :param cell: 'paper-rnn' or 'standard-lstm'
        :raises ValueError: if the embedding cannot be laid out into steps equal chunks
        """
        rng = rng if rng is not None else np.random.default_rng(0)
        if feature_dim < 2 * half_width + 1:
            raise ValueError(f'embedding width {feature_dim} is shorter than the window {2 * half_width + 1}')
        self.layout = SequenceLayout.for_features(feature_dim, num_kernels, 2 * half_width + 1, steps)
        self.conv = ConvSpec.initialize(rng, num_kernels, half_width)
        self.pool = PoolSpec(half_width)
        self.birnn = BiRnnParams.initialize(rng, self.layout.width, hidden, cell)
        self.classifier = Mlp([hidden, hidden, 1], rng)
        logger.debug(f'sequence head: {feature_dim} -> {num_kernels} x {self.layout.steps * self.layout.width // num_kernels}'
                     f' -> {self.layout.steps} x {self.layout.width} -> {hidden} ({cell})')

    def parameters(self, prefix: str = 'head') -> Dict[str, Tensor]:
        params = {f'{prefix}.conv.weight': self.conv.weight, f'{prefix}.conv.bias': self.conv.bias}
        params.update(self.birnn.parameters(f'{prefix}.birnn'))
        params.update(self.classifier.parameters(f'{prefix}.classifier'))
        return params

    def __call__(self, h: Tensor) -> Tensor:
        return head_predict(self.conv, self.pool, self.birnn, self.classifier, h)


def fixed_conv(kernel, bias=0.0) -> ConvSpec:
    return ConvSpec(Tensor([kernel]), Tensor([bias]), len(kernel) // 2)


class TestConvolution(unittest.TestCase):

    def test_identity_kernel(self):
        x = np.array([[0.5, 2.0, 0.0, 3.5]])
        np.testing.assert_allclose(conv1d_forward(fixed_conv([0.0, 1.0, 0.0]), Tensor(x)).data[:, 0], x)

    def test_box_kernel(self):
        out = conv1d_forward(fixed_conv([1.0, 1.0, 1.0]), Tensor([[1.0, 2.0, 3.0]]))
        np.testing.assert_allclose(out.data[0, 0], [3.0, 6.0, 5.0])

    def test_negative_bias(self):
        out = conv1d_forward(fixed_conv([0.0, 0.0, 0.0], bias=-1.0), Tensor([[4.0, -2.0, 1.0]]))
        np.testing.assert_array_equal(out.data, np.zeros((1, 1, 3)))

    def test_short_input(self):
        with self.assertRaises(ValueError):
            conv1d_forward(fixed_conv([1.0, 1.0, 1.0]), Tensor([[1.0, 2.0]]))


class TestPooling(unittest.TestCase):

    def test_windows(self):
        out = max_pool(PoolSpec(1), Tensor([[[3.0, 6.0, 5.0, 1.0, 0.0, 2.0]]]))
        np.testing.assert_allclose(out.data[0, 0], [6.0, 2.0])

    def test_constant_and_length(self):
        for d in range(1, 12):
            out = max_pool(PoolSpec(1), Tensor(np.full((2, 3, d), 1.5)))
            self.assertEqual(out.shape, (2, 3, -(-d // 3)))
            np.testing.assert_array_equal(out.data, 1.5)

    def test_empty(self):
        with self.assertRaises(ValueError):
            max_pool(PoolSpec(1), Tensor(np.zeros((1, 1, 0))))


class TestBiRnn(unittest.TestCase):

    def test_zero_network(self):
        params = BiRnnParams.initialize(np.random.default_rng(0), 2, 5)
        for tensor in params.weights.values():
            tensor.data[...] = 0.0
        out = birnn_forward(params, [Tensor(np.ones((3, 2)))] * 4)
        np.testing.assert_array_equal(out.data, np.full((3, 5), 0.5))

    def test_hand_evaluation(self):
        params = BiRnnParams('paper-rnn', 1, 1, {name: Tensor([[value]]) for name, value in (
            ('forward.input', 1.0), ('forward.recurrent', 0.0), ('forward.mix', 1.0),
            ('backward.input', 1.0), ('backward.recurrent', 0.0), ('backward.mix', 1.0))})
        # sigmoid(2 tanh(0.5))
        self.assertAlmostEqual(birnn_forward(params, [Tensor([[0.5]])]).item(), 0.715904, places=6)

    def test_palindrome_with_tied_weights(self):
        rng = np.random.default_rng(1)
        params = BiRnnParams.initialize(rng, 2, 3)
        for part in ('input', 'recurrent', 'mix'):
            params.weights[f'backward.{part}'] = params.weights[f'forward.{part}']
        a, b = Tensor(rng.normal(size=(1, 2))), Tensor(rng.normal(size=(1, 2)))
        sequence = [a, b, a]
        np.testing.assert_allclose(birnn_forward(params, sequence).data,
                                   birnn_forward(params, list(reversed(sequence))).data)

    def test_width_mismatch(self):
        params = BiRnnParams.initialize(np.random.default_rng(0), 3, 2)
        with self.assertRaises(ValueError):
            birnn_forward(params, [Tensor(np.ones((1, 2)))])

    def test_unknown_cell(self):
        with self.assertRaises(ValueError):
            BiRnnParams.initialize(np.random.default_rng(0), 3, 2, cell='gru')

    def test_gradient_through_time(self):
        rng = np.random.default_rng(2)
        worst = 0.0
        for draw in range(100):
            cell = CELLS[draw % 2]
            steps = int(rng.integers(1, 9))
            params = BiRnnParams.initialize(rng, 2, 3, cell)
            sequence = [Tensor(rng.normal(size=(2, 2)), requires_grad=True) for _ in range(steps)]
            worst = max(worst, gradient_check(lambda: mean(birnn_forward(params, sequence)),
                                              list(params.weights.values()) + sequence))
        self.assertLess(worst, 1e-4)


class TestHeadPredict(unittest.TestCase):

    def test_layout_error_at_construction(self):
        with self.assertRaises(ValueError):
            SequenceHead(10, num_kernels=1, half_width=1, steps=3)
        with self.assertRaises(ValueError):
            SequenceHead(2, half_width=1)

    def test_shape_algebra(self):
        rng = np.random.default_rng(3)
        for d, kernels, half_width, steps in ((8, 2, 1, 2), (64, 4, 1, 4), (12, 2, 1, 8), (10, 3, 2, 2)):
            head = SequenceHead(d, rng, kernels, half_width, hidden=5, steps=steps)
            self.assertEqual(head.layout.steps * head.layout.width, kernels * -(-d // (2 * half_width + 1)))
            out = head(Tensor(rng.normal(size=(7, d))))
            self.assertEqual(out.shape, (7, 1))
            self.assertTrue(np.all((out.data > 0) & (out.data < 1)))

    def test_order_preserving_and_deterministic(self):
        rng = np.random.default_rng(4)
        head = SequenceHead(16, rng, hidden=4)
        h = rng.normal(size=(6, 16))
        order = rng.permutation(6)
        out = head(Tensor(h)).data
        np.testing.assert_allclose(head(Tensor(h[order])).data, out[order])
        np.testing.assert_array_equal(head(Tensor(h)).data, out)

    def test_full_pipeline_gradient(self):
        rng = np.random.default_rng(5)
        worst = 0.0
        for draw in range(100):
            d, rows = int(rng.integers(3, 10)), int(rng.integers(1, 5))
            head = SequenceHead(d, rng, num_kernels=2, half_width=1, hidden=3, steps=2, cell=CELLS[draw % 2])
            h = Tensor(rng.normal(size=(rows, d)), requires_grad=True)
            target = Tensor(rng.integers(0, 2, size=(rows, 1)))

            def loss():
                q = head(h)
                return mean(mul(q - target, q - target))

            worst = max(worst, gradient_check(loss, list(head.parameters().values()) + [h]))
        self.assertLess(worst, 1e-4)


if __name__ == '__main__':
    unittest.main(exit=False)

    rng = np.random.default_rng(0)
    head = SequenceHead(64, rng)
    print(f'layout: {head.layout}')
    print(f'probabilities: {head(Tensor(rng.normal(size=(3, 64)))).data.reshape(-1)}')
