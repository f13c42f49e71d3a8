import logging
import unittest
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from autodiff import Tensor, gradient_check, matmul, mean, relu, sparse_matmul
from noise_purifier import NeighborDistances, SampledNeighborhood

logger = logging.getLogger(__name__)

P_MIN = 0.05
STEP_SIZE = 0.02
TERMINATION_WINDOW = 10


def normalized_propagation(adjacency: sparse.spmatrix, self_weight: float = 1.0) -> sparse.csr_matrix:
    """
    Symmetric normalization M^{-1/2} V M^{-1/2} of V = A + self_weight * I, M = diag(row sums of V)
    :param adjacency: m x m symmetric adjacency with zero diagonal
    :param self_weight: weight of the self loop, 1 for the plain GCN operator
    :return: the propagation matrix
    :raises ValueError: if the adjacency is not square, not symmetric or has self loops
    """
    adjacency = sparse.csr_matrix(adjacency, dtype=np.float64)
    m, n = adjacency.shape
    if m != n:
        raise ValueError(f'adjacency must be square, got {adjacency.shape}')
    if np.any(adjacency.diagonal() != 0):
        raise ValueError('adjacency must have a zero diagonal')
    if (adjacency != adjacency.T).nnz:
        raise ValueError('adjacency must be symmetric')
    weighted = adjacency + self_weight * sparse.identity(m, format='csr')
    degree = np.asarray(weighted.sum(axis=1)).reshape(-1)
    scale = sparse.diags(1.0 / np.sqrt(degree))
    return sparse.csr_matrix(scale @ weighted @ scale)


def plain_gcn_layer(adjacency: sparse.spmatrix, h: Tensor, weight: Tensor) -> Tensor:
    """
    One graph convolution over the self-connected graph, ReLU(D^{-1/2} (A + I) D^{-1/2} h W)
    :param adjacency: m x m symmetric adjacency, zero diagonal
    :param h: m x d_in embeddings
    :param weight: d_in x d_out
    :return: m x d_out embeddings
    """
    return relu(matmul(sparse_matmul(normalized_propagation(adjacency), h), weight))


def weighted_self_loop_aggregate(adjacency: sparse.spmatrix, h: Tensor, weight: Tensor, p: float) -> Tensor:
    """
    Graph convolution with the center node boosted by the filtering threshold, ReLU(M^{-1/2} (A + (1 + p) I) M^{-1/2} h W).
    p is a constant of the pass.
    :param adjacency: m x m symmetric adjacency, zero diagonal
    :param h: m x d_in embeddings
    :param weight: d_in x d_out
    :param p: the threshold of the (layer, relation) cell, in [0, 1]
    :return: m x d_out embeddings
    """
    if not 0 <= p <= 1:
        raise ValueError(f'self-loop threshold {p} outside [0, 1]')
    return relu(matmul(sparse_matmul(normalized_propagation(adjacency, 1.0 + p), h), weight))


@dataclass(frozen=True)
class SampledAdjacency:
    """
    The graph induced by the selected neighborhoods of one (layer, relation, batch), symmetrized,
    over a universe of node ids.
    """
    universe: np.ndarray
    neighborhoods: Tuple[SampledNeighborhood, ...]
    matrix: sparse.csr_matrix

    @classmethod
    def from_neighborhoods(cls, universe: np.ndarray, neighborhoods: Sequence[SampledNeighborhood]) -> 'SampledAdjacency':
        """
        Build the symmetric adjacency with exactly the edges (v, u), u in C(v)
        :param universe: sorted global ids indexing the rows of the matrix
        :param neighborhoods: the selected neighborhoods of the centers
        :return: the sampled adjacency
        """
        centers = [np.full(len(n.selected), n.center) for n in neighborhoods]
        selected = [n.selected for n in neighborhoods]
        rows = np.searchsorted(universe, np.concatenate(centers or [[]]).astype(np.int64))
        cols = np.searchsorted(universe, np.concatenate(selected or [[]]).astype(np.int64))
        m = len(universe)
        directed = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(m, m))
        matrix = directed.maximum(directed.T).tocsr()
        matrix.data[:] = 1.0
        return cls(universe, tuple(neighborhoods), matrix)

    def edges(self) -> np.ndarray:
        upper = sparse.triu(self.matrix, k=1).tocoo()
        return np.column_stack([self.universe[upper.row], self.universe[upper.col]])


def average_fraud_distance(neighborhoods: Iterable[Tuple[NeighborDistances, SampledNeighborhood]],
                           fraud_nodes: Sequence[int], train_size: int) -> float:
    """
    Sum of the distances from each training fraud node to its selected neighbors, divided by the training set size
    :param neighborhoods: measured distances and selections of one (layer, relation) cell over an epoch
    :param fraud_nodes: ids of the fraud nodes of the training set
    :param train_size: |V_train|
    :return: the average distance D of the cell
    :raises ValueError: if the training set is empty
    """
    if train_size <= 0:
        raise ValueError('average distance needs a non-empty training set')
    fraud = set(int(v) for v in fraud_nodes)
    total = 0.0
    for measured, chosen in neighborhoods:
        if measured.center not in fraud:
            continue
        lookup = dict(zip(measured.neighbors.tolist(), measured.distances.tolist()))
        total += sum(lookup[u] for u in chosen.selected.tolist())
    return total / train_size


class ThresholdController:
    """
    Per (layer, relation) filtering thresholds tuned once per epoch by the sign of the change of the
    average fraud-neighbor distance.
    """

    def __init__(self, layers: int, relations: int, epochs: int = 50, init_threshold: float = 0.5,
                 tau: float = STEP_SIZE, p_min: float = P_MIN, fixed_weight: Optional[float] = None):
        """
        Initialize a controller with every cell at the initial threshold.
        :param layers: L
        :param relations: R
        :param epochs: the epoch bound E
        :param init_threshold: starting p of every cell
        :param tau: step size of one action
        :param p_min: lower clamp of p
        :param fixed_weight: when set, the self-loop weight stays at this value while p still drives sampling
        """
        if layers < 1 or relations < 1 or epochs < 1:
            raise ValueError(f'controller needs positive dimensions, got L={layers}, R={relations}, E={epochs}')
        if not p_min <= init_threshold <= 1:
            raise ValueError(f'initial threshold {init_threshold} outside [{p_min}, 1]')
        if fixed_weight is not None and not 0 <= fixed_weight <= 1:
            raise ValueError(f'fixed weight {fixed_weight} outside [0, 1]')
        self.tau = tau
        self.p_min = p_min
        self.epochs = epochs
        self.fixed_weight = fixed_weight
        self.epoch = 0
        self.p = np.full((layers, relations), float(init_threshold))
        self.previous: List[List[Optional[float]]] = [[None] * relations for _ in range(layers)]
        self.history: List[List[List[float]]] = [[[] for _ in range(relations)] for _ in range(layers)]
        self.terminated = np.zeros((layers, relations), dtype=bool)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.p.shape

    def threshold(self, layer: int, relation: int) -> float:
        return float(self.p[layer, relation])

    def self_loop_weight(self, layer: int, relation: int) -> float:
        return self.fixed_weight if self.fixed_weight is not None else self.threshold(layer, relation)

    def advance_epoch(self) -> int:
        self.epoch += 1
        return self.epoch

    def rl_update(self, layer: int, relation: int, current: float) -> float:
        """
        Record this epoch's average distance and move p by +tau if it did not rise, -tau otherwise.
        The first measurement of a cell is only recorded.
        :param layer: l
        :param relation: r
        :param current: this epoch's average distance of the cell
        :return: the new threshold
        :raises ValueError: if the cell is terminated
        """
        if self.terminated[layer, relation]:
            raise ValueError(f'cell ({layer}, {relation}) is terminated')
        previous = self.previous[layer][relation]
        self.previous[layer][relation] = current
        if previous is None:
            return self.threshold(layer, relation)
        action = self.tau if previous - current >= 0 else -self.tau
        self.history[layer][relation].append(action)
        self.p[layer, relation] = np.clip(self.p[layer, relation] + action, self.p_min, 1.0)
        logger.debug(f'cell ({layer}, {relation}): distance {previous:.5f} -> {current:.5f}, '
                     f'p = {self.p[layer, relation]:.3f}')
        return self.threshold(layer, relation)

    def rl_terminated(self, layer: int, relation: int) -> bool:
        """
        Whether the cell has settled: after at least ten epochs the recent actions cancel to within two steps,
        or the epoch bound is reached. A terminated cell is frozen.
        """
        if self.terminated[layer, relation]:
            return True
        recent = self.history[layer][relation][-TERMINATION_WINDOW:]
        settled = self.epoch >= TERMINATION_WINDOW and abs(sum(recent)) <= 2 * self.tau + 1e-12
        if settled or self.epoch >= self.epochs:
            self.terminated[layer, relation] = True
            logger.info(f'threshold of cell ({layer}, {relation}) settled at {self.threshold(layer, relation):.3f} '
                        f'in epoch {self.epoch}')
        return bool(self.terminated[layer, relation])

    def freeze(self, layer: int, relation: int) -> None:
        self.terminated[layer, relation] = True

    def state_dict(self) -> Dict:
        return {
            'p': self.p.tolist(),
            'previous': self.previous,
            'history': self.history,
            'terminated': self.terminated.tolist(),
            'epoch': self.epoch,
            'epochs': self.epochs,
            'tau': self.tau,
            'p_min': self.p_min,
            'fixed_weight': self.fixed_weight,
        }

    @classmethod
    def from_state(cls, state: Dict) -> 'ThresholdController':
        layers, relations = np.shape(state['p'])
        controller = cls(layers, relations, epochs=state['epochs'], tau=state['tau'], p_min=state['p_min'],
                         fixed_weight=state['fixed_weight'])
        controller.load_state(state)
        return controller

    def load_state(self, state: Dict) -> None:
        """
        Restore in place the state written by state_dict
        :param state: a state_dict of a controller of the same shape
        :raises ValueError: if the state holds another number of layers or relations
        """
        p = np.array(state['p'], dtype=np.float64)
        if p.shape != self.shape:
            raise ValueError(f'controller state of shape {p.shape}, expected {self.shape}')
        self.tau, self.p_min, self.epochs = state['tau'], state['p_min'], state['epochs']
        self.fixed_weight = state['fixed_weight']
        self.p = p
        self.previous = [list(row) for row in state['previous']]
        self.history = [[list(actions) for actions in row] for row in state['history']]
        self.terminated = np.array(state['terminated'], dtype=bool)
        self.epoch = state['epoch']


def random_adjacency(rng: np.random.Generator, m: int, density: float = 0.3) -> sparse.csr_matrix:
    upper = np.triu(rng.random((m, m)) < density, k=1)
    return sparse.csr_matrix((upper | upper.T).astype(np.float64))


def path_adjacency() -> sparse.csr_matrix:
    return sparse.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))


class TestAggregation(unittest.TestCase):

    def test_plain_gcn_two_nodes(self):
        out = plain_gcn_layer(path_adjacency(), Tensor([[1.0], [3.0]]), Tensor([[1.0]]))
        np.testing.assert_allclose(out.data, [[2.0], [2.0]])

    def test_weighted_two_nodes(self):
        out = weighted_self_loop_aggregate(path_adjacency(), Tensor([[1.0], [3.0]]), Tensor([[1.0]]), p=1.0)
        np.testing.assert_allclose(out.data, [[5 / 3], [7 / 3]])

    def test_isolated_node(self):
        h, w = Tensor([[0.5, -2.0]]), Tensor([[1.0], [0.25]])
        expected = np.maximum(h.data @ w.data, 0)
        isolated = sparse.csr_matrix((1, 1))
        np.testing.assert_allclose(plain_gcn_layer(isolated, h, w).data, expected)
        for p in (0.05, 0.5, 1.0):
            np.testing.assert_allclose(weighted_self_loop_aggregate(isolated, h, w, p).data, expected)

    def test_zero_threshold_is_plain_gcn(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            m = int(rng.integers(1, 15))
            adjacency = random_adjacency(rng, m)
            h, w = Tensor(rng.normal(size=(m, 3))), Tensor(rng.normal(size=(3, 2)))
            np.testing.assert_allclose(weighted_self_loop_aggregate(adjacency, h, w, 0.0).data,
                                       plain_gcn_layer(adjacency, h, w).data, rtol=0, atol=1e-12)

    def test_propagation_bounds(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            m = int(rng.integers(1, 12))
            matrix = normalized_propagation(random_adjacency(rng, m), 1.0 + rng.uniform()).toarray()
            self.assertTrue(np.all(matrix >= 0))
            self.assertTrue(np.all(matrix.sum(axis=1) <= m))

    def test_threshold_raises_self_share(self):
        rng = np.random.default_rng(2)
        adjacency = random_adjacency(rng, 8, density=0.5)
        v = int(np.argmax(np.asarray(adjacency.sum(axis=1)).reshape(-1)))
        shares = []
        for p in np.linspace(0.05, 1.0, 10):
            row = normalized_propagation(adjacency, 1.0 + p).getrow(v).toarray().reshape(-1)
            shares.append(row[v] / row.sum())
        self.assertTrue(np.all(np.diff(shares) > 0))

    def test_gradient(self):
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(100):
            m = int(rng.integers(1, 8))
            adjacency = random_adjacency(rng, m)
            h = Tensor(rng.normal(size=(m, 3)), requires_grad=True)
            w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
            p = float(rng.uniform(P_MIN, 1.0))
            worst = max(worst, gradient_check(lambda: mean(weighted_self_loop_aggregate(adjacency, h, w, p)), [h, w]))
        self.assertLess(worst, 1e-4)

    def test_invalid_adjacency(self):
        h, w = Tensor(np.ones((2, 1))), Tensor(np.ones((1, 1)))
        with self.assertRaises(ValueError):
            plain_gcn_layer(sparse.csr_matrix(np.array([[0.0, 1.0], [0.0, 0.0]])), h, w)
        with self.assertRaises(ValueError):
            plain_gcn_layer(sparse.csr_matrix(np.eye(2)), h, w)
        with self.assertRaises(ValueError):
            weighted_self_loop_aggregate(path_adjacency(), h, w, 1.5)
        with self.assertRaises(ValueError):
            plain_gcn_layer(path_adjacency(), h, Tensor(np.ones((2, 1))))


class TestSampledAdjacency(unittest.TestCase):

    def test_symmetric_edges(self):
        universe = np.array([3, 5, 8, 9])
        neighborhoods = [SampledNeighborhood(5, np.array([8, 3]), 2), SampledNeighborhood(9, np.array([5]), 1)]
        sampled = SampledAdjacency.from_neighborhoods(universe, neighborhoods)
        self.assertEqual(sorted(map(tuple, sampled.edges().tolist())), [(3, 5), (5, 8), (5, 9)])
        self.assertEqual((sampled.matrix != sampled.matrix.T).nnz, 0)

    def test_empty(self):
        sampled = SampledAdjacency.from_neighborhoods(np.array([0, 1]), [SampledNeighborhood(0, np.array([]), 0)])
        self.assertEqual(sampled.matrix.nnz, 0)


class TestAverageFraudDistance(unittest.TestCase):

    def cell(self, center, neighbors, distances, count):
        measured = NeighborDistances(center, np.array(neighbors), np.array(distances, dtype=float))
        order = np.lexsort((measured.neighbors, measured.distances))
        return measured, SampledNeighborhood(center, measured.neighbors[order[:count]], count)

    def test_single_fraud(self):
        self.assertAlmostEqual(average_fraud_distance([self.cell(0, [1], [0.4], 1)], [0], train_size=2), 0.2)

    def test_only_selected_fraud_terms(self):
        cells = [self.cell(0, [1, 2], [0.4, 0.9], 1), self.cell(1, [0], [5.0], 1)]
        self.assertAlmostEqual(average_fraud_distance(cells, [0], train_size=4), 0.1)

    def test_zero_and_linear(self):
        self.assertEqual(average_fraud_distance([self.cell(0, [1, 2], [0.0, 0.0], 2)], [0], 3), 0.0)
        base = [self.cell(0, [1, 2, 3], [0.1, 0.2, 0.7], 2)]
        doubled = [self.cell(0, [1, 2, 3], [0.2, 0.4, 1.4], 2)]
        self.assertAlmostEqual(2 * average_fraud_distance(base, [0], 5), average_fraud_distance(doubled, [0], 5))

    def test_empty_training_set(self):
        with self.assertRaises(ValueError):
            average_fraud_distance([], [], 0)


class TestThresholdController(unittest.TestCase):

    def step(self, controller, value, layer=0, relation=0):
        controller.advance_epoch()
        p = controller.rl_update(layer, relation, value)
        return p, controller.rl_terminated(layer, relation)

    def test_distance_fell(self):
        controller = ThresholdController(1, 1)
        self.assertEqual(self.step(controller, 0.30)[0], 0.5)
        self.assertAlmostEqual(self.step(controller, 0.25)[0], 0.52)

    def test_distance_rose(self):
        controller = ThresholdController(1, 1)
        self.step(controller, 0.25)
        self.assertAlmostEqual(self.step(controller, 0.30)[0], 0.48)

    def test_clamped(self):
        controller = ThresholdController(1, 1, init_threshold=1.0)
        self.step(controller, 0.3)
        self.assertEqual(self.step(controller, 0.2)[0], 1.0)
        low = ThresholdController(1, 1, init_threshold=0.06)
        for value in (0.1, 0.2, 0.3, 0.4):
            p, _ = self.step(low, value)
        self.assertEqual(p, P_MIN)

    def test_oscillation_terminates(self):
        controller = ThresholdController(1, 1)
        values = [0.3, 0.2] * 6
        done = [self.step(controller, value)[1] for value in values]
        self.assertTrue(done[9])
        self.assertFalse(any(done[:9]))

    def test_monotone_drift_continues(self):
        controller = ThresholdController(1, 1)
        done = [self.step(controller, 1.0 - 0.01 * e)[1] for e in range(12)]
        self.assertFalse(any(done))

    def test_early_epoch(self):
        controller = ThresholdController(1, 1)
        for value in [0.3, 0.2] * 3 + [0.3]:
            _, done = self.step(controller, value)
        self.assertEqual(controller.epoch, 7)
        self.assertFalse(done)

    def test_epoch_bound(self):
        controller = ThresholdController(1, 1, epochs=3)
        done = [self.step(controller, 1.0 - 0.1 * e)[1] for e in range(3)]
        self.assertEqual(done, [False, False, True])

    def test_frozen_after_termination(self):
        controller = ThresholdController(1, 1, epochs=2)
        self.step(controller, 0.3)
        self.step(controller, 0.2)
        p = controller.threshold(0, 0)
        with self.assertRaises(ValueError):
            controller.rl_update(0, 0, 0.1)
        self.assertEqual(controller.threshold(0, 0), p)

    def test_stationary_signal(self):
        # distance grows with p, so lowering p lowers the distance
        controller = ThresholdController(2, 3, epochs=50)
        done = False
        while not done:
            controller.advance_epoch()
            for l in range(2):
                for r in range(3):
                    if not controller.terminated[l, r]:
                        controller.rl_update(l, r, controller.threshold(l, r) * (1 + l + r))
                        controller.rl_terminated(l, r)
            done = controller.terminated.all()
        self.assertLess(controller.epoch, 50)
        for l in range(2):
            for r in range(3):
                self.assertLessEqual(len(controller.history[l][r]), controller.epochs)
                self.assertLessEqual(abs(sum(controller.history[l][r][-10:])), 2 * controller.tau + 1e-12)

    def test_deterministic_and_state_round_trip(self):
        signal = np.random.default_rng(3).uniform(size=15)
        first, second = ThresholdController(1, 2), ThresholdController(1, 2)
        for value in signal:
            for controller in (first, second):
                controller.advance_epoch()
                for r in range(2):
                    if not controller.terminated[0, r]:
                        controller.rl_update(0, r, value * (r + 1))
                        controller.rl_terminated(0, r)
        np.testing.assert_array_equal(first.p, second.p)
        restored = ThresholdController.from_state(first.state_dict())
        self.assertEqual(restored.state_dict(), first.state_dict())

    def test_load_state_in_place(self):
        source = ThresholdController(1, 2, fixed_weight=0.4)
        self.step(source, 0.5)
        self.step(source, 0.3)
        target = ThresholdController(1, 2)
        target.load_state(source.state_dict())
        self.assertEqual(target.state_dict(), source.state_dict())
        self.assertEqual(target.self_loop_weight(0, 0), 0.4)
        with self.assertRaises(ValueError):
            ThresholdController(2, 2).load_state(source.state_dict())

    def test_fixed_weight(self):
        controller = ThresholdController(1, 1, fixed_weight=0.3)
        self.step(controller, 0.3)
        self.step(controller, 0.2)
        self.assertAlmostEqual(controller.threshold(0, 0), 0.52)
        self.assertEqual(controller.self_loop_weight(0, 0), 0.3)


if __name__ == '__main__':
    unittest.main(exit=False)

    logging.basicConfig(level=logging.INFO)
    controller = ThresholdController(1, 1, epochs=30)
    for e in range(30):
        controller.advance_epoch()
        controller.rl_update(0, 0, abs(controller.threshold(0, 0) - 0.7))
        if controller.rl_terminated(0, 0):
            break
    print(f'threshold after {controller.epoch} epochs: {controller.threshold(0, 0):.2f}')
