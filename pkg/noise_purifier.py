import logging
import math
import unittest
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.special import logit

from autodiff import (AdamState, Mlp, Tape, Tensor, adam_step, binary_cross_entropy, mlp_forward, no_grad,
                      sparse_matmul)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NeighborDistances:
    """
    Prediction distances between a center node and each of its neighbors under one relation and layer.
    """
    center: int
    neighbors: np.ndarray
    distances: np.ndarray

    def __post_init__(self):
        if len(self.neighbors) != len(self.distances):
            raise ValueError('one distance per neighbor is required')
        if np.any(self.distances < 0):
            raise ValueError('distances must be non-negative')

    def __len__(self):
        return len(self.neighbors)


@dataclass(frozen=True)
class SampledNeighborhood:
    """
    The neighbors kept after similarity filtering, C_{v,r}, and the sample count that produced them.
    """
    center: int
    selected: np.ndarray
    sample_count: int


def pairwise_distance(mlp: Mlp, h_v, h_u) -> float:
    """
    L1 distance between the MLP predictions of two embeddings, ||sigma(MLP(h_v)) - sigma(MLP(h_u))||_1.
    Evaluated without gradient tracking.
    :param mlp: the layer's purifier MLP
    :param h_v: embedding of the center node
    :param h_u: embedding of the neighbor
    :return: the non-negative distance
    :raises ValueError: if an embedding width differs from the MLP input width
    """
    h_v = np.asarray(h_v.data if isinstance(h_v, Tensor) else h_v, dtype=np.float64).reshape(1, -1)
    h_u = np.asarray(h_u.data if isinstance(h_u, Tensor) else h_u, dtype=np.float64).reshape(1, -1)
    with no_grad():
        predictions = mlp_forward(mlp, Tensor(np.vstack([h_v, h_u]))).data
    return float(np.abs(predictions[0] - predictions[1]).sum())


def similarity(distance: float) -> float:
    """
    Similarity of two nodes from their prediction distance, 1 / (1 + d)
    :param distance: non-negative distance
    :return: similarity in (0, 1]
    """
    if distance < 0:
        raise ValueError(f'distance must be non-negative, got {distance}')
    return 1.0 / (1.0 + distance)


def purifier_loss(mlp: Mlp, embeddings: Sequence[Tensor], labels: Sequence[int]) -> Tensor:
    """
    Cross-entropy of the purifier MLP on relation-specific embeddings of the batch nodes,
    summed over relations and averaged over the batch.
    :param mlp: the layer's purifier MLP
    :param embeddings: one batch x d tensor per relation, rows aligned with labels
    :param labels: 0/1 labels of the batch nodes
    :return: scalar loss
    :raises ValueError: if the batch is empty
    """
    if len(labels) == 0 or not embeddings:
        raise ValueError('purifier loss needs a non-empty batch and at least one relation')
    losses = [binary_cross_entropy(mlp_forward(mlp, h), labels) for h in embeddings]
    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    return total


def sample_count(p: float, neighbor_count: int) -> int:
    """
    Number of neighbors kept under threshold p: ceil(p * |N_r(v)|), so that a non-empty neighborhood keeps at least one
    :param p: filtering threshold in (0, 1]
    :param neighbor_count: |N_r(v)|
    :return: the sample count
    """
    if not 0 < p <= 1:
        raise ValueError(f'threshold {p} outside (0, 1]')
    if neighbor_count == 0:
        return 0
    # guard against p * n landing a hair above an integer through float error
    return min(neighbor_count, math.ceil(round(p * neighbor_count, 9)))


def select_neighbors(distances: NeighborDistances, count: int) -> SampledNeighborhood:
    """
    Keep the count neighbors with the smallest distance, ties broken by ascending node id
    :param distances: distances of all neighbors
    :param count: number to keep
    :return: the sampled neighborhood, neighbor ids in ascending distance order
    :raises ValueError: if count exceeds the number of neighbors
    """
    if count > len(distances) or count < 0:
        raise ValueError(f'cannot select {count} of {len(distances)} neighbors')
    order = np.lexsort((distances.neighbors, distances.distances))
    return SampledNeighborhood(distances.center, distances.neighbors[order[:count]], count)


def purify_neighborhoods(scores: np.ndarray, universe: np.ndarray, adjacency: sparse.csr_matrix,
                         centers: np.ndarray, p: float) -> List[Tuple[NeighborDistances, SampledNeighborhood]]:
    """
    Score and filter the neighborhoods of a batch of center nodes under one relation.
    :param scores: purifier predictions sigma(MLP(h)) for every node of the universe, rows aligned with universe
    :param universe: sorted global ids of the nodes whose embeddings are available
    :param adjacency: N x N adjacency of the relation
    :param centers: global ids of the center nodes, all in the universe
    :param p: the filtering threshold of the (layer, relation) cell
    :return: for each center, its neighbor distances and the selected neighborhood
    """
    results = []
    center_rows = np.searchsorted(universe, centers)
    for center, row in zip(centers, center_rows):
        neighbors = adjacency.indices[adjacency.indptr[center]:adjacency.indptr[center + 1]]
        neighbor_rows = np.searchsorted(universe, neighbors)
        distance = np.abs(scores[neighbor_rows] - scores[row]).sum(axis=1)
        measured = NeighborDistances(int(center), neighbors, distance)
        results.append((measured, select_neighbors(measured, sample_count(p, len(neighbors)))))
    logger.debug(f'purified {len(centers)} neighborhoods at p={p:.3f}')
    return results


def sampled_mean_aggregate(h: Tensor, universe: np.ndarray, neighborhoods: Sequence[SampledNeighborhood]) -> Tensor:
    """
    Relation-specific embedding of each center: the mean of h over the center and its selected neighbors.
    :param h: embeddings of the universe nodes
    :param universe: sorted global ids of the rows of h
    :param neighborhoods: the sampled neighborhoods of the centers
    :return: one row per center
    """
    rows, cols, values = [], [], []
    for i, neighborhood in enumerate(neighborhoods):
        members = np.concatenate([[neighborhood.center], neighborhood.selected]).astype(np.int64)
        rows.extend([i] * len(members))
        cols.extend(np.searchsorted(universe, members))
        values.extend([1.0 / len(members)] * len(members))
    averaging = sparse.csr_matrix((values, (rows, cols)), shape=(len(neighborhoods), len(universe)))
    return sparse_matmul(averaging, h)


def linear_mlp(weight: float) -> Mlp:
    mlp = Mlp([1, 1])
    mlp.weights[0].data = np.array([[weight]])
    return mlp


class TestDistance(unittest.TestCase):

    def test_identical_embeddings(self):
        mlp = Mlp([4, 8, 1], np.random.default_rng(0))
        h = np.arange(4.0)
        self.assertEqual(pairwise_distance(mlp, h, h), 0.0)

    def test_fixed_predictions(self):
        # identity weight: predictions are sigmoid(logit(q)) = q
        mlp = linear_mlp(1.0)
        self.assertAlmostEqual(pairwise_distance(mlp, [logit(0.8)], [logit(0.3)]), 0.5, places=12)

    def test_symmetric_and_similarity_range(self):
        rng = np.random.default_rng(1)
        mlp = Mlp([3, 5, 2], rng)
        for _ in range(100):
            h_v, h_u = rng.normal(size=3), rng.normal(size=3)
            d = pairwise_distance(mlp, h_v, h_u)
            self.assertEqual(d, pairwise_distance(mlp, h_u, h_v))
            self.assertTrue(0 < similarity(d) <= 1)

    def test_dimension_mismatch(self):
        with self.assertRaises(ValueError):
            pairwise_distance(Mlp([3, 1]), np.zeros(4), np.zeros(4))


class TestSimilarity(unittest.TestCase):

    def test_formula(self):
        self.assertEqual(similarity(0), 1.0)
        self.assertEqual(similarity(1), 0.5)
        self.assertAlmostEqual(similarity(9), 0.1)

    def test_negative(self):
        with self.assertRaises(ValueError):
            similarity(-0.1)


class TestPurifierLoss(unittest.TestCase):

    def test_uninformative(self):
        mlp = linear_mlp(0.0)
        loss = purifier_loss(mlp, [Tensor(np.ones((4, 1)))], [1, 0, 1, 1])
        self.assertAlmostEqual(loss.item(), np.log(2))

    def test_hand_arithmetic(self):
        mlp = linear_mlp(1.0)
        loss = purifier_loss(mlp, [Tensor([[logit(0.9)], [logit(0.2)]])], [1, 0])
        self.assertAlmostEqual(loss.item(), (-np.log(0.9) - np.log(0.8)) / 2)

    def test_perfect_prediction(self):
        mlp = linear_mlp(1.0)
        loss = purifier_loss(mlp, [Tensor([[40.0], [-40.0]])], [1, 0])
        self.assertLess(loss.item(), 1e-6)

    def test_sum_over_relations(self):
        mlp = linear_mlp(0.0)
        h = Tensor(np.zeros((3, 1)))
        self.assertAlmostEqual(purifier_loss(mlp, [h, h], [0, 1, 0]).item(), 2 * np.log(2))

    def test_empty_batch(self):
        with self.assertRaises(ValueError):
            purifier_loss(linear_mlp(1.0), [Tensor(np.zeros((0, 1)))], [])

    def test_decreases_under_adam(self):
        rng = np.random.default_rng(4)
        labels = np.repeat([0, 1], 20)
        h = Tensor(np.vstack([rng.normal(-2, 0.5, (20, 2)), rng.normal(2, 0.5, (20, 2))]))
        mlp = Mlp([2, 8, 1], rng)
        optimizer = AdamState(mlp.parameters())
        losses = []
        for _ in range(50):
            with Tape() as tape:
                loss = purifier_loss(mlp, [h], labels)
            tape.backward(loss)
            adam_step(optimizer, mlp.parameters())
            losses.append(loss.item())
        self.assertLess(losses[-1], losses[0])


class TestSampling(unittest.TestCase):

    def test_sample_count(self):
        self.assertEqual(sample_count(0.5, 7), 4)
        self.assertEqual(sample_count(1.0, 9), 9)
        self.assertEqual(sample_count(0.3, 0), 0)
        self.assertEqual(sample_count(0.05, 3), 1)

    def test_sample_count_range(self):
        for p in (0.0, 1.5, -0.2):
            with self.assertRaises(ValueError):
                sample_count(p, 3)

    def test_select(self):
        d = NeighborDistances(0, np.array([1, 2, 3]), np.array([0.1, 0.7, 0.4]))
        self.assertEqual(set(select_neighbors(d, 2).selected.tolist()), {1, 3})
        self.assertEqual(set(select_neighbors(d, 3).selected.tolist()), {1, 2, 3})

    def test_tie_break(self):
        d = NeighborDistances(0, np.array([2, 1]), np.array([0.3, 0.3]))
        self.assertEqual(select_neighbors(d, 1).selected.tolist(), [1])

    def test_count_too_large(self):
        with self.assertRaises(ValueError):
            select_neighbors(NeighborDistances(0, np.array([1]), np.array([0.2])), 2)

    def test_against_sort_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            n = int(rng.integers(0, 12))
            neighbors = rng.choice(100, n, replace=False)
            distances = rng.integers(0, 5, n) / 4.0  # coarse values to force ties
            p = float(rng.uniform(0.01, 1.0))
            count = sample_count(p, n)
            chosen = select_neighbors(NeighborDistances(0, neighbors, distances), count).selected
            oracle = [u for _, u in sorted(zip(distances.tolist(), neighbors.tolist()))][:count]
            self.assertEqual(chosen.tolist(), oracle)
            self.assertEqual(len(chosen), min(math.ceil(p * n - 1e-9), n))
            excluded = set(neighbors.tolist()) - set(chosen.tolist())
            lookup = dict(zip(neighbors.tolist(), distances.tolist()))
            for u in excluded:
                self.assertTrue(all(lookup[v] <= lookup[u] for v in chosen.tolist()))

    def test_raising_p_never_shrinks(self):
        rng = np.random.default_rng(6)
        d = NeighborDistances(0, np.arange(10), rng.uniform(size=10))
        previous = set()
        for p in np.linspace(0.05, 1.0, 20):
            kept = set(select_neighbors(d, sample_count(p, 10)).selected.tolist())
            self.assertTrue(previous <= kept)
            previous = kept


class TestBatchPurification(unittest.TestCase):

    def test_purify_and_mean(self):
        # path 0 - 1 - 2 with a pendant 3 on node 1
        edges = np.array([[0, 1], [1, 2], [1, 3]])
        adjacency = sparse.csr_matrix((np.ones(6), (np.r_[edges[:, 0], edges[:, 1]], np.r_[edges[:, 1], edges[:, 0]])),
                                      shape=(4, 4))
        adjacency.sort_indices()
        universe = np.arange(4)
        scores = np.array([[0.9], [0.8], [0.1], [0.75]])
        (distances, chosen), = purify_neighborhoods(scores, universe, adjacency, np.array([1]), p=0.5)
        np.testing.assert_allclose(distances.distances, [0.1, 0.7, 0.05])
        self.assertEqual(chosen.selected.tolist(), [3, 0])

        h = Tensor(np.array([[1.0], [2.0], [3.0], [5.0]]))
        mean = sampled_mean_aggregate(h, universe, [chosen])
        self.assertAlmostEqual(mean.item(), (2.0 + 5.0 + 1.0) / 3)


if __name__ == '__main__':
    unittest.main(exit=False)

    rng = np.random.default_rng(0)
    mlp = Mlp([4, 64, 1], rng)
    center = rng.normal(size=4)
    neighbors = rng.normal(size=(6, 4))
    distances = NeighborDistances(0, np.arange(1, 7), np.array([pairwise_distance(mlp, center, h) for h in neighbors]))
    kept = select_neighbors(distances, sample_count(0.5, len(distances)))
    print(f'similarities: {[round(similarity(d), 4) for d in distances.distances]}')
    print(f'kept neighbors: {kept.selected.tolist()}')
