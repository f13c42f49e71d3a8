import logging
import unittest
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import sparse

from autodiff import Mlp, Tensor, gather_rows, glorot_uniform, mlp_forward, no_grad
from multi_relation_graph import MultiRelationGraph, SyntheticConfig, generate_synthetic
from noise_purifier import NeighborDistances, SampledNeighborhood, purify_neighborhoods, sampled_mean_aggregate
from reinforcer import SampledAdjacency, ThresholdController, plain_gcn_layer, weighted_self_loop_aggregate
from relation_aggregator import cross_relation_aggregate, fusion_weight
from sequence_head import SequenceHead

logger = logging.getLogger(__name__)

Cell = Tuple[int, int]


@dataclass
class ForwardPass:
    """
    Everything a training step needs from one forward pass over a batch, rows in batch order.
    """
    probabilities: Tensor
    top: Tensor
    purifier_inputs: List[List[Tensor]] = field(default_factory=list)
    cells: Dict[Cell, List[Tuple[NeighborDistances, SampledNeighborhood]]] = field(default_factory=dict)


def receptive_field(adjacencies: Sequence[sparse.csr_matrix], batch: np.ndarray, layers: int) -> List[np.ndarray]:
    """
    Node sets needed to embed a batch through several layers: S_L is the batch, S_{l-1} adds the neighbors of S_l
    under every relation.
    :param adjacencies: the adjacency of each relation
    :param batch: ids of the nodes to embed
    :param layers: L
    :return: sorted node sets S_0, ..., S_L
    """
    sets = [np.unique(batch)]
    for _ in range(layers):
        current = sets[0]
        expanded = current
        for adjacency in adjacencies:
            expanded = np.union1d(expanded, adjacency[current].indices)
        sets.insert(0, expanded)
    return sets


def positions(universe: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    return np.searchsorted(universe, nodes)


class GnnClModel:
    """
    Multi-relation GNN with a neighbor purifier and self-loop reinforcement per layer, a GNN-level classifier
    on the fused embedding and a convolution + recurrent head producing the final fraud probability.
    """

    kind = 'gnn-cl'

    def __init__(self, feature_dim: int, relation_count: int, rng: np.random.Generator = None, layers: int = 1,
                 hidden_dim: int = 64, purifier_hidden: int = 64, num_kernels: int = 4, kernel_half_width: int = 1,
                 recurrent_hidden: int = 16, sequence_steps: int = 4, cell: str = 'paper-rnn'):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.feature_dim = feature_dim
        self.relation_count = relation_count
        self.layers = layers
        self.hidden_dim = hidden_dim
        widths = [feature_dim] + [hidden_dim] * layers
        self.purifiers = [Mlp([widths[l], purifier_hidden, 1], rng) for l in range(layers)]
        self.relation_weights = [[Tensor(glorot_uniform(rng, widths[l], hidden_dim), requires_grad=True)
                                  for _ in range(relation_count)] for l in range(layers)]
        self.fusion_weights = [fusion_weight(rng, widths[l], relation_count, hidden_dim) for l in range(layers)]
        self.gnn_classifier = Mlp([hidden_dim, hidden_dim, 1], rng)
        self.head = SequenceHead(hidden_dim, rng, num_kernels, kernel_half_width, recurrent_hidden, sequence_steps, cell)

    def parameters(self) -> Dict[str, Tensor]:
        params = {}
        for l in range(self.layers):
            params.update(self.purifiers[l].parameters(f'layer{l}.purifier'))
            for r, weight in enumerate(self.relation_weights[l]):
                params[f'layer{l}.relation{r}.weight'] = weight
            params[f'layer{l}.fusion.weight'] = self.fusion_weights[l]
        params.update(self.gnn_classifier.parameters('gnn_classifier'))
        params.update(self.head.parameters('head'))
        return params

    def forward(self, graph: MultiRelationGraph, batch: np.ndarray, controller: ThresholdController) -> ForwardPass:
        """
        Embed a batch of nodes and predict their fraud probabilities.
        :param graph: the graph
        :param batch: node ids
        :param controller: supplies the sampling threshold and self-loop weight of every (layer, relation) cell
        :return: the forward pass; cells and purifier inputs cover the batch nodes only
        """
        if graph.relation_count != self.relation_count or graph.feature_dim != self.feature_dim:
            raise ValueError(f'model built for {self.relation_count} relations of {self.feature_dim} features, '
                             f'graph has {graph.relation_count} of {graph.feature_dim}')
        batch = np.asarray(batch, dtype=np.int64)
        adjacencies = [graph.adjacency(r) for r in range(self.relation_count)]
        sets = receptive_field(adjacencies, batch, self.layers)
        batch_set = set(batch.tolist())

        h = Tensor(graph.features[sets[0]])
        purifier_inputs, cells = [], {}
        for l in range(self.layers):
            universe, centers = sets[l], sets[l + 1]
            center_rows = positions(universe, centers)
            batch_rows = positions(centers, batch)
            with no_grad():
                scores = mlp_forward(self.purifiers[l], Tensor(h.data)).data

            per_relation, means = [], []
            for r in range(self.relation_count):
                measured = purify_neighborhoods(scores, universe, adjacencies[r], centers, controller.threshold(l, r))
                neighborhoods = [chosen for _, chosen in measured]
                sampled = SampledAdjacency.from_neighborhoods(universe, neighborhoods)
                aggregated = weighted_self_loop_aggregate(sampled.matrix, h, self.relation_weights[l][r],
                                                          controller.self_loop_weight(l, r))
                per_relation.append(gather_rows(aggregated, center_rows))
                means.append(gather_rows(sampled_mean_aggregate(h, universe, neighborhoods), batch_rows))
                cells[(l, r)] = [pair for pair in measured if pair[0].center in batch_set]
            purifier_inputs.append(means)
            h = cross_relation_aggregate(gather_rows(h, center_rows), per_relation, self.fusion_weights[l])

        top = gather_rows(h, positions(sets[-1], batch))
        return ForwardPass(self.head(top), top, purifier_inputs, cells)


class GcnModel:
    """
    Baseline: plain graph convolutions over the union of all relations, then an MLP classifier.
    """

    kind = 'gcn'

    def __init__(self, feature_dim: int, relation_count: int, rng: np.random.Generator = None, layers: int = 1,
                 hidden_dim: int = 64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.feature_dim = feature_dim
        self.relation_count = relation_count
        self.layers = layers
        self.hidden_dim = hidden_dim
        widths = [feature_dim] + [hidden_dim] * layers
        self.weights = [Tensor(glorot_uniform(rng, widths[l], hidden_dim), requires_grad=True) for l in range(layers)]
        self.classifier = Mlp([hidden_dim, hidden_dim, 1], rng)

    def parameters(self) -> Dict[str, Tensor]:
        params = {f'layer{l}.weight': weight for l, weight in enumerate(self.weights)}
        params.update(self.classifier.parameters('classifier'))
        return params

    def forward(self, graph: MultiRelationGraph, batch: np.ndarray, controller: ThresholdController = None) -> ForwardPass:
        if graph.feature_dim != self.feature_dim:
            raise ValueError(f'model built for {self.feature_dim} features, graph has {graph.feature_dim}')
        batch = np.asarray(batch, dtype=np.int64)
        merged = graph.merged_adjacency()
        sets = receptive_field([merged], batch, self.layers)
        h = Tensor(graph.features[sets[0]])
        for l in range(self.layers):
            universe, centers = sets[l], sets[l + 1]
            induced = merged[universe][:, universe]
            h = gather_rows(plain_gcn_layer(induced, h, self.weights[l]), positions(universe, centers))
        top = gather_rows(h, positions(sets[-1], batch))
        return ForwardPass(mlp_forward(self.classifier, top), top)


class TestReceptiveField(unittest.TestCase):

    def test_two_hops(self):
        # path 0-1-2-3-4 in one relation, edge 4-5 in another
        path = np.array([[0, 1], [1, 2], [2, 3], [3, 4]])
        first = sparse.csr_matrix((np.ones(8), (np.r_[path[:, 0], path[:, 1]], np.r_[path[:, 1], path[:, 0]])),
                                  shape=(6, 6))
        second = sparse.csr_matrix(([1.0, 1.0], ([4, 5], [5, 4])), shape=(6, 6))
        sets = receptive_field([first, second], np.array([3]), layers=2)
        self.assertEqual([s.tolist() for s in sets], [[1, 2, 3, 4, 5], [2, 3, 4], [3]])


class TestGnnClModel(unittest.TestCase):

    def setUp(self) -> None:
        self.graph = generate_synthetic(SyntheticConfig(num_nodes=60, feature_dim=8, fraud_ratio=0.2,
                                                        intra_edge_probability=0.1, seed=3))

    def build(self, layers=1):
        return GnnClModel(8, 3, np.random.default_rng(0), layers=layers, hidden_dim=8, purifier_hidden=4,
                          recurrent_hidden=3)

    def test_forward_shapes(self):
        for layers in (1, 2):
            model = self.build(layers)
            controller = ThresholdController(layers, 3)
            batch = np.array([7, 2, 40, 11])
            out = model.forward(self.graph, batch, controller)
            self.assertEqual(out.probabilities.shape, (4, 1))
            self.assertEqual(out.top.shape, (4, 8))
            self.assertEqual(len(out.purifier_inputs), layers)
            self.assertEqual(out.purifier_inputs[0][0].shape, (4, 8))
            self.assertEqual(set(out.cells), {(l, r) for l in range(layers) for r in range(3)})
            for measured in out.cells.values():
                self.assertEqual(sorted(m.center for m, _ in measured), sorted(batch.tolist()))

    def test_batch_order_preserved(self):
        model, controller = self.build(), ThresholdController(1, 3)
        batch = np.array([5, 30, 12])
        forward = model.forward(self.graph, batch, controller).probabilities.data
        backward = model.forward(self.graph, batch[::-1], controller).probabilities.data
        np.testing.assert_allclose(backward, forward[::-1], rtol=0, atol=1e-12)

    def test_threshold_controls_sample_size(self):
        model = self.build()
        low, high = ThresholdController(1, 3, init_threshold=0.1), ThresholdController(1, 3, init_threshold=1.0)
        batch = np.arange(20)
        kept_low = model.forward(self.graph, batch, low).cells
        kept_high = model.forward(self.graph, batch, high).cells
        for cell in kept_low:
            for (measured, small), (_, full) in zip(kept_low[cell], kept_high[cell]):
                self.assertEqual(len(full.selected), len(measured))
                self.assertLessEqual(len(small.selected), len(full.selected))

    def test_parameter_names_unique(self):
        model = self.build(layers=2)
        params = model.parameters()
        self.assertEqual(len(params), len({id(p) for p in params.values()}))

    def test_wrong_graph(self):
        with self.assertRaises(ValueError):
            GnnClModel(8, 2, hidden_dim=8).forward(self.graph, np.array([0]), ThresholdController(1, 2))


class TestGcnModel(unittest.TestCase):

    def test_forward(self):
        graph = generate_synthetic(SyntheticConfig(num_nodes=40, feature_dim=6, fraud_ratio=0.25, seed=1))
        model = GcnModel(6, 3, np.random.default_rng(0), layers=2, hidden_dim=5)
        out = model.forward(graph, np.array([3, 1, 2]))
        self.assertEqual(out.probabilities.shape, (3, 1))
        self.assertTrue(np.all((out.probabilities.data > 0) & (out.probabilities.data < 1)))
        self.assertEqual(out.cells, {})


if __name__ == '__main__':
    unittest.main(exit=False)

    graph = generate_synthetic(SyntheticConfig(num_nodes=200, feature_dim=16))
    model = GnnClModel(16, 3, hidden_dim=16)
    out = model.forward(graph, np.arange(5), ThresholdController(1, 3))
    print(f'labels:        {graph.labels[:5].tolist()}')
    print(f'probabilities: {np.round(out.probabilities.data.reshape(-1), 4).tolist()}')
