import logging
import unittest
from typing import Sequence

import numpy as np

from autodiff import Mlp, Tensor, binary_cross_entropy, concat, glorot_uniform, gradient_check, matmul, mlp_forward, relu

logger = logging.getLogger(__name__)


def fusion_weight(rng: np.random.Generator, previous_dim: int, relation_count: int, dim: int) -> Tensor:
    """
    A trainable fusion weight mapping concat(h^{(l-1)}, h_1, ..., h_R) to width dim
    """
    return Tensor(glorot_uniform(rng, previous_dim + relation_count * dim, dim), requires_grad=True)


def cross_relation_aggregate(previous: Tensor, per_relation: Sequence[Tensor], weight: Tensor) -> Tensor:
    """
    Fuse the relation-specific embeddings with the previous layer's embedding, ReLU(concat(h_prev, h_1..h_R) W).
    No bias.
    :param previous: batch x d_prev embeddings of the previous layer
    :param per_relation: one batch x d tensor per relation, same row order as previous
    :param weight: (d_prev + R * d) x d fusion weight
    :return: batch x d fused embeddings
    :raises ValueError: if there is no relation or the widths do not add up to the weight's rows
    """
    if not per_relation:
        raise ValueError('cross-relation aggregation needs at least one relation')
    width = previous.shape[1] + sum(h.shape[1] for h in per_relation)
    if width != weight.shape[0]:
        raise ValueError(f'{len(per_relation)} relations give concatenated width {width}, '
                         f'fusion weight expects {weight.shape[0]}')
    return relu(matmul(concat([previous, *per_relation], axis=1), weight))


def gnn_loss(head_mlp: Mlp, h_top: Tensor, labels: Sequence[int]) -> Tensor:
    """
    Cross-entropy of the GNN-level classifier on the top-layer fused embedding
    :param head_mlp: classifier applied to h^{(L)}
    :param h_top: batch x d
    :param labels: 0/1 labels of the batch
    :return: scalar mean loss
    """
    return binary_cross_entropy(mlp_forward(head_mlp, h_top), labels)


class TestCrossRelationAggregate(unittest.TestCase):

    def test_zero_inputs(self):
        rng = np.random.default_rng(0)
        out = cross_relation_aggregate(Tensor(np.zeros((3, 2))), [Tensor(np.zeros((3, 2)))] * 2,
                                       Tensor(rng.normal(size=(6, 2))))
        np.testing.assert_array_equal(out.data, np.zeros((3, 2)))

    def test_single_relation(self):
        out = cross_relation_aggregate(Tensor([[2.0]]), [Tensor([[3.0]])], Tensor([[1.0], [1.0]]))
        np.testing.assert_allclose(out.data, [[5.0]])

    def test_width_independent_of_relations(self):
        rng = np.random.default_rng(1)
        for relations in range(1, 5):
            weight = fusion_weight(rng, 5, relations, 4)
            out = cross_relation_aggregate(Tensor(rng.normal(size=(7, 5))),
                                           [Tensor(rng.normal(size=(7, 4))) for _ in range(relations)], weight)
            self.assertEqual(out.shape, (7, 4))

    def test_relation_count_mismatch(self):
        with self.assertRaises(ValueError):
            cross_relation_aggregate(Tensor(np.ones((1, 1))), [Tensor(np.ones((1, 1)))] * 2, Tensor(np.ones((2, 1))))
        with self.assertRaises(ValueError):
            cross_relation_aggregate(Tensor(np.ones((1, 1))), [], Tensor(np.ones((1, 1))))

    def test_row_permutation(self):
        rng = np.random.default_rng(2)
        previous, h = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
        weight = Tensor(rng.normal(size=(5, 2)))
        order = rng.permutation(6)
        out = cross_relation_aggregate(Tensor(previous), [Tensor(h)], weight).data
        permuted = cross_relation_aggregate(Tensor(previous[order]), [Tensor(h[order])], weight).data
        np.testing.assert_allclose(permuted, out[order])

    def test_gradient(self):
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(100):
            relations = int(rng.integers(1, 4))
            previous = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
            per_relation = [Tensor(rng.normal(size=(4, 2)), requires_grad=True) for _ in range(relations)]
            weight = fusion_weight(rng, 3, relations, 2)
            head = Mlp([2, 3, 1], rng)
            labels = rng.integers(0, 2, 4)
            worst = max(worst, gradient_check(
                lambda: gnn_loss(head, cross_relation_aggregate(previous, per_relation, weight), labels),
                [previous, weight, *per_relation]))
        self.assertLess(worst, 1e-4)


class TestGnnLoss(unittest.TestCase):

    def identity_head(self):
        head = Mlp([1, 1])
        head.weights[0].data = np.array([[1.0]])
        return head

    def test_uninformative(self):
        self.assertAlmostEqual(gnn_loss(self.identity_head(), Tensor(np.zeros((5, 1))), [0, 1, 1, 0, 1]).item(),
                               np.log(2))

    def test_perfect(self):
        loss = gnn_loss(self.identity_head(), Tensor([[50.0], [-50.0], [50.0]]), [1, 0, 1])
        self.assertLessEqual(loss.item(), 1e-6)

    def test_hand_arithmetic(self):
        logits = np.log(np.array([[0.9], [0.2]]) / (1 - np.array([[0.9], [0.2]])))
        loss = gnn_loss(self.identity_head(), Tensor(logits), [1, 0])
        self.assertAlmostEqual(loss.item(), 0.16425, places=5)

    def test_empty_batch(self):
        with self.assertRaises(ValueError):
            gnn_loss(self.identity_head(), Tensor(np.zeros((0, 1))), [])


if __name__ == '__main__':
    unittest.main(exit=False)

    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(3, 4)))
    relations = [Tensor(rng.normal(size=(3, 8))) for _ in range(3)]
    fused = cross_relation_aggregate(x, relations, fusion_weight(rng, 4, 3, 8))
    print(f'fused embeddings:\n{np.round(fused.data, 3)}')
    print(f'gnn loss: {gnn_loss(Mlp([8, 16, 1], rng), fused, [0, 1, 0]).item():.4f}')
