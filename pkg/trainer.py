import json
import logging
import os
import tempfile
import time
import unittest
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from autodiff import AdamState, Tape, Tensor, adam_step, binary_cross_entropy, no_grad
from metrics import MetricsReport, compute_metrics
from models import GcnModel, GnnClModel
from multi_relation_graph import (DataSplit, MultiRelationGraph, SyntheticConfig, generate_synthetic, split_stratified,
                                  standardize_features)
from noise_purifier import purifier_loss
from reinforcer import P_MIN, ThresholdController, average_fraud_distance
from relation_aggregator import gnn_loss
from sequence_head import SequenceLayout

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MODEL_KINDS = ('gnn-cl', 'gcn')

Model = Union[GnnClModel, GcnModel]


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """
    Hyper-parameters of one training run.
    """
    epochs: int = 50
    layers: int = 1
    loss_weight: float = 2.0
    tau: float = 0.02
    learning_rate: float = 0.01
    batch_size: int = 1024
    init_threshold: float = 0.5
    hidden_dim: int = 64
    train_ratio: float = 0.4
    seed: int = 0
    model: str = 'gnn-cl'
    no_reinforcer: bool = False
    fixed_weight: Optional[float] = None
    purifier_hidden: int = 64
    num_kernels: int = 4
    kernel_half_width: int = 1
    recurrent_hidden: int = 16
    sequence_steps: int = 4
    cell: str = 'paper-rnn'
    standardize_features: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.layers < 1 or self.batch_size < 1:
            raise ValueError(f'epochs, layers and batch size must be positive, '
                             f'got {self.epochs}, {self.layers}, {self.batch_size}')
        if self.loss_weight < 0:
            raise ValueError(f'loss weight must be non-negative, got {self.loss_weight}')
        if not 0 < self.train_ratio < 1:
            raise ValueError(f'train ratio {self.train_ratio} outside (0, 1)')
        if not P_MIN <= self.init_threshold <= 1:
            raise ValueError(f'initial threshold {self.init_threshold} outside [{P_MIN}, 1]')
        if self.tau <= 0 or self.learning_rate <= 0:
            raise ValueError('tau and learning rate must be positive')
        if self.model not in MODEL_KINDS:
            raise ValueError(f'unknown model {self.model!r}, expected one of {MODEL_KINDS}')
        if self.fixed_weight is not None and not 0 <= self.fixed_weight <= 1:
            raise ValueError(f'fixed weight {self.fixed_weight} outside [0, 1]')
        if min(self.hidden_dim, self.purifier_hidden, self.num_kernels, self.recurrent_hidden,
               self.sequence_steps) < 1 or self.kernel_half_width < 0:
            raise ValueError('network widths must be positive')
        if self.model == 'gnn-cl':
            window = 2 * self.kernel_half_width + 1
            if self.hidden_dim < window:
                raise ValueError(f'hidden dim {self.hidden_dim} is shorter than the kernel window {window}')
            SequenceLayout.for_features(self.hidden_dim, self.num_kernels, window, self.sequence_steps)

    def as_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict) -> 'TrainConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f'unknown configuration keys {sorted(unknown)}')
        return cls(**values)


@dataclass
class EpochLog:
    epoch: int
    loss_total: float
    loss_head: float
    loss_gnn: float
    loss_purifier: float
    thresholds: np.ndarray
    distances: np.ndarray
    seconds: float

    def as_row(self) -> Dict:
        row = {'epoch': self.epoch, 'loss_total': self.loss_total, 'loss_head': self.loss_head,
               'loss_gnn': self.loss_gnn, 'loss_purifier': self.loss_purifier}
        for (l, r), p in np.ndenumerate(self.thresholds):
            row[f'p_{l}_{r}'] = p
        for (l, r), d in np.ndenumerate(self.distances):
            row[f'dbar_{l}_{r}'] = d
        row['seconds'] = self.seconds
        return row


@dataclass
class TrainingResult:
    model: Model
    controller: ThresholdController
    split: DataSplit
    logs: List[EpochLog] = field(default_factory=list)


def epoch_frame(logs: Sequence[EpochLog]) -> pd.DataFrame:
    return pd.DataFrame([log.as_row() for log in logs])


def total_loss(head_loss, gnn_loss_value, purifier_losses, loss_weight: float):
    """
    L_head + L_gnn + lambda * sum of the per-layer purifier losses
    :param head_loss: loss of the sequence head
    :param gnn_loss_value: loss of the GNN-level classifier
    :param purifier_losses: one loss per layer
    :param loss_weight: lambda
    :return: the combined loss, a Tensor when any component is one
    """
    return head_loss + gnn_loss_value + loss_weight * sum(purifier_losses)


def prepare_graph(graph: MultiRelationGraph, config: TrainConfig) -> MultiRelationGraph:
    return standardize_features(graph) if config.standardize_features else graph


def build_model(config: TrainConfig, feature_dim: int, relation_count: int) -> Model:
    rng = np.random.default_rng(config.seed)
    if config.model == 'gcn':
        return GcnModel(feature_dim, relation_count, rng, config.layers, config.hidden_dim)
    return GnnClModel(feature_dim, relation_count, rng, config.layers, config.hidden_dim, config.purifier_hidden,
                      config.num_kernels, config.kernel_half_width, config.recurrent_hidden, config.sequence_steps,
                      config.cell)


def build_controller(config: TrainConfig, relation_count: int) -> ThresholdController:
    return ThresholdController(config.layers, relation_count, epochs=config.epochs,
                               init_threshold=config.init_threshold, tau=config.tau, fixed_weight=config.fixed_weight)


def train_epoch(model: Model, graph: MultiRelationGraph, split: DataSplit, controller: ThresholdController,
                config: TrainConfig, optimizer: AdamState, epoch: int) -> EpochLog:
    """
    One pass over the shuffled training nodes in mini-batches, followed by one controller step per open cell.
    :param model: the model being trained
    :param graph: the graph
    :param split: train/test nodes
    :param controller: the threshold controller, updated after the last batch
    :param config: the run configuration
    :param optimizer: Adam state over model.parameters()
    :param epoch: 1-based epoch index, seeds the shuffle together with config.seed
    :return: the epoch's log entry
    """
    started = time.perf_counter()
    order = np.random.default_rng([config.seed, epoch]).permutation(split.train)
    params = model.parameters()
    sums = np.zeros(4)
    batches = 0
    collected = {}
    for start in range(0, len(order), config.batch_size):
        batch = order[start:start + config.batch_size]
        labels = graph.labels[batch]
        with Tape() as tape:
            forward = model.forward(graph, batch, controller)
            head = binary_cross_entropy(forward.probabilities, labels)
            if isinstance(model, GnnClModel):
                auxiliary = gnn_loss(model.gnn_classifier, forward.top, labels)
                purifier = [purifier_loss(model.purifiers[l], inputs, labels)
                            for l, inputs in enumerate(forward.purifier_inputs)]
            else:
                auxiliary, purifier = Tensor(0.0), []
            loss = total_loss(head, auxiliary, purifier, config.loss_weight)
        tape.backward(loss)
        adam_step(optimizer, params)
        sums += [loss.item(), head.item(), auxiliary.item(), sum(p.item() for p in purifier)]
        batches += 1
        for cell, measured in forward.cells.items():
            collected.setdefault(cell, []).extend(measured)
        logger.debug(f'epoch {epoch} batch {batches}: loss {loss.item():.5f}')

    controller.advance_epoch()
    distances = np.full(controller.shape, np.nan)
    for (l, r), measured in collected.items():
        distances[l, r] = average_fraud_distance(measured, split.fraud_train, len(split.train))
        if config.no_reinforcer or controller.terminated[l, r]:
            continue
        if len(split.fraud_train) == 0:
            controller.freeze(l, r)
            continue
        controller.rl_update(l, r, distances[l, r])
        controller.rl_terminated(l, r)

    means = sums / max(batches, 1)
    return EpochLog(epoch, *means.tolist(), controller.p.copy(), distances, time.perf_counter() - started)


def fit(graph: MultiRelationGraph, config: TrainConfig,
        on_epoch: Callable[[EpochLog], None] = None) -> TrainingResult:
    """
    Train a model from scratch on a graph.
    :param graph: the graph, already prepared (see prepare_graph)
    :param config: the run configuration
    :param on_epoch: called with each epoch's log as soon as it completes
    :return: the trained model, its controller, the split and the epoch logs
    """
    split = split_stratified(graph, config.train_ratio, config.seed)
    model = build_model(config, graph.feature_dim, graph.relation_count)
    controller = build_controller(config, graph.relation_count)
    optimizer = AdamState(model.parameters(), learning_rate=config.learning_rate)
    result = TrainingResult(model, controller, split)
    logger.info(f'training {config.model} on {len(split.train)} nodes ({len(split.fraud_train)} fraud) '
                f'for {config.epochs} epochs')
    for epoch in range(1, config.epochs + 1):
        log = train_epoch(model, graph, split, controller, config, optimizer, epoch)
        result.logs.append(log)
        logger.info(f'epoch {epoch}: loss {log.loss_total:.5f} (head {log.loss_head:.5f}, gnn {log.loss_gnn:.5f}, '
                    f'purifier {log.loss_purifier:.5f}), p {np.round(log.thresholds, 3).tolist()}')
        if on_epoch is not None:
            on_epoch(log)
    return result


def predict(model: Model, graph: MultiRelationGraph, nodes: np.ndarray, controller: ThresholdController,
            batch_size: int = 1024) -> np.ndarray:
    """
    Fraud probabilities of the given nodes with the thresholds frozen at their current values
    """
    scores = []
    with no_grad():
        for start in range(0, len(nodes), batch_size):
            batch = nodes[start:start + batch_size]
            scores.append(model.forward(graph, batch, controller).probabilities.data.reshape(-1))
    return np.concatenate(scores) if scores else np.zeros(0)


def evaluate(model: Model, graph: MultiRelationGraph, split: DataSplit, controller: ThresholdController,
             batch_size: int = 1024, nodes: np.ndarray = None) -> MetricsReport:
    """
    Metrics of the model on the test nodes (or the given nodes). The controller is not modified.
    :raises UndefinedAucError: if the evaluated nodes hold a single class
    """
    nodes = split.test if nodes is None else nodes
    return compute_metrics(predict(model, graph, nodes, controller, batch_size), graph.labels[nodes])


def checkpoint_save(model: Model, controller: ThresholdController, path: Union[str, os.PathLike],
                    config: TrainConfig, extra: Dict = None) -> Path:
    """
    Write parameters, controller state and configuration to a numpy archive
    :param model: the model
    :param controller: its controller
    :param path: target file, conventionally ending in .npz
    :param config: the configuration the model was built from
    :param extra: additional metadata, e.g. the dataset fingerprint
    :return: the written path
    """
    path = Path(path)
    meta = {
        'version': CHECKPOINT_VERSION,
        'config': config.as_dict(),
        'feature_dim': model.feature_dim,
        'relation_count': model.relation_count,
        'controller': controller.state_dict(),
    }
    meta.update(extra or {})
    arrays = {f'param/{name}': tensor.data for name, tensor in model.parameters().items()}
    with open(path, 'wb') as file:
        np.savez(file, meta=np.array(json.dumps(meta)), **arrays)
    logger.info(f'checkpoint written to {path}')
    return path


def _read_checkpoint(path: Union[str, os.PathLike]) -> Tuple[Dict, Dict[str, np.ndarray]]:
    try:
        with np.load(path, allow_pickle=False) as archive:
            meta = json.loads(str(archive['meta']))
            arrays = {name[len('param/'):]: archive[name] for name in archive.files if name.startswith('param/')}
    except (OSError, ValueError, KeyError, zipfile.BadZipFile) as error:
        raise CheckpointError(f'{path}: unreadable checkpoint ({error})') from error
    if meta.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(f'{path}: checkpoint version {meta.get("version")}, expected {CHECKPOINT_VERSION}')
    return meta, arrays


def checkpoint_load(model: Model, controller: ThresholdController, path: Union[str, os.PathLike]) -> Dict:
    """
    Restore parameters and controller state in place. Every name and shape is checked before anything is assigned.
    :param model: a model built with the checkpoint's configuration
    :param controller: the controller to restore
    :param path: the checkpoint file
    :return: the checkpoint metadata
    :raises CheckpointError: if the file is unreadable, of another version, or does not match the model
    """
    meta, arrays = _read_checkpoint(path)
    params = model.parameters()
    if set(arrays) != set(params):
        missing, unexpected = sorted(set(params) - set(arrays)), sorted(set(arrays) - set(params))
        raise CheckpointError(f'{path}: parameter names differ (missing {missing}, unexpected {unexpected})')
    for name, tensor in params.items():
        if arrays[name].shape != tensor.shape:
            raise CheckpointError(f'{path}: parameter {name} has shape {arrays[name].shape}, model expects {tensor.shape}')
    state = meta['controller']
    if np.shape(state['p']) != controller.shape:
        raise CheckpointError(f'{path}: controller of shape {np.shape(state["p"])}, model expects {controller.shape}')

    for name, tensor in params.items():
        tensor.data = np.array(arrays[name], dtype=np.float64)
        tensor.zero_grad()
    controller.load_state(state)
    return meta


def load_checkpoint(path: Union[str, os.PathLike]) -> Tuple[Model, ThresholdController, TrainConfig, Dict]:
    """
    Rebuild the model and controller a checkpoint was written from
    :return: model, controller, configuration, metadata
    """
    meta, _ = _read_checkpoint(path)
    try:
        config = TrainConfig.from_dict(meta['config'])
    except (KeyError, TypeError, ValueError) as error:
        raise CheckpointError(f'{path}: invalid configuration ({error})') from error
    model = build_model(config, meta['feature_dim'], meta['relation_count'])
    controller = build_controller(config, meta['relation_count'])
    return model, controller, config, checkpoint_load(model, controller, path)


def small_config(**overrides) -> TrainConfig:
    values = dict(epochs=5, hidden_dim=8, purifier_hidden=8, recurrent_hidden=4, batch_size=32, train_ratio=0.6, seed=1)
    values.update(overrides)
    return TrainConfig(**values)


def small_graph(seed: int = 0) -> MultiRelationGraph:
    return generate_synthetic(SyntheticConfig(num_nodes=200, feature_dim=8, fraud_ratio=0.2, mean_separation=4.0,
                                              intra_edge_probability=0.05, seed=seed))


class TestTotalLoss(unittest.TestCase):

    def test_composition(self):
        self.assertAlmostEqual(total_loss(0.3, 0.2, [0.1], 2.0), 0.7)
        self.assertAlmostEqual(total_loss(0.3, 0.2, [0.1, 0.4], 0.0), 0.5)
        self.assertEqual(total_loss(0.0, 0.0, [0.0], 2.0), 0.0)

    def test_tensors(self):
        loss = total_loss(Tensor(0.3), Tensor(0.2), [Tensor(0.05), Tensor(0.05)], 2.0)
        self.assertAlmostEqual(loss.item(), 0.7)


class TestTrainConfig(unittest.TestCase):

    def test_defaults(self):
        config = TrainConfig()
        self.assertEqual((config.epochs, config.layers, config.loss_weight, config.tau, config.learning_rate,
                          config.batch_size, config.init_threshold, config.hidden_dim, config.train_ratio),
                         (50, 1, 2.0, 0.02, 0.01, 1024, 0.5, 64, 0.4))

    def test_invalid(self):
        for overrides in ({'epochs': 0}, {'loss_weight': -1}, {'train_ratio': 1.0}, {'model': 'gat'},
                          {'batch_size': 0}, {'fixed_weight': 2.0}):
            with self.assertRaises(ValueError):
                TrainConfig(**overrides)

    def test_rejected_before_model_is_built(self):
        with self.assertRaisesRegex(ValueError, 'initial threshold'):
            TrainConfig(init_threshold=0.01)
        with self.assertRaisesRegex(ValueError, 'cannot be cut'):
            TrainConfig(num_kernels=3, hidden_dim=8)
        with self.assertRaisesRegex(ValueError, 'kernel window'):
            TrainConfig(hidden_dim=2)
        self.assertEqual(TrainConfig(model='gcn', num_kernels=3, hidden_dim=8).model, 'gcn')
        TrainConfig(init_threshold=P_MIN)

    def test_dict_round_trip(self):
        config = TrainConfig(seed=4, fixed_weight=0.3)
        self.assertEqual(TrainConfig.from_dict(config.as_dict()), config)
        with self.assertRaises(ValueError):
            TrainConfig.from_dict({'epochs': 3, 'colour': 'red'})


class TestTraining(unittest.TestCase):

    def test_loss_decreases(self):
        logs = fit(small_graph(), small_config()).logs
        self.assertEqual([log.epoch for log in logs], [1, 2, 3, 4, 5])
        self.assertLess(logs[-1].loss_total, logs[0].loss_total)
        for log in logs:
            self.assertGreaterEqual(log.loss_total, 0)

    def test_deterministic(self):
        graph, config = small_graph(), small_config(epochs=3)
        first = epoch_frame(fit(graph, config).logs).drop(columns='seconds')
        second = epoch_frame(fit(graph, config).logs).drop(columns='seconds')
        pd.testing.assert_frame_equal(first, second, check_exact=False, rtol=0, atol=1e-12)

    def test_controller_acts_each_epoch(self):
        result = fit(small_graph(), small_config(epochs=4))
        self.assertEqual(result.controller.epoch, 4)
        for row in result.controller.history:
            for actions in row:
                self.assertEqual(len(actions), 3)
        self.assertTrue(np.all(np.isfinite(result.logs[-1].distances)))

    def test_no_reinforcer_freezes_thresholds(self):
        graph = small_graph()
        frozen = fit(graph, small_config(epochs=3, no_reinforcer=True))
        for log in frozen.logs:
            np.testing.assert_array_equal(log.thresholds, np.full((1, 3), 0.5))
        full = fit(graph, small_config(epochs=3))
        self.assertEqual(frozen.logs[0].loss_total, full.logs[0].loss_total)

    def test_fixed_weight(self):
        result = fit(small_graph(), small_config(epochs=2, fixed_weight=0.3))
        self.assertEqual(result.controller.self_loop_weight(0, 0), 0.3)

    def test_gcn_baseline(self):
        result = fit(small_graph(), small_config(model='gcn', epochs=3))
        self.assertIsInstance(result.model, GcnModel)
        self.assertEqual([log.loss_gnn for log in result.logs], [0.0] * 3)
        np.testing.assert_array_equal(result.controller.p, np.full((1, 3), 0.5))

    def test_two_layers(self):
        result = fit(small_graph(), small_config(epochs=2, layers=2))
        self.assertEqual(result.logs[-1].thresholds.shape, (2, 3))


class TestEvaluate(unittest.TestCase):

    def test_untrained_auc_band(self):
        aucs = []
        for seed in range(10):
            rng = np.random.default_rng(seed)
            labels = np.repeat([0, 1], 50)
            edges = [('a', rng.integers(0, 100, (300, 2))), ('b', rng.integers(0, 100, (300, 2)))]
            graph = MultiRelationGraph(rng.normal(size=(100, 8)), labels, edges)
            config = small_config(seed=seed)
            split = split_stratified(graph, config.train_ratio, seed)
            model = build_model(config, 8, 2)
            aucs.append(evaluate(model, graph, split, build_controller(config, 2)).auc)
        self.assertTrue(0.35 <= np.mean(aucs) <= 0.65)

    def test_matches_recount_and_keeps_controller(self):
        graph, config = small_graph(), small_config(epochs=2)
        result = fit(graph, config)
        state = json.dumps(result.controller.state_dict())
        report = evaluate(result.model, graph, result.split, result.controller, batch_size=17)
        self.assertEqual(json.dumps(result.controller.state_dict()), state)
        scores = predict(result.model, graph, result.split.test, result.controller)
        labels = graph.labels[result.split.test]
        self.assertEqual(report.tp, int(np.sum((scores >= 0.5) & (labels == 1))))
        self.assertEqual(report.tn, int(np.sum((scores < 0.5) & (labels == 0))))
        self.assertEqual(report.tp + report.tn + report.fp + report.fn, len(result.split.test))

    @unittest.skipUnless(os.environ.get('GNN_CL_SLOW_TESTS') == '1', 'set GNN_CL_SLOW_TESTS=1 to run')
    def test_gnn_cl_beats_gcn_on_camouflage_graph(self):
        aucs = {'gnn-cl': [], 'gcn': []}
        for seed in range(1, 6):
            graph = generate_synthetic(SyntheticConfig(num_nodes=1000, relation_count=3, fraud_ratio=0.1,
                                                       camouflage_rate=0.5, seed=seed))
            for kind in aucs:
                config = TrainConfig(model=kind, seed=seed)
                result = fit(graph, config)
                aucs[kind].append(evaluate(result.model, graph, result.split, result.controller).auc)
        logger.info('mean test AUC: ' + ', '.join(f'{kind} {np.mean(values):.4f}' for kind, values in aucs.items()))
        self.assertGreaterEqual(np.mean(aucs['gnn-cl']) - np.mean(aucs['gcn']), 0.03)


class TestCheckpoint(unittest.TestCase):

    def setUp(self) -> None:
        self.directory = tempfile.TemporaryDirectory()
        self.path = Path(self.directory.name) / 'checkpoint.npz'
        self.graph = small_graph()

    def tearDown(self) -> None:
        self.directory.cleanup()

    def test_round_trip(self):
        config = small_config(epochs=2)
        result = fit(self.graph, config)
        checkpoint_save(result.model, result.controller, self.path, config, {'fingerprint': 'abc'})
        model, controller, restored_config, meta = load_checkpoint(self.path)
        self.assertEqual(restored_config, config)
        self.assertEqual(meta['fingerprint'], 'abc')
        nodes = np.arange(0, 200, 7)
        np.testing.assert_allclose(predict(model, self.graph, nodes, controller),
                                   predict(result.model, self.graph, nodes, result.controller), rtol=0, atol=1e-12)
        np.testing.assert_array_equal(controller.terminated, result.controller.terminated)
        np.testing.assert_array_equal(controller.p, result.controller.p)
        self.assertEqual(controller.state_dict(), result.controller.state_dict())

    def test_mismatched_model(self):
        config = small_config(epochs=1)
        result = fit(self.graph, config)
        checkpoint_save(result.model, result.controller, self.path, config)
        other = build_model(small_config(hidden_dim=12), 8, 3)
        before = {name: tensor.data.copy() for name, tensor in other.parameters().items()}
        with self.assertRaises(CheckpointError):
            checkpoint_load(other, build_controller(config, 3), self.path)
        for name, tensor in other.parameters().items():
            np.testing.assert_array_equal(tensor.data, before[name])

    def test_corrupt_file(self):
        self.path.write_bytes(b'not a checkpoint')
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)


if __name__ == '__main__':
    unittest.main(exit=False)

    logging.basicConfig(level=logging.INFO)
    graph = small_graph()
    config = small_config(epochs=10)
    result = fit(graph, config)
    print(evaluate(result.model, graph, result.split, result.controller).summary())
