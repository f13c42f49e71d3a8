from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import tempfile
import unittest
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import StandardScaler

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]


class GraphFormatError(ValueError):
    pass


class MultiRelationGraph:
    """
    An attributed graph with binary node labels and several named undirected edge sets.
    """

    def __init__(self, features: np.ndarray, labels: np.ndarray, relations: Sequence[Tuple[str, np.ndarray]]):
        """
        Initialize a multi-relation graph. Edges are canonicalized to (u, v) with u < v, sorted and de-duplicated;
        self-loops are dropped.
        :param features: N x d feature matrix
        :param labels: N binary labels, 1 for fraud
        :param relations: ordered list of (name, E x 2 array of endpoints)
        :raises ValueError: if an endpoint is out of range or a label is not 0/1
        """
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.num_nodes = self.features.shape[0]
        if self.labels.shape != (self.num_nodes,):
            raise ValueError(f'expected {self.num_nodes} labels, got shape {self.labels.shape}')
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError('labels must be 0 or 1')
        self.relation_names = [name for name, _ in relations]
        if len(set(self.relation_names)) != len(self.relation_names):
            raise ValueError(f'duplicate relation names in {self.relation_names}')
        self.edges = [self.canonical_edges(edges, self.num_nodes) for _, edges in relations]
        self.__adjacency = [None] * len(self.edges)
        self.__merged = None

    @staticmethod
    def canonical_edges(edges: np.ndarray, num_nodes: int) -> np.ndarray:
        """
        Sort each edge as (u, v) with u < v, drop self-loops and duplicates
        :param edges: E x 2 array of endpoints
        :param num_nodes: number of nodes N
        :return: sorted unique E' x 2 int array
        """
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
            raise ValueError(f'edge endpoint outside [0, {num_nodes})')
        edges = np.sort(edges, axis=1)
        loops = edges[:, 0] == edges[:, 1]
        if loops.any():
            logger.warning(f'dropping {int(loops.sum())} self-loops')
            edges = edges[~loops]
        return np.unique(edges, axis=0) if edges.size else np.empty((0, 2), dtype=np.int64)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def relation_count(self) -> int:
        return len(self.edges)

    def adjacency(self, relation: int) -> sparse.csr_matrix:
        """
        Symmetric 0/1 adjacency matrix of one relation, with sorted neighbor indices in each row
        :param relation: index of the relation
        :return: N x N CSR matrix
        """
        if self.__adjacency[relation] is None:
            self.__adjacency[relation] = self.__symmetric(self.edges[relation])
        return self.__adjacency[relation]

    def merged_edges(self) -> np.ndarray:
        """
        The union of all relations as one homogeneous edge set
        :return: sorted unique E x 2 array
        """
        return self.canonical_edges(np.vstack(self.edges + [np.empty((0, 2), dtype=np.int64)]), self.num_nodes)

    def merged_adjacency(self) -> sparse.csr_matrix:
        if self.__merged is None:
            self.__merged = self.__symmetric(self.merged_edges())
        return self.__merged

    def neighbors(self, relation: int, node: int) -> np.ndarray:
        adjacency = self.adjacency(relation)
        return adjacency.indices[adjacency.indptr[node]:adjacency.indptr[node + 1]]

    def __symmetric(self, edges: np.ndarray) -> sparse.csr_matrix:
        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        matrix = sparse.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(self.num_nodes, self.num_nodes))
        matrix.sort_indices()
        return matrix

    def __eq__(self, other) -> bool:
        return isinstance(other, MultiRelationGraph) \
               and self.relation_names == other.relation_names \
               and np.array_equal(self.features, other.features) \
               and np.array_equal(self.labels, other.labels) \
               and all(np.array_equal(a, b) for a, b in zip(self.edges, other.edges))

    def __repr__(self):
        edges = ', '.join(f'{name}: {len(e)}' for name, e in zip(self.relation_names, self.edges))
        return f'MultiRelationGraph(nodes={self.num_nodes}, features={self.feature_dim}, edges=[{edges}])'


def _parse_number(value: str, kind, path: Path, line: int):
    try:
        return kind(value)
    except ValueError:
        raise GraphFormatError(f'{path}:{line}: non-numeric field {value!r}')


def _read_rows(path: Path) -> List[Tuple[int, List[str]]]:
    if not path.is_file():
        raise GraphFormatError(f'{path}: missing file')
    with open(path, newline='', encoding='utf-8') as f:
        rows = [(reader_line, row) for reader_line, row in enumerate(csv.reader(f), start=1) if row]
    if rows and rows[0][1][0].strip() == 'node_id':
        rows = rows[1:]  # header
    return rows


def _read_node_table(path: Path, num_nodes: int, width: int, kind, allowed: Sequence = None) -> np.ndarray:
    table = np.zeros((num_nodes, width), dtype=np.float64)
    seen = np.zeros(num_nodes, dtype=bool)
    for line, row in _read_rows(path):
        if len(row) != width + 1:
            raise GraphFormatError(f'{path}:{line}: expected {width + 1} fields, got {len(row)}')
        node = _parse_number(row[0], int, path, line)
        if not 0 <= node < num_nodes:
            raise GraphFormatError(f'{path}:{line}: node id {node} outside [0, {num_nodes})')
        if seen[node]:
            raise GraphFormatError(f'{path}:{line}: node {node} listed twice')
        seen[node] = True
        values = [_parse_number(v, kind, path, line) for v in row[1:]]
        if not np.isfinite(values).all():
            raise GraphFormatError(f'{path}:{line}: non-finite value in {row[1:]}')
        if allowed is not None and any(v not in allowed for v in values):
            raise GraphFormatError(f'{path}:{line}: value {row[1:]} of node {node} is not one of {list(allowed)}')
        table[node] = values
    if not seen.all():
        raise GraphFormatError(f'{path}: no row for node {int(np.argmin(seen))}')
    return table


def load_graph(directory: PathLike) -> MultiRelationGraph:
    """
    Load a multi-relation graph from a dataset directory holding meta.json, features.csv, labels.csv and one
    rel_<name>.edges file per relation.
    :param directory: the dataset directory
    :return: a MultiRelationGraph instance
    :raises GraphFormatError: on a missing file or any malformed line, naming file and line number
    """
    directory = Path(directory)
    meta_path = directory / 'meta.json'
    if not meta_path.is_file():
        raise GraphFormatError(f'{meta_path}: missing file')
    try:
        meta = json.loads(meta_path.read_text(encoding='utf-8'))
        num_nodes, feature_dim, relation_names = int(meta['num_nodes']), int(meta['feature_dim']), meta['relations']
    except (ValueError, KeyError, TypeError) as e:
        raise GraphFormatError(f'{meta_path}: invalid meta file ({e})')

    features = _read_node_table(directory / 'features.csv', num_nodes, feature_dim, float)
    labels = _read_node_table(directory / 'labels.csv', num_nodes, 1, int, allowed=(0, 1))[:, 0]

    relations = []
    for name in relation_names:
        path = directory / f'rel_{name}.edges'
        if not path.is_file():
            raise GraphFormatError(f'{path}: missing file')
        edges = []
        with open(path, encoding='utf-8') as f:
            for line, text in enumerate(f, start=1):
                if not text.strip():
                    continue
                fields = text.split()
                if len(fields) != 2:
                    raise GraphFormatError(f'{path}:{line}: expected "u<TAB>v", got {text.rstrip()!r}')
                u, v = (_parse_number(x, int, path, line) for x in fields)
                if not (0 <= u < num_nodes and 0 <= v < num_nodes):
                    raise GraphFormatError(f'{path}:{line}: endpoint of ({u}, {v}) outside [0, {num_nodes})')
                edges.append((u, v))
        relations.append((name, np.array(edges, dtype=np.int64).reshape(-1, 2)))

    graph = MultiRelationGraph(features, labels.astype(np.int64), relations)
    logger.info(f'loaded {graph} from {directory}')
    return graph


def save_graph(graph: MultiRelationGraph, directory: PathLike) -> Path:
    """
    Write a graph in canonical dataset-directory form (sorted node ids, edges with u < v)
    :param graph: the graph
    :param directory: output directory, created if needed
    :return: the directory path
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {'num_nodes': graph.num_nodes, 'feature_dim': graph.feature_dim, 'relations': graph.relation_names}
    (directory / 'meta.json').write_text(json.dumps(meta, indent=2) + '\n', encoding='utf-8')

    header = ','.join(['node_id'] + [f'f_{i + 1}' for i in range(graph.feature_dim)])
    lines = [header] + [','.join([str(i)] + [repr(float(x)) for x in row]) for i, row in enumerate(graph.features)]
    (directory / 'features.csv').write_text('\n'.join(lines) + '\n', encoding='utf-8')

    lines = ['node_id,label'] + [f'{i},{label}' for i, label in enumerate(graph.labels)]
    (directory / 'labels.csv').write_text('\n'.join(lines) + '\n', encoding='utf-8')

    for name, edges in zip(graph.relation_names, graph.edges):
        text = ''.join(f'{u}\t{v}\n' for u, v in edges)
        (directory / f'rel_{name}.edges').write_text(text, encoding='utf-8')
    logger.info(f'saved {graph} to {directory}')
    return directory


def graph_fingerprint(directory: PathLike) -> str:
    """
    SHA-256 content hash of a dataset directory (meta, features, labels and edge files)
    :param directory: the dataset directory
    :return: hex digest
    """
    directory = Path(directory)
    digest = hashlib.sha256()
    files = [directory / 'meta.json', directory / 'features.csv', directory / 'labels.csv']
    files += sorted(directory.glob('rel_*.edges'))
    for path in files:
        digest.update(path.name.encode('utf-8'))
        digest.update(path.read_bytes())
    return digest.hexdigest()


def standardize_features(graph: MultiRelationGraph) -> MultiRelationGraph:
    """
    Copy of the graph with each feature column scaled to zero mean and unit variance
    """
    features = StandardScaler().fit_transform(graph.features)
    return MultiRelationGraph(features, graph.labels, list(zip(graph.relation_names, graph.edges)))


@dataclass(frozen=True)
class DataSplit:
    """
    Disjoint train/test node sets; fraud_train holds the training nodes labelled fraud.
    """
    train: np.ndarray
    test: np.ndarray
    fraud_train: np.ndarray


def split_stratified(graph: MultiRelationGraph, train_ratio: float, seed: int) -> DataSplit:
    """
    Split the nodes into train and test sets preserving the fraud ratio.
    The train set holds round(train_ratio * N) nodes.
    :param graph: the graph
    :param train_ratio: fraction of nodes used for training, in (0, 1)
    :param seed: random seed of the split
    :return: a DataSplit instance
    :raises ValueError: if the ratio is out of range or a class has no members
    """
    if not 0 < train_ratio < 1:
        raise ValueError(f'train ratio {train_ratio} outside (0, 1)')
    counts = np.bincount(graph.labels, minlength=2)
    if counts.min() == 0:
        raise ValueError(f'both classes are needed for a stratified split, got class counts {counts.tolist()}')
    train_size = int(round(train_ratio * graph.num_nodes))
    train, test = train_test_split(np.arange(graph.num_nodes), train_size=train_size,
                                   stratify=graph.labels, random_state=seed)
    train, test = np.sort(train), np.sort(test)
    return DataSplit(train, test, train[graph.labels[train] == 1])


@dataclass(frozen=True)
class SyntheticConfig:
    """
    Parameters of the camouflage graph generator. Relations after the first also link node pairs at random with
    noise_edge_probability, whatever their classes.
    """
    num_nodes: int = 1000
    feature_dim: int = 32
    fraud_ratio: float = 0.1
    relation_count: int = 3
    intra_edge_probability: float = 0.03
    camouflage_rate: float = 0.5
    seed: int = 0
    mean_separation: float = 2.0
    noise_edge_probability: float = 0.08

    def __post_init__(self):
        if self.num_nodes < 10:
            raise ValueError(f'num_nodes must be at least 10, got {self.num_nodes}')
        for name in ('fraud_ratio', 'intra_edge_probability', 'camouflage_rate', 'noise_edge_probability'):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f'{name} must be in [0, 1], got {getattr(self, name)}')
        if self.feature_dim < 1 or self.relation_count < 1:
            raise ValueError('feature_dim and relation_count must be positive')
        if round(self.num_nodes * self.fraud_ratio) == 0:
            raise ValueError(f'fraud ratio {self.fraud_ratio} leaves no fraud node among {self.num_nodes}')


def generate_synthetic(config: SyntheticConfig) -> MultiRelationGraph:
    """
    Generate a camouflage graph: two unit-variance Gaussian feature blobs whose means are mean_separation apart,
    homophilous edges per relation plus class-blind noise edges in every relation but the first, then each
    fraud-fraud edge rewired with probability camouflage_rate so that one fraud endpoint connects to a random
    benign node instead.
    :param config: generator parameters
    :return: a MultiRelationGraph instance
    """
    rng = np.random.default_rng(config.seed)
    n = config.num_nodes
    n_fraud = int(round(n * config.fraud_ratio))
    if n_fraud == 0:
        raise ValueError(f'fraud ratio {config.fraud_ratio} leaves no fraud node')

    fraud = np.sort(rng.choice(n, n_fraud, replace=False))
    labels = np.zeros(n, dtype=np.int64)
    labels[fraud] = 1
    benign = np.flatnonzero(labels == 0)

    features = rng.normal(size=(n, config.feature_dim))
    features[fraud] += config.mean_separation / np.sqrt(config.feature_dim)

    relations = []
    for r in range(config.relation_count):
        blocks = []
        for members in (benign, fraud):
            mask = np.triu(rng.random((members.size, members.size)) < config.intra_edge_probability, k=1)
            i, j = np.nonzero(mask)
            blocks.append(np.stack([members[i], members[j]], axis=1))
        if r > 0 and config.noise_edge_probability > 0:
            blocks.append(np.stack(np.nonzero(np.triu(rng.random((n, n)) < config.noise_edge_probability, k=1)),
                                   axis=1))
        edges = np.vstack(blocks)

        # relationship disguise: one endpoint of a fraud-fraud edge is swapped for a benign node
        fraud_fraud = np.flatnonzero((labels[edges[:, 0]] == 1) & (labels[edges[:, 1]] == 1))
        rewire = rng.random(fraud_fraud.size) < config.camouflage_rate
        rows = fraud_fraud[rewire] if benign.size else fraud_fraud[:0]
        edges[rows, rng.integers(0, 2, size=rows.size)] = rng.choice(benign, size=rows.size)

        relations.append((f'r{r}', edges))
        logger.debug(f'relation r{r}: {len(edges)} edges, {fraud_fraud.size} fraud-fraud, {rows.size} rewired')
    return MultiRelationGraph(features, labels, relations)


def fraud_benign_edge_count(graph: MultiRelationGraph) -> int:
    """
    Number of edges, over all relations, joining a fraud node to a benign node
    """
    return int(sum((graph.labels[e[:, 0]] != graph.labels[e[:, 1]]).sum() for e in graph.edges))


class TestLoadGraph(unittest.TestCase):

    def setUp(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        (self.dir / 'meta.json').write_text(json.dumps({'num_nodes': 5, 'feature_dim': 2, 'relations': ['a', 'b']}))
        (self.dir / 'features.csv').write_text(
            'node_id,f_1,f_2\n' + ''.join(f'{i},{i}.5,{-i}\n' for i in range(5)))
        (self.dir / 'labels.csv').write_text('node_id,label\n0,0\n1,1\n2,0\n3,0\n4,1\n')
        (self.dir / 'rel_a.edges').write_text('0\t1\n1\t2\n3\t4\n')
        (self.dir / 'rel_b.edges').write_text('0\t4\n2\t3\n')

    def tearDown(self) -> None:
        self.tmp.cleanup()

    def test_fixture(self):
        graph = load_graph(self.dir)
        self.assertEqual(graph.num_nodes, 5)
        self.assertEqual(graph.relation_count, 2)
        self.assertEqual([len(e) for e in graph.edges], [3, 2])
        self.assertEqual(graph.labels.tolist(), [0, 1, 0, 0, 1])
        self.assertEqual(graph.neighbors(0, 1).tolist(), [0, 2])

    def test_reversed_duplicate(self):
        (self.dir / 'rel_b.edges').write_text('1\t2\n2\t1\n')
        graph = load_graph(self.dir)
        self.assertEqual(graph.edges[1].tolist(), [[1, 2]])

    def test_endpoint_out_of_range(self):
        (self.dir / 'rel_b.edges').write_text('0\t4\n2\t5\n')
        with self.assertRaisesRegex(GraphFormatError, r'rel_b\.edges:2:'):
            load_graph(self.dir)

    def test_non_numeric(self):
        (self.dir / 'features.csv').write_text('node_id,f_1,f_2\n0,1,2\n1,x,2\n')
        with self.assertRaisesRegex(GraphFormatError, r'features\.csv:3: non-numeric'):
            load_graph(self.dir)

    def test_non_finite(self):
        for value in ('nan', 'inf', '-inf'):
            (self.dir / 'features.csv').write_text(f'node_id,f_1,f_2\n0,1,2\n1,{value},2\n')
            with self.assertRaisesRegex(GraphFormatError, r'features\.csv:3: non-finite'):
                load_graph(self.dir)

    def test_merged_adjacency_cached(self):
        graph = load_graph(self.dir)
        merged = graph.merged_adjacency()
        self.assertIs(graph.merged_adjacency(), merged)
        self.assertEqual(merged.nnz, 2 * 5)

    def test_bad_label(self):
        (self.dir / 'labels.csv').write_text('node_id,label\n0,0\n1,2\n2,0\n3,0\n4,1\n')
        with self.assertRaisesRegex(GraphFormatError, r'labels\.csv:3: .* not one of'):
            load_graph(self.dir)

    def test_missing_file(self):
        (self.dir / 'rel_a.edges').unlink()
        with self.assertRaisesRegex(GraphFormatError, 'missing file'):
            load_graph(self.dir)

    def test_round_trip(self):
        for seed in range(5):
            graph = generate_synthetic(SyntheticConfig(num_nodes=60, feature_dim=3, relation_count=2,
                                                       intra_edge_probability=0.1, seed=seed))
            with tempfile.TemporaryDirectory() as tmp:
                save_graph(graph, tmp)
                self.assertEqual(load_graph(tmp), graph)

    @unittest.skipUnless(os.environ.get('GNN_CL_YELP_DIR'), 'set GNN_CL_YELP_DIR to a Yelp-formatted dataset')
    def test_yelp_schema(self):
        graph = load_graph(os.environ['GNN_CL_YELP_DIR'])
        self.assertEqual(graph.num_nodes, 45954)
        self.assertEqual(graph.relation_count, 3)
        self.assertEqual(len(graph.merged_edges()), 3846979)


class TestSplit(unittest.TestCase):

    def graph(self, n=100, n_fraud=10):
        labels = np.zeros(n, dtype=int)
        labels[:n_fraud] = 1
        return MultiRelationGraph(np.zeros((n, 1)), labels, [('a', np.empty((0, 2)))])

    def test_exact_proportions(self):
        split = split_stratified(self.graph(), 0.4, seed=3)
        self.assertEqual(len(split.train), 40)
        self.assertEqual(len(split.fraud_train), 4)
        self.assertEqual(len(np.intersect1d(split.train, split.test)), 0)
        self.assertEqual(len(split.train) + len(split.test), 100)

    def test_deterministic(self):
        a = split_stratified(self.graph(), 0.4, seed=3)
        b = split_stratified(self.graph(), 0.4, seed=3)
        self.assertTrue(np.array_equal(a.train, b.train))
        self.assertTrue(np.array_equal(a.test, b.test))

    def test_rounded_train_size(self):
        split = split_stratified(self.graph(n=47, n_fraud=5), 0.4, seed=0)
        self.assertEqual(len(split.train), round(0.4 * 47))

    def test_single_class(self):
        with self.assertRaises(ValueError):
            split_stratified(self.graph(n_fraud=0), 0.4, seed=0)


class TestGenerateSynthetic(unittest.TestCase):

    def test_fraud_count(self):
        graph = generate_synthetic(SyntheticConfig(num_nodes=100, fraud_ratio=0.1, seed=1))
        self.assertEqual(int(graph.labels.sum()), 10)

    def test_no_camouflage(self):
        graph = generate_synthetic(SyntheticConfig(num_nodes=200, fraud_ratio=0.2, camouflage_rate=0.0,
                                                   intra_edge_probability=0.1, noise_edge_probability=0.02))
        benign_share = (graph.labels == 0).sum() / (graph.num_nodes - 1)
        for r, edges in enumerate(graph.edges):
            fraud_incident = [e for e in edges.tolist() if graph.labels[e[0]] or graph.labels[e[1]]]
            mixed = [e for e in fraud_incident if graph.labels[e[0]] != graph.labels[e[1]]]
            self.assertGreater(len(fraud_incident), 0)
            if r == 0:
                self.assertEqual(len(mixed), 0)
            else:
                self.assertLessEqual(len(mixed) / len(fraud_incident), benign_share)

    def test_noise_edges_skip_first_relation(self):
        quiet = generate_synthetic(SyntheticConfig(num_nodes=100, noise_edge_probability=0.0, seed=2))
        noisy = generate_synthetic(SyntheticConfig(num_nodes=100, noise_edge_probability=0.2, seed=2))
        self.assertEqual(len(quiet.edges[0]), len(noisy.edges[0]))
        for r in (1, 2):
            self.assertGreater(len(noisy.edges[r]), len(quiet.edges[r]))

    def test_invariants(self):
        rng = np.random.default_rng(0)
        for seed in range(100):
            config = SyntheticConfig(num_nodes=int(rng.integers(10, 60)), feature_dim=int(rng.integers(1, 5)),
                                     fraud_ratio=float(rng.uniform(0.1, 0.5)), relation_count=int(rng.integers(1, 4)),
                                     intra_edge_probability=float(rng.uniform()), camouflage_rate=float(rng.uniform()),
                                     seed=seed)
            graph = generate_synthetic(config)
            for edges in graph.edges:
                self.assertTrue((edges[:, 0] < edges[:, 1]).all())
                self.assertTrue((edges.max(initial=0) < graph.num_nodes))
                self.assertEqual(len(np.unique(edges, axis=0)), len(edges))

    def test_camouflage_monotone(self):
        rates = [0.0, 0.3, 0.6, 0.9]
        means = []
        for rate in rates:
            counts = [fraud_benign_edge_count(generate_synthetic(
                SyntheticConfig(num_nodes=150, fraud_ratio=0.2, intra_edge_probability=0.1, camouflage_rate=rate,
                                relation_count=1, seed=seed))) for seed in range(20)]
            means.append(np.mean(counts))
        self.assertEqual(means, sorted(means))
        self.assertLess(means[0], means[-1])

    def test_zero_fraud(self):
        with self.assertRaises(ValueError):
            SyntheticConfig(num_nodes=100, fraud_ratio=0.0)

    def test_byte_identical(self):
        config = SyntheticConfig(num_nodes=80, seed=7)
        with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
            save_graph(generate_synthetic(config), a)
            save_graph(generate_synthetic(config), b)
            self.assertEqual(graph_fingerprint(a), graph_fingerprint(b))
            for name in os.listdir(a):
                self.assertEqual(Path(a, name).read_bytes(), Path(b, name).read_bytes())


if __name__ == '__main__':
    unittest.main(exit=False)

    graph = generate_synthetic(SyntheticConfig())
    split = split_stratified(graph, 0.4, seed=0)
    print(graph)
    print(f'{len(split.train)} train nodes ({len(split.fraud_train)} fraud), {len(split.test)} test nodes')
    print(f'{fraud_benign_edge_count(graph)} fraud-benign edges')
