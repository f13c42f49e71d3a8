"""
Command-line entry point: generate datasets, train and evaluate models, run parameter sweeps.

    python gnn_cl.py generate --out data/synthetic --nodes 1000 --relations 3 --seed 7
    python gnn_cl.py train --data data/synthetic --out runs/r1 --seed 1
    python gnn_cl.py evaluate --data data/synthetic --out runs/r1 --dump-scores
    python gnn_cl.py sweep --data data/synthetic --out runs/sweep --param lambda --values 0.1,0.5,1,2

Exit codes: 0 success, 1 data or checkpoint failure, 2 usage error.
"""
import argparse
import configparser
import contextlib
import io
import json
import logging
import sys
import tempfile
import unittest
from dataclasses import fields, replace
from datetime import datetime, timezone
from multiprocessing import Pool
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from metrics import UndefinedAucError
from multi_relation_graph import (GraphFormatError, SyntheticConfig, generate_synthetic, graph_fingerprint, load_graph,
                                  save_graph, split_stratified)
from trainer import (CheckpointError, TrainConfig, checkpoint_save, epoch_frame, evaluate, fit, load_checkpoint,
                     predict, prepare_graph)

logger = logging.getLogger(__name__)

SWEEP_PARAMETERS = {'lambda': 'loss_weight', 'train-ratio': 'train_ratio', 'tau': 'tau',
                    'init-threshold': 'init_threshold'}
# flag spellings whose TrainConfig field has another name
FLAG_ALIASES = {'lambda': 'loss_weight', 'lr': 'learning_rate'}


class FingerprintMismatchError(ValueError):
    pass


def _float_list(text: str) -> List[float]:
    try:
        return [float(value) for value in text.split(',') if value.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected comma-separated numbers, got {text!r}')


def _int_list(text: str) -> List[int]:
    try:
        return [int(value) for value in text.split(',') if value.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected comma-separated integers, got {text!r}')


def _optional_float(text: str) -> Optional[float]:
    return None if text.strip().lower() in ('', 'none') else float(text)


def _boolean(text: str) -> bool:
    if text.strip().lower() in ('1', 'true', 'yes', 'on'):
        return True
    if text.strip().lower() in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f'not a boolean: {text!r}')


def read_config_file(path: str) -> Dict:
    """
    Read a flat key = value file into TrainConfig field values. Keys may be spelled as flags (with '-')
    or as field names; 'lambda' and 'lr' are accepted.
    :param path: the file
    :return: typed values keyed by TrainConfig field
    :raises ValueError: for unknown keys or values of the wrong type
    """
    parser = configparser.ConfigParser()
    with open(path) as file:
        parser.read_string('[config]\n' + file.read())
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for key, text in parser['config'].items():
        name = key.strip().replace('-', '_')
        name = FLAG_ALIASES.get(name, name)
        if name not in types:
            raise ValueError(f'{path}: unknown configuration key {key!r}')
        kind = types[name]
        if kind in (bool, 'bool'):
            values[name] = _boolean(text)
        elif kind in (int, 'int'):
            values[name] = int(text)
        elif kind in (float, 'float'):
            values[name] = float(text)
        elif kind in (str, 'str'):
            values[name] = text.strip()
        else:
            values[name] = _optional_float(text)
    return values


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument('--data', help='dataset directory')
    shared.add_argument('--out', help='output directory')
    shared.add_argument('--seed', type=int, help='random seed')
    shared.add_argument('--config', help='flat key = value configuration file')
    shared.add_argument('-v', '--verbose', action='store_true', help='debug logging')

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument('--model', choices=('gnn-cl', 'gcn'))
    model.add_argument('--epochs', type=int)
    model.add_argument('--layers', type=int)
    model.add_argument('--lambda', dest='loss_weight', type=float, help='weight of the purifier loss')
    model.add_argument('--tau', type=float, help='threshold step size')
    model.add_argument('--lr', dest='learning_rate', type=float)
    model.add_argument('--batch-size', dest='batch_size', type=int)
    model.add_argument('--init-threshold', dest='init_threshold', type=float)
    model.add_argument('--hidden-dim', dest='hidden_dim', type=int)
    model.add_argument('--train-ratio', dest='train_ratio', type=float)
    model.add_argument('--no-reinforcer', dest='no_reinforcer', action='store_true', default=None)
    model.add_argument('--fixed-weight', dest='fixed_weight', type=float)
    model.add_argument('--standardize-features', dest='standardize_features', action='store_true', default=None)
    model.add_argument('--cell', choices=('paper-rnn', 'standard-lstm'))
    model.add_argument('--purifier-hidden', dest='purifier_hidden', type=int)
    model.add_argument('--num-kernels', dest='num_kernels', type=int)
    model.add_argument('--kernel-half-width', dest='kernel_half_width', type=int)
    model.add_argument('--recurrent-hidden', dest='recurrent_hidden', type=int)
    model.add_argument('--sequence-steps', dest='sequence_steps', type=int)

    parser = argparse.ArgumentParser(prog='gnn_cl', description='Multi-relation GNN fraud detection')
    commands = parser.add_subparsers(dest='command', required=True)

    generate = commands.add_parser('generate', parents=[shared], help='write a synthetic camouflage graph')
    generate.add_argument('--nodes', type=int, default=1000)
    generate.add_argument('--features', type=int, default=32)
    generate.add_argument('--relations', type=int, default=3)
    generate.add_argument('--fraud-ratio', type=float, default=0.1)
    generate.add_argument('--camouflage', type=float, default=0.5)
    generate.add_argument('--edge-probability', type=float, default=0.03)
    generate.add_argument('--separation', type=float, default=2.0)
    generate.add_argument('--noise-edge-probability', type=float, default=0.08,
                          help='class-blind edge probability of every relation after the first')
    generate.set_defaults(handler=cmd_generate)

    train = commands.add_parser('train', parents=[shared, model], help='train a model')
    train.set_defaults(handler=cmd_train)

    evaluation = commands.add_parser('evaluate', parents=[shared], help='evaluate a checkpoint')
    evaluation.add_argument('--checkpoint', help='checkpoint file, default <out>/checkpoint.npz')
    evaluation.add_argument('--split', choices=('train', 'test'), default='test')
    evaluation.add_argument('--dump-scores', action='store_true', help='also write scores.csv')
    evaluation.set_defaults(handler=cmd_evaluate)

    sweep = commands.add_parser('sweep', parents=[shared, model], help='train one run per (value, seed)')
    sweep.add_argument('--param', required=True, choices=sorted(SWEEP_PARAMETERS))
    sweep.add_argument('--values', required=True, type=_float_list)
    sweep.add_argument('--seeds', type=_int_list, default=[1, 2, 3, 4, 5])
    sweep.add_argument('--workers', type=int, default=1)
    sweep.set_defaults(handler=cmd_sweep)
    return parser


def resolve_config(parser: argparse.ArgumentParser, args: argparse.Namespace) -> TrainConfig:
    """
    Built-in defaults, overridden by the --config file, overridden by flags
    """
    values = {}
    if args.config:
        try:
            values.update(read_config_file(args.config))
        except (ValueError, configparser.Error) as error:
            parser.error(str(error))
    for f in fields(TrainConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    try:
        return TrainConfig(**values)
    except ValueError as error:
        parser.error(str(error))


def _require(parser: argparse.ArgumentParser, args: argparse.Namespace, *names: str) -> None:
    missing = [f'--{name}' for name in names if getattr(args, name) is None]
    if missing:
        parser.error(f'{args.command} requires {", ".join(missing)}')


def _write_json(path: Path, payload: Dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + '\n')


def cmd_generate(parser: argparse.ArgumentParser, args: argparse.Namespace) -> int:
    _require(parser, args, 'out')
    try:
        config = SyntheticConfig(num_nodes=args.nodes, feature_dim=args.features, fraud_ratio=args.fraud_ratio,
                                 relation_count=args.relations, intra_edge_probability=args.edge_probability,
                                 camouflage_rate=args.camouflage, seed=args.seed or 0,
                                 mean_separation=args.separation, noise_edge_probability=args.noise_edge_probability)
    except ValueError as error:
        parser.error(str(error))
    directory = save_graph(generate_synthetic(config), args.out)
    _write_json(directory / 'manifest.json', {'command': 'generate', 'config': vars(config)})
    logger.info(f'dataset written to {directory}')
    return 0


def cmd_train(parser: argparse.ArgumentParser, args: argparse.Namespace) -> int:
    _require(parser, args, 'data', 'out')
    config = resolve_config(parser, args)
    graph = load_graph(args.data)
    fingerprint = graph_fingerprint(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / 'manifest.json', {
        'command': 'train',
        'config': config.as_dict(),
        'data': str(args.data),
        'fingerprint': fingerprint,
        'out': str(out),
        'timestamp': datetime.now(timezone.utc).isoformat(),
    })
    train_run(graph, config, out, fingerprint)
    return 0


def train_run(graph, config: TrainConfig, out: Path, fingerprint: str):
    """
    Train, streaming epochs.csv, then write the checkpoint
    """
    graph = prepare_graph(graph, config)
    logs = []

    def on_epoch(log):
        logs.append(log)
        epoch_frame(logs).to_csv(out / 'epochs.csv', index=False, float_format='%.17g')

    result = fit(graph, config, on_epoch)
    checkpoint_save(result.model, result.controller, out / 'checkpoint.npz', config,
                    {'fingerprint': fingerprint, 'relation_names': graph.relation_names, 'seed': config.seed})
    return graph, result


def cmd_evaluate(parser: argparse.ArgumentParser, args: argparse.Namespace) -> int:
    _require(parser, args, 'data')
    if args.checkpoint is None and args.out is None:
        parser.error('evaluate requires --checkpoint or --out')
    checkpoint = Path(args.checkpoint) if args.checkpoint else Path(args.out) / 'checkpoint.npz'
    out = Path(args.out) if args.out else checkpoint.parent
    model, controller, config, meta = load_checkpoint(checkpoint)
    fingerprint = graph_fingerprint(args.data)
    if meta.get('fingerprint') not in (None, fingerprint):
        raise FingerprintMismatchError(f'{checkpoint} was trained on a different dataset than {args.data}')
    graph = prepare_graph(load_graph(args.data), config)
    if graph.relation_count != model.relation_count or graph.feature_dim != model.feature_dim:
        raise CheckpointError(f'{checkpoint} does not match the shape of the dataset {args.data}')

    split = split_stratified(graph, config.train_ratio, config.seed)
    nodes = split.train if args.split == 'train' else split.test
    try:
        report = evaluate(model, graph, split, controller, config.batch_size, nodes)
    except UndefinedAucError as error:
        logger.warning(str(error))
        report = error.report

    out.mkdir(parents=True, exist_ok=True)
    payload = report.as_dict()
    payload.update({'split': args.split, 'nodes': int(len(nodes)), 'config': config.as_dict()})
    _write_json(out / 'metrics.json', payload)
    if args.dump_scores:
        scores = predict(model, graph, nodes, controller, config.batch_size)
        frame = pd.DataFrame({'node_id': nodes, 'label': graph.labels[nodes], 'score': scores})
        frame.to_csv(out / 'scores.csv', index=False, float_format='%.17g')
    print(f'{args.split} ({len(nodes)} nodes): {report.summary()}')
    return 0


def sweep_run(job: Dict) -> Dict:
    """
    Train and evaluate one (value, seed) pair of a sweep in its own directory
    """
    out = Path(job['out'])
    out.mkdir(parents=True, exist_ok=True)
    config = TrainConfig.from_dict(job['config'])
    graph, result = train_run(load_graph(job['data']), config, out, job['fingerprint'])
    try:
        report = evaluate(result.model, graph, result.split, result.controller, config.batch_size)
    except UndefinedAucError as error:
        report = error.report
    logger.info(f'{job["param"]}={job["value"]} seed={config.seed}: {report.summary()}')
    return {'param': job['param'], 'value': job['value'], 'seed': config.seed,
            'auc': np.nan if report.auc is None else report.auc, 'f': report.f, 'recall': report.recall}


def cmd_sweep(parser: argparse.ArgumentParser, args: argparse.Namespace) -> int:
    _require(parser, args, 'data', 'out')
    if args.workers < 1:
        parser.error(f'--workers must be positive, got {args.workers}')
    base = resolve_config(parser, args)
    field_name = SWEEP_PARAMETERS[args.param]
    fingerprint = graph_fingerprint(args.data)
    out = Path(args.out)
    jobs = []
    for value in args.values:
        for seed in args.seeds:
            try:
                config = replace(base, **{field_name: value, 'seed': seed})
            except ValueError as error:
                parser.error(str(error))
            jobs.append({'param': args.param, 'value': value, 'data': str(args.data), 'fingerprint': fingerprint,
                         'config': config.as_dict(), 'out': str(out / f'{args.param}={value:g}' / f'seed={seed}')})

    out.mkdir(parents=True, exist_ok=True)
    if args.workers > 1:
        with Pool(args.workers) as pool:
            rows = list(pool.imap(sweep_run, jobs))
    else:
        rows = [sweep_run(job) for job in jobs]
    table = out / 'sweep.csv'
    pd.DataFrame(rows, columns=['param', 'value', 'seed', 'auc', 'f', 'recall']).to_csv(
        table, mode='a', header=not table.exists(), index=False, float_format='%.17g')
    logger.info(f'{len(rows)} sweep rows appended to {table}')
    return 0


def main(argv: Sequence[str] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        return args.handler(parser, args)
    except (GraphFormatError, CheckpointError, FingerprintMismatchError, OSError) as error:
        logger.error(str(error))
        return 1


class TestCli(unittest.TestCase):

    def setUp(self) -> None:
        self.directory = tempfile.TemporaryDirectory()
        self.root = Path(self.directory.name)
        self.data = self.root / 'data'
        self.assertEqual(self.run_cli('generate', '--out', str(self.data), '--nodes', '120', '--features', '8',
                                      '--relations', '3', '--fraud-ratio', '0.2', '--camouflage', '0.5',
                                      '--edge-probability', '0.05', '--seed', '7'), 0)

    def tearDown(self) -> None:
        self.directory.cleanup()

    def run_cli(self, *argv: str) -> int:
        with contextlib.redirect_stdout(io.StringIO()), contextlib.redirect_stderr(io.StringIO()):
            try:
                return main(list(argv))
            except SystemExit as exit_:
                return exit_.code

    def train(self, out: Path, *extra: str) -> int:
        return self.run_cli('train', '--data', str(self.data), '--out', str(out), '--seed', '1', '--epochs', '2',
                            '--hidden-dim', '8', '--purifier-hidden', '4', '--recurrent-hidden', '3',
                            '--batch-size', '32', *extra)

    def test_generate_inventory_and_determinism(self):
        names = sorted(path.name for path in self.data.iterdir())
        self.assertEqual(names, ['features.csv', 'labels.csv', 'manifest.json', 'meta.json',
                                 'rel_r0.edges', 'rel_r1.edges', 'rel_r2.edges'])
        again = self.root / 'again'
        self.run_cli('generate', '--out', str(again), '--nodes', '120', '--features', '8', '--relations', '3',
                     '--fraud-ratio', '0.2', '--camouflage', '0.5', '--edge-probability', '0.05', '--seed', '7')
        for name in names:
            self.assertEqual((self.data / name).read_bytes(), (again / name).read_bytes())

    def test_generate_usage_error(self):
        self.assertEqual(self.run_cli('generate', '--out', str(self.root / 'bad'), '--fraud-ratio', '0'), 2)

    def test_train_and_evaluate(self):
        run = self.root / 'run'
        self.assertEqual(self.train(run), 0)
        for name in ('manifest.json', 'checkpoint.npz', 'epochs.csv'):
            self.assertTrue((run / name).exists(), name)
        epochs = pd.read_csv(run / 'epochs.csv')
        self.assertEqual(len(epochs), 2)
        self.assertEqual(list(epochs.columns), ['epoch', 'loss_total', 'loss_head', 'loss_gnn', 'loss_purifier',
                                                'p_0_0', 'p_0_1', 'p_0_2', 'dbar_0_0', 'dbar_0_1', 'dbar_0_2',
                                                'seconds'])
        manifest = json.loads((run / 'manifest.json').read_text())
        self.assertEqual(manifest['config'], TrainConfig.from_dict(manifest['config']).as_dict())

        counts = {}
        for split in ('train', 'test'):
            self.assertEqual(self.run_cli('evaluate', '--data', str(self.data), '--out', str(run),
                                          '--split', split, '--dump-scores'), 0)
            metrics = json.loads((run / 'metrics.json').read_text())
            for key in ('precision', 'recall', 'f', 'accuracy', 'auc', 'tp', 'tn', 'fp', 'fn', 'config'):
                self.assertIn(key, metrics)
            counts[split] = metrics['tp'] + metrics['tn'] + metrics['fp'] + metrics['fn']
        self.assertEqual(counts['train'] + counts['test'], 120)

        scores = pd.read_csv(run / 'scores.csv')
        fraud = scores.score[scores.label == 1].to_numpy()
        benign = scores.score[scores.label == 0].to_numpy()
        pairs = [(a > b) + 0.5 * (a == b) for a in fraud for b in benign]
        self.assertAlmostEqual(metrics['auc'], float(np.mean(pairs)), delta=1e-9)

    def test_train_is_deterministic(self):
        first, second = self.root / 'first', self.root / 'second'
        self.train(first)
        self.train(second)
        a = pd.read_csv(first / 'epochs.csv').drop(columns='seconds')
        b = pd.read_csv(second / 'epochs.csv').drop(columns='seconds')
        pd.testing.assert_frame_equal(a, b, check_exact=False, rtol=0, atol=1e-12)

    def test_config_file_precedence(self):
        config = self.root / 'run.cfg'
        config.write_text('epochs = 1\nlambda = 0.5\nhidden-dim = 12\ntau = 0.05\n')
        run = self.root / 'configured'
        self.assertEqual(self.train(run, '--config', str(config), '--lambda', '1.0'), 0)
        resolved = json.loads((run / 'manifest.json').read_text())['config']
        self.assertEqual((resolved['epochs'], resolved['loss_weight'], resolved['hidden_dim']), (2, 1.0, 8))
        self.assertEqual(resolved['tau'], 0.05)
        config.write_text('colour = red\n')
        self.assertEqual(self.train(self.root / 'unknown', '--config', str(config)), 2)

    def test_gcn_baseline(self):
        self.assertEqual(self.train(self.root / 'gcn', '--model', 'gcn'), 0)

    def test_failures(self):
        self.assertEqual(self.run_cli('train', '--data', str(self.root / 'missing'), '--out', str(self.root / 'x')), 1)
        self.assertEqual(self.train(self.root / 'bad', '--train-ratio', '1.5'), 2)
        run = self.root / 'run'
        self.train(run)
        (self.data / 'rel_r0.edges').write_text('0\t1\n')
        self.assertEqual(self.run_cli('evaluate', '--data', str(self.data), '--out', str(run)), 1)
        self.assertEqual(self.run_cli('evaluate', '--data', str(self.data), '--checkpoint',
                                      str(self.root / 'none.npz')), 1)

    def test_inconsistent_configuration_is_usage_error(self):
        for extra in (('--init-threshold', '0.01'), ('--num-kernels', '3')):
            out = self.root / f'bad{extra[0]}'
            self.assertEqual(self.train(out, *extra), 2)
            self.assertFalse((out / 'manifest.json').exists())

    def test_sweep_row_reproduced_by_single_run(self):
        out = self.root / 'sweep'
        flags = ('--epochs', '1', '--hidden-dim', '8', '--purifier-hidden', '4', '--recurrent-hidden', '3')
        self.assertEqual(self.run_cli('sweep', '--data', str(self.data), '--out', str(out), '--param', 'lambda',
                                      '--values', '0.5,1.5', '--seeds', '3', *flags), 0)
        row = pd.read_csv(out / 'sweep.csv').query('value == 1.5').iloc[0]
        single = self.root / 'single'
        self.assertEqual(self.run_cli('train', '--data', str(self.data), '--out', str(single), '--seed', '3',
                                      '--lambda', '1.5', *flags), 0)
        self.assertEqual(self.run_cli('evaluate', '--data', str(self.data), '--out', str(single)), 0)
        metrics = json.loads((single / 'metrics.json').read_text())
        for key in ('auc', 'f', 'recall'):
            self.assertAlmostEqual(metrics[key], row[key], delta=1e-12)

    def test_sweep(self):
        out = self.root / 'sweep'
        status = self.run_cli('sweep', '--data', str(self.data), '--out', str(out), '--param', 'train-ratio',
                              '--values', '0.3,0.5', '--seeds', '1,2', '--epochs', '1', '--hidden-dim', '8',
                              '--purifier-hidden', '4', '--recurrent-hidden', '3')
        self.assertEqual(status, 0)
        rows = pd.read_csv(out / 'sweep.csv')
        self.assertEqual(len(rows), 4)
        self.assertEqual(list(rows.columns), ['param', 'value', 'seed', 'auc', 'f', 'recall'])
        self.assertTrue((out / 'train-ratio=0.3' / 'seed=2' / 'checkpoint.npz').exists())
        self.assertEqual(self.run_cli('sweep', '--data', str(self.data), '--out', str(out), '--param', 'depth',
                                      '--values', '1'), 2)


if __name__ == '__main__':
    if len(sys.argv) > 1:
        sys.exit(main())
    unittest.main()
