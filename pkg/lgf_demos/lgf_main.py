#! /usr/bin/env python3
"""
Command-line entry point. Every subcommand reads the run configuration,
works inside the --out directory and leaves its artefacts there:

    generate-corpus   corpus.csv, signatures.npy
    train-gqae        gqae.pt
    train-flow        flow.pt
    train-predictor   predictor_order.pt
    generate-dataset  dataset.csv
    discover          discovery/*, results.csv, report.txt, trajectory.csv
    evaluate          results of one equation against a problem
    report            results.csv, report.txt, trajectory.csv from discovery/best.yaml
"""
import argparse
import logging
import os
import sys
import time

import numpy as np
import pandas as pd

from lgf_demos.grammars.cfg_grammar import Grammar
from lgf_demos.learners.discrete_flow import LevelCompression, load_flow, save_flow, train_denoiser
from lgf_demos.learners.gqae import GQAEDataset, load_gqae, reconstruction_accuracy, save_gqae, train_gqae
from lgf_demos.learners.predictors import load_predictor, save_predictor, train_predictor
from lgf_demos.planners.discovery import load_best, run_discovery
from lgf_demos.utils.behaviour import SignatureCache
from lgf_demos.utils.benchmarks import generate_dataset, get_problem, read_dataset, write_dataset
from lgf_demos.utils.config import Config, load_config
from lgf_demos.utils.errors import ConfigError, DataError, EmptyOperator, LGFError
from lgf_demos.utils.expression import candidate_from_skeleton
from lgf_demos.utils.mode_approximation import approximate_modes
from lgf_demos.utils.reporting import evaluate_candidate, report, report_text, score_candidate, write_report

logger = logging.getLogger("lgf.main")

COMMANDS = ('generate-corpus', 'generate-dataset', 'train-gqae', 'train-flow', 'train-predictor', 'discover',
            'evaluate', 'report')


class LGFRunner(object):
    """
    This class holds the configuration and run directory shared by the
    subcommands and implements one method per subcommand.
    """

    def __init__(self, args):
        self.args = args
        self.load_params()

    def load_params(self):
        """
        Loading the configuration file and applying the command-line overrides.
        """
        args = self.args
        self.cfg = load_config(args.config) if args.config else Config()
        if args.seed is not None:
            self.cfg.setup.seed = args.seed
        if args.out is not None:
            self.cfg.setup.out = args.out
        if args.threads is not None:
            self.cfg.setup.threads = args.threads
        self.out = self.cfg.setup.out
        os.makedirs(self.out, exist_ok=True)
        self.grammar = Grammar.from_file(self.cfg.grammar.path)

    def path(self, name):
        return os.path.join(self.out, name)

    # ---- Corpus ---- #

    def signature_cache(self):
        cfg = self.cfg
        if os.path.exists(self.path('signatures.npy')):
            return SignatureCache.load(self.path('signatures.npy'), seed=cfg.setup.seed, n_draws=cfg.gqae.n_draws)
        return SignatureCache(seed=cfg.setup.seed, n_draws=cfg.gqae.n_draws)

    def read_corpus(self):
        if not os.path.exists(self.path('corpus.csv')):
            raise DataError('No corpus in {}; run generate-corpus first.'.format(self.out))
        frame = pd.read_csv(self.path('corpus.csv'))
        return [tuple(int(i) for i in str(row).split()) for row in frame['indices']]

    def one_hot(self, sequences):
        return np.stack([self.grammar.encode_one_hot(seq, self.cfg.grammar.N_max) for seq in sequences])

    def generate_corpus(self):
        cfg = self.cfg.grammar
        rng = np.random.default_rng(self.cfg.setup.seed)
        cache = self.signature_cache()
        sequences, texts, seen = [], [], set()
        for _ in range(100 * cfg.corpus_size):
            if len(sequences) == cfg.corpus_size:
                break
            seq = self.grammar.random_derivation(rng, cfg.N_max)
            if seq in seen:
                continue
            seen.add(seq)
            text = self.grammar.realize(seq)
            try:
                skeleton = candidate_from_skeleton(text, self.grammar.explicit_order, seq)
            except EmptyOperator:
                continue
            cache.get(seq, skeleton)
            sequences.append(seq)
            texts.append(text)
        if len(sequences) < cfg.corpus_size:
            logger.warning(f'Only {len(sequences)} unique skeletons found, {cfg.corpus_size} requested')
        pd.DataFrame({'indices': [' '.join(map(str, s)) for s in sequences], 'text': texts}).to_csv(
            self.path('corpus.csv'), index=False)
        cache.save(self.path('signatures.npy'))
        logger.info(f'Wrote corpus of {len(sequences)} skeletons to {self.out}')

    # ---- Training ---- #

    def train_gqae(self):
        cfg = self.cfg.gqae
        sequences = self.read_corpus()
        cache = self.signature_cache()
        signatures = [cache.get(seq, candidate_from_skeleton(self.grammar.realize(seq), self.grammar.explicit_order,
                                                              seq)) for seq in sequences]
        dataset = GQAEDataset(self.one_hot(sequences), [s.mu for s in signatures], [s.sigma for s in signatures])
        model = train_gqae(dataset, cfg, batch_size=min(cfg.batch_size, len(dataset)), seed=self.cfg.setup.seed)
        accuracy = reconstruction_accuracy(model, self.grammar, sequences, self.cfg.grammar.N_max)
        logger.info(f'GQAE reconstructs {accuracy:.1%} of the corpus')
        save_gqae(self.path('gqae.pt'), model, self.grammar)

    def corpus_tokens(self):
        """Flattened latent codes of the corpus and the flow alphabet mapping."""
        gqae = load_gqae(self.path('gqae.pt'), self.grammar)
        codes = gqae.encode_codes(self.one_hot(self.read_corpus()))
        codes = codes.reshape(len(codes), -1)
        return codes, gqae.fsq.n_fsq

    def train_flow(self):
        cfg = self.cfg.flow
        codes, n_fsq = self.corpus_tokens()
        n_states = cfg.n_states or n_fsq
        compression = None
        if n_states < n_fsq:
            if not cfg.compression:
                raise ConfigError('flow.n_states = {} < n_fsq = {} needs flow.compression.'.format(n_states, n_fsq))
            compression = LevelCompression.fit(codes, n_fsq, n_states)
            codes = compression.compress(codes)
        model = train_denoiser(codes, n_states, cfg, seed=self.cfg.setup.seed)
        save_flow(self.path('flow.pt'), model, compression)

    def train_predictor(self):
        _, compression = load_flow(self.path('flow.pt'))
        codes, n_fsq = self.corpus_tokens()
        if compression is not None:
            codes = compression.compress(codes)
        n_states = compression.n_states if compression is not None else n_fsq
        labels = [self.grammar.order_of_sequence(seq) for seq in self.read_corpus()]
        model = train_predictor(codes, labels, 'categorical', n_states, self.cfg.predictors, name='order',
                                seed=self.cfg.setup.seed)
        save_predictor(self.path('predictor_order.pt'), model)

    # ---- Data ---- #

    def problem(self):
        name = self.args.problem or self.cfg.problem.name
        if name is None:
            raise ConfigError('No benchmark problem given (--problem or problem.name).')
        return get_problem(name)

    def generate_dataset(self):
        problem = self.problem()
        data = generate_dataset(problem, np.random.default_rng(self.cfg.setup.seed), self.cfg.problem.noise_level)
        write_dataset(data, self.path('dataset.csv'), problem.ground_truth.input_values(data.t))

    def load_data(self):
        """Dataset and initial conditions for discovery."""
        pcfg = self.cfg.problem
        problem = self.problem() if (self.args.problem or pcfg.name) else None
        if pcfg.dataset is not None:
            data = read_dataset(pcfg.dataset)
        elif problem is not None:
            data = generate_dataset(problem, np.random.default_rng(self.cfg.setup.seed), pcfg.noise_level)
        else:
            raise ConfigError('Discovery needs problem.dataset or a benchmark problem.')
        ics = pcfg.ics if pcfg.ics is not None else (list(problem.ics) if problem is not None else None)
        return data, ics, problem

    # ---- Discovery and reports ---- #

    def discover(self):
        data, ics, problem = self.load_data()
        order = self.grammar.explicit_order or 2
        data = approximate_modes(data, ics, order=order, epochs=self.cfg.problem.surrogate_epochs,
                                 seed=self.cfg.setup.seed)
        gqae = load_gqae(self.path('gqae.pt'), self.grammar)
        denoiser, compression = load_flow(self.path('flow.pt'))
        static = []
        if self.cfg.discovery.order_target is not None:
            static.append((load_predictor(self.path('predictor_order.pt')), self.cfg.discovery.order_target))

        start = time.perf_counter()
        run = run_discovery(data, self.grammar, gqae, denoiser, static, self.cfg, ics=ics, compression=compression,
                            out_dir=self.path('discovery'))
        seconds = time.perf_counter() - start if self.cfg.report.timing else None
        if run.best is None:
            logger.warning('Discovery produced no candidate')
            return
        logger.info(f'Best candidate {run.best.expression} (L_IC {run.best.l_ic:.4g})')
        if problem is not None:
            frame = report(run, problem, out_dir=self.out, seconds=seconds,
                           trajectory_samples=self.cfg.report.trajectory_samples)
            print(report_text(frame, run.iteration), end='')

    def evaluate(self):
        if not self.args.equation:
            raise ConfigError('evaluate needs --equation.')
        frame = evaluate_candidate(self.args.equation, self.problem())
        print(report_text(frame), end='')

    def report(self):
        best_path = os.path.join(self.args.run or self.path('discovery'), 'best.yaml')
        if not os.path.exists(best_path):
            raise DataError('No discovery result at {}.'.format(best_path))
        frame, clean, solved = score_candidate(load_best(best_path), self.problem())
        write_report(frame, clean, solved, self.out, trajectory_samples=self.cfg.report.trajectory_samples)
        print(report_text(frame), end='')

    def __call__(self, command):
        return getattr(self, command.replace('-', '_'))()


def build_parser():
    parser = argparse.ArgumentParser(prog='lgf', description='Latent grammar flow ODE discovery.')
    parser.add_argument('command', choices=COMMANDS)
    parser.add_argument('--config', help='YAML (or JSON) run configuration.')
    parser.add_argument('--seed', type=int, help='Overrides setup.seed.')
    parser.add_argument('--out', help='Run directory, overrides setup.out.')
    parser.add_argument('--threads', type=int, help='Worker processes for constant fitting.')
    parser.add_argument('--problem', help='Benchmark problem name, overrides problem.name.')
    parser.add_argument('--equation', help='Equation text for evaluate, e.g. "u\' = -0.8*u".')
    parser.add_argument('--run', help='Discovery directory for report (default <out>/discovery).')
    parser.add_argument('-v', '--verbose', action='store_true')
    return parser


def main(args=None):
    args = build_parser().parse_args(args)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='[%(levelname)s] [%(name)s]: %(message)s')
    try:
        LGFRunner(args)(args.command)
    except LGFError as e:
        logger.error(f'{type(e).__name__}: {e}')
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
