import os

import numpy as np
import pytest
import torch

from lgf_demos.learners.discrete_flow import Denoiser, sample
from lgf_demos.planners.discovery import (Discovery, DiscoveryRun, LedgerEntry, evaluate_labels, load_best,
                                          run_discovery, save_best)
from lgf_demos.utils.benchmarks import get_problem, solve_problem
from lgf_demos.utils.config import Config, DiscoveryConfig, FSQConfig, PredictorConfig, SamplerConfig, StabilityConfig
from lgf_demos.utils.errors import DataError, ExhaustedPopulation
from lgf_demos.utils.expression import candidate_from_skeleton, candidate_from_text


class LookupGQAE(object):
    """Decodes a code to a fixed derivation chosen by its first level."""

    def __init__(self, grammar, sequences, N_max=25):
        self.grammar = grammar
        self.sequences = sequences
        self.N_max = N_max
        self.fsq = FSQConfig(n_fsq=3, d=1, n_cha=2)

    def decode_codes(self, codes):
        codes = np.asarray(codes)
        return np.stack([10. * self.grammar.encode_one_hot(self.sequences[int(c[0, 0])], self.N_max)
                         for c in codes]).astype(np.float64)


class OverflowGQAE(LookupGQAE):
    def decode_codes(self, codes):
        logits = np.zeros((len(codes), self.N_max, self.grammar.n_rules))
        logits[:, :, 0] = 10.
        return logits


@pytest.fixture(scope='module')
def decay_data():
    return solve_problem(get_problem('exponential_decay'))


@pytest.fixture
def denoiser():
    torch.manual_seed(0)
    return Denoiser(2, 3, nb_layers=1, hidden=8, dropout=0.)


@pytest.fixture
def cfg():
    cfg = Config()
    cfg.discovery = DiscoveryConfig(n_pop=4, i_max_out=3, i_max_in1=40, i_max_in2=40, stability_target=['stable'])
    cfg.predictors = PredictorConfig(hidden=8, epochs=2, batch_size=16)
    return cfg


def _entry(rules, l_ic, iteration=1, duplicate=False):
    return LedgerEntry(iteration, 'C * u', rules, (0, 1), "u' + 0.8 * u = 0", (-0.8,), 0., 0., l_ic, 5, 'stable', 1,
                       duplicate)


def test_run_statistics_and_convergence():
    run = DiscoveryRun(top_k_size=2)
    for rules, l_ic in (((1,), 3.), ((2,), 1.), ((3,), 2.)):
        run.add(_entry(rules, l_ic))
    run.close_iteration()
    assert run.n_unique == [3] and run.top_k == [1.5]
    assert not run.converged(0.1, 0.01, 3)
    assert run.best.rules == (2,)

    run.add(_entry((1,), 3., iteration=2, duplicate=True))
    run.close_iteration()
    assert run.n_unique == [3, 3] and run.top_k == [1.5, 1.5]
    assert run.converged(0.1, 0.01, 3)
    assert run.history() == [3., 1., 2., 3.]
    assert len(run.to_frame(2)) == 1


def test_run_keeps_going_while_improving():
    run = DiscoveryRun(top_k_size=2)
    run.add(_entry((1,), 3.))
    run.add(_entry((2,), 1.))
    run.close_iteration()
    run.add(_entry((3,), 0.5, iteration=2))
    run.close_iteration()
    assert run.top_k == [2., 0.75]
    assert not run.converged(0.5, 0.01, 4)


def test_best_candidate_file_keeps_precision(tmp_path):
    cand = candidate_from_text("u'' + 0.123456789123*u' + 5*u = 2*sin(0.5*t)")
    entry = LedgerEntry(3, "u'' + C * u' + C * u", (1, 2), (0, 1), cand.to_text(True), cand.constants, 0.1, 0.01,
                        0.5, 15, 'stable', 2)
    save_best(tmp_path / 'best.yaml', entry, cand)
    loaded = load_best(tmp_path / 'best.yaml')
    assert loaded.constants == cand.constants
    assert loaded.to_text(True) == cand.to_text(True)


def test_evaluate_labels(decay_data):
    cfg = Config()
    cfg.stability = StabilityConfig(draw_low=0.1, draw_high=10.)
    fitted = candidate_from_skeleton('C * u', explicit_order=1).with_constants([-0.8])
    order, stability, fitted_stability, evaluation = evaluate_labels(fitted, decay_data, [2.], cfg)
    # every drawn u' = C*u grows, the fitted constant decays
    assert (order, stability, fitted_stability) == (1, 'unstable', 'stable')
    assert evaluation.l_sol < 1e-8
    cfg.stability = StabilityConfig(draw_low=-10., draw_high=-0.1)
    assert evaluate_labels(fitted, decay_data, [2.], cfg)[1] == 'stable'


def test_ledger_records_skeleton_stability(toy_grammar, decay_data, denoiser, cfg):
    cfg.stability = StabilityConfig(draw_low=0.1, draw_high=10.)
    rules = toy_grammar.parse('C*u')
    discovery = Discovery(decay_data, [2.], toy_grammar, LookupGQAE(toy_grammar, [rules]), denoiser, cfg)
    assert discovery.evaluate_population([(rules, (0, 0))], 1) == 1
    entry = discovery.run.entries[0]
    assert entry.constants == (pytest.approx(-0.8, abs=1e-2),)
    assert entry.stability == 'unstable' and entry.fitted_stability == 'stable'


def test_discovery_loop(tmp_path, toy_grammar, decay_data, denoiser, cfg):
    sequences = [toy_grammar.parse(text) for text in ('C*u', 'u', 'C*u + C*t')]
    out = tmp_path / 'discovery'
    run = run_discovery(decay_data, toy_grammar, LookupGQAE(toy_grammar, sequences), denoiser, [], cfg, ics=[2.],
                        out_dir=str(out))
    assert 1 <= run.iteration <= 3
    assert len(run.n_unique) == run.iteration
    assert set(run.unique_skeletons) <= set(sequences)
    seen = set()
    for entry in run.entries:
        assert entry.duplicate == (entry.rules in seen)
        seen.add(entry.rules)
    assert run.best.l_ic == min(e.l_ic for e in run.entries)

    assert os.path.exists(out / 'config.yaml')
    assert os.path.exists(out / 'ledger_01.csv') and os.path.exists(out / 'codes_01.csv')
    best = load_best(out / 'best.yaml')
    assert best.to_text(True) == run.best_candidate.to_text(True)


def test_population_overflow(toy_grammar, decay_data, denoiser, cfg):
    discovery = Discovery(decay_data, [2.], toy_grammar, OverflowGQAE(toy_grammar, []), denoiser, cfg)
    with pytest.raises(ExhaustedPopulation):
        discovery.sample_population(2)


def test_discovery_needs_initial_conditions(toy_grammar, decay_data, denoiser, cfg):
    with pytest.raises(DataError):
        run_discovery(decay_data, toy_grammar, LookupGQAE(toy_grammar, []), denoiser, [], cfg)


def test_discovery_is_reproducible(tmp_path, toy_grammar, decay_data, denoiser, cfg):
    sequences = [toy_grammar.parse(text) for text in ('C*u', 'u', 'C*u + C*t')]
    for name in ('first', 'second'):
        run_discovery(decay_data, toy_grammar, LookupGQAE(toy_grammar, sequences), denoiser, [], cfg, ics=[2.],
                      out_dir=str(tmp_path / name))
    files = sorted(os.listdir(tmp_path / 'first'))
    assert files == sorted(os.listdir(tmp_path / 'second'))
    assert 'best.yaml' in files and 'ledger_01.csv' in files
    for name in files:
        assert (tmp_path / 'first' / name).read_bytes() == (tmp_path / 'second' / name).read_bytes(), name


def test_objective_guidance_prefers_low_loss_codes(toy_grammar, decay_data, denoiser, cfg):
    cfg.discovery = DiscoveryConfig(n_pop=4, stability_target=None, objective_guidance=True)
    cfg.predictors = PredictorConfig(nb_layers=1, hidden=32, dropout=0., epochs=100, batch_size=64,
                                     learning_rate=1e-2)
    discovery = Discovery(decay_data, [2.], toy_grammar, LookupGQAE(toy_grammar, []), denoiser, cfg)
    # codes starting with level 0 fit the data, every other code misses by far
    codes = [(a, b) for a in range(3) for b in range(3)] * 20
    for ix, code in enumerate(codes):
        entry = _entry((ix,), 1e-3 if code[0] == 0 else 1e2)
        discovery.run.add(LedgerEntry(**{**entry.__dict__, 'code': code}))
    discovery.train_dynamic_predictors(1)

    predictors, targets = discovery._guidance()
    assert [p.name for p in predictors] == ['objective']
    assert targets == [pytest.approx(-3.)]
    sampler = SamplerConfig(dt=0.05, eta=1.)
    plain = sample(denoiser, [], [], 300, sampler, np.random.default_rng(0))
    guided = sample(denoiser, predictors, targets, 300, sampler, np.random.default_rng(0))

    def mean_label(tokens):
        return np.mean(np.where(tokens[:, 0] == 0, -3., 2.))
    assert np.mean(guided[:, 0] == 0) > np.mean(plain[:, 0] == 0) + 0.2
    assert mean_label(guided) < mean_label(plain)
