import math
from collections import Counter

import numpy as np
import pytest
import torch

from lgf_demos.learners.discrete_flow import (Denoiser, FlowState, LevelCompression, corrupt, guide_rates, load_flow,
                                              one_hot, rate, sample, save_flow, train_denoiser)
from lgf_demos.learners.predictors import train_predictor
from lgf_demos.utils.config import FlowConfig, PredictorConfig, SamplerConfig
from lgf_demos.utils.errors import DataError, PredictorShapeError, TimeOverflow

S = 3
L = 4


class ConstantPredictor(object):
    """log p(y | x, t) that ignores x."""
    n_shape = L
    n_states = S
    name = 'constant'

    def log_prob_tokens(self, tokens, t, target):
        return torch.full((tokens.shape[0],), -1.5)

    def log_prob_one_hot(self, x_ohe, t, target):
        return (x_ohe * 0.).sum(dim=(1, 2)) - 1.5


class ZeroLovingPredictor(ConstantPredictor):
    """log p(y | x, t) grows by weight for every token equal to 0."""
    name = 'zeros'

    def __init__(self, weight=2., n_shape=L):
        self.weight = weight
        self.n_shape = n_shape

    def log_prob_tokens(self, tokens, t, target):
        return self.weight * (tokens == 0).float().sum(dim=1)

    def log_prob_one_hot(self, x_ohe, t, target):
        return self.weight * x_ohe[:, :, 0].sum(dim=1)


@pytest.fixture
def denoiser():
    torch.manual_seed(0)
    return Denoiser(L, S, nb_layers=1, hidden=16, dropout=0.)


def test_one_hot_has_mask_column():
    ohe = one_hot(torch.tensor([[0, 3, 2]]), S)
    assert ohe.shape == (1, 3, 4)
    assert ohe[0, 1, 3] == 1. and ohe.sum() == 3.


def test_corrupt_end_points(rng):
    x1 = np.array([[0, 1, 2, 1], [2, 2, 0, 0]])
    assert torch.all(corrupt(x1, 0., S, rng).tokens == S)
    assert torch.equal(corrupt(x1, 1., S, rng).tokens, torch.as_tensor(x1))
    state = corrupt(x1, 0.5, S, rng)
    kept = ~state.masked(S)
    assert torch.equal(state.tokens[kept], torch.as_tensor(x1)[kept])


def test_rate_structure(denoiser):
    cfg = SamplerConfig(dt=0.01, eta=2.)
    state = FlowState(torch.tensor([[3, 0, 3, 2]]), 0.5)
    R = rate(state, denoiser, cfg)
    assert R.shape == (1, L, S + 1)
    torch.testing.assert_close(R.sum(dim=-1), torch.zeros(1, L), atol=1e-5, rtol=0.)
    # masked positions unmask at total rate (1 + eta t) / (1 - t)
    assert R[0, 0, S].item() == pytest.approx(-4., rel=1e-5)
    assert R[0, 2, :S].sum().item() == pytest.approx(4., rel=1e-5)
    # unmasked positions only remask, at rate eta
    assert R[0, 1].tolist() == pytest.approx([-2., 0., 0., 2.])
    assert R[0, 3].tolist() == pytest.approx([0., 0., -2., 2.])


def test_no_remasking_without_eta(denoiser):
    R = rate(FlowState(torch.tensor([[0, 1, 2, 3]]), 0.3), denoiser, SamplerConfig(eta=0.))
    assert torch.all(R[0, :3, S] == 0.)


def test_time_overflow(denoiser):
    with pytest.raises(TimeOverflow):
        rate(FlowState(torch.tensor([[3, 3, 3, 3]]), 0.999), denoiser, SamplerConfig(dt=0.01))


@pytest.mark.parametrize('method', ['exact', 'taylor'])
def test_constant_predictor_leaves_rates_unchanged(denoiser, method):
    state = FlowState(torch.tensor([[3, 0, 3, 2], [1, 3, 3, 3]]), 0.4)
    R = rate(state, denoiser, SamplerConfig(eta=1.))
    guided = guide_rates(R, state, [ConstantPredictor()], [0], method=method)
    torch.testing.assert_close(guided, R)
    assert guide_rates(R, state, [], []) is R


@pytest.mark.parametrize('method', ['exact', 'taylor'])
def test_guidance_tilts_rates(denoiser, method):
    state = FlowState(torch.tensor([[3, 0, 3, 2]]), 0.4)
    R = rate(state, denoiser, SamplerConfig(eta=1.))
    guided = guide_rates(R, state, [ZeroLovingPredictor(2.)], [0], method=method)
    torch.testing.assert_close(guided[0, 0, 0], R[0, 0, 0] * math.exp(2.))
    torch.testing.assert_close(guided[0, 0, 1], R[0, 0, 1])
    # leaving a zero token costs the same factor
    torch.testing.assert_close(guided[0, 1, S], R[0, 1, S] * math.exp(-2.))
    torch.testing.assert_close(guided.sum(dim=-1), torch.zeros(1, L), atol=1e-5, rtol=0.)


def test_guidance_checks_predictor_shape(denoiser):
    state = FlowState(torch.tensor([[3, 3, 3, 3]]), 0.)
    R = rate(state, denoiser, SamplerConfig())
    with pytest.raises(PredictorShapeError):
        guide_rates(R, state, [ZeroLovingPredictor(n_shape=5)], [0])
    with pytest.raises(PredictorShapeError):
        guide_rates(R, state, [ConstantPredictor()], [])


def test_sample_shapes_and_determinism(denoiser):
    cfg = SamplerConfig(dt=0.1, eta=1.)
    a = sample(denoiser, [], [], 7, cfg, np.random.default_rng(3), batch_size=4)
    b = sample(denoiser, [], [], 7, cfg, np.random.default_rng(3), batch_size=4)
    assert a.shape == (7, L)
    assert a.min() >= 0 and a.max() < S
    np.testing.assert_array_equal(a, b)


def test_guided_sampling_moves_mass(denoiser):
    cfg = SamplerConfig(dt=0.05, eta=1.)
    plain = sample(denoiser, [], [], 200, cfg, np.random.default_rng(0))
    guided = sample(denoiser, [ZeroLovingPredictor(3.)], [0], 200, cfg, np.random.default_rng(0))
    assert np.mean(guided == 0) > max(np.mean(plain == 0), 0.8)


def test_train_denoiser_learns_marginals():
    rng = np.random.default_rng(0)
    codes = np.where(rng.random((256, L)) < 0.9, 0, 2)
    cfg = FlowConfig(nb_layers=1, hidden=32, dropout=0., epochs=60, batch_size=64, learning_rate=1e-2)
    model = train_denoiser(codes, S, cfg, seed=0)
    with torch.no_grad():
        p = torch.softmax(model(torch.full((1, L), S), torch.zeros(1)), dim=-1)
    assert torch.all(p[0, :, 0] > 0.6)
    assert torch.all(p[0, :, 1] < 0.2)


def test_train_denoiser_rejects_bad_codes():
    cfg = FlowConfig(epochs=1)
    with pytest.raises(DataError):
        train_denoiser([[0, 1], [0, 5]], S, cfg)
    with pytest.raises(DataError):
        train_denoiser([[0, 1], [0]], S, cfg)
    with pytest.raises(DataError):
        train_denoiser(np.zeros((0, L)), S, cfg)


def test_level_compression():
    codes = np.array([[0, 4], [0, 4], [1, 3], [2, 3], [2, 0], [4, 1]])
    compression = LevelCompression.fit(codes, 5, 2)
    assert compression.n_states == 2
    # position 0: 0 and 2 are used twice; position 1: 3 and 4 twice
    np.testing.assert_array_equal(compression.kept_levels, [[0, 2], [3, 4]])
    tokens = compression.compress(codes)
    assert tokens.min() >= 0 and tokens.max() < 2
    np.testing.assert_array_equal(compression.expand(tokens)[:4], [[0, 4], [0, 4], [0, 3], [2, 3]])
    # level 1 is equally far from 0 and 2 and goes to the lower one
    assert compression.table[0, 1] == 0
    assert compression.coverage(codes) == pytest.approx(3 / 6)
    with pytest.raises(DataError):
        LevelCompression.fit(codes, 5, 6)


def test_flow_checkpoint_round_trip(tmp_path, denoiser):
    compression = LevelCompression([[0, 2, 4]] * L, 5)
    save_flow(tmp_path / 'flow.pt', denoiser, compression)
    model, loaded = load_flow(tmp_path / 'flow.pt')
    tokens = torch.tensor([[0, 3, 1, 2]])
    torch.testing.assert_close(model(tokens, torch.tensor([0.3])), denoiser(tokens, torch.tensor([0.3])))
    np.testing.assert_array_equal(loaded.kept_levels, compression.kept_levels)
    save_flow(tmp_path / 'plain.pt', denoiser)
    assert load_flow(tmp_path / 'plain.pt')[1] is None


def test_corrupt_keep_rate(rng):
    state = corrupt(np.zeros((1000, 100), dtype=np.int64), 0.3, S, rng)
    assert (~state.masked(S)).float().mean().item() == pytest.approx(0.3, abs=0.01)


def test_unmask_rate_without_remasking(denoiser):
    state = FlowState(torch.tensor([[3, 0, 3, 2]]), 0.3)
    R = rate(state, denoiser, SamplerConfig(eta=0.))
    with torch.no_grad():
        p = torch.softmax(denoiser(state.tokens, torch.full((1,), 0.3)), dim=-1)
    for pos in (0, 2):
        torch.testing.assert_close(R[0, pos, :S], p[0, pos] / 0.7)
        assert R[0, pos, S].item() == pytest.approx(-1. / 0.7, rel=1e-5)
    assert torch.all(R[0, 1] == 0.) and torch.all(R[0, 3] == 0.)


def test_denoiser_overfits_single_code():
    code = [0, 2, 1, 2]
    cfg = FlowConfig(nb_layers=1, hidden=32, dropout=0., epochs=300, batch_size=16, learning_rate=1e-2)
    model = train_denoiser(np.tile(code, (64, 1)), S, cfg, seed=0)
    states = torch.tensor([[S, S, S, S], [0, S, 1, S], [S, 2, S, 2]])
    with torch.no_grad():
        p = torch.softmax(model(states, torch.tensor([0., 0.5, 0.5])), dim=-1)
    target = torch.as_tensor(code).expand(3, L)
    hits = p.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    assert torch.all(hits[states == S] > 0.99)


def _total_variation(samples, corpus):
    """TV distance between the empirical code distribution and the corpus frequencies."""
    observed = Counter(map(tuple, samples))
    expected = Counter(map(tuple, corpus))
    keys = set(observed) | set(expected)
    return 0.5 * sum(abs(observed[k] / len(samples) - expected[k] / len(corpus)) for k in keys)


FLOW_CFG = FlowConfig(nb_layers=2, hidden=64, dropout=0., epochs=200, batch_size=64, learning_rate=1e-3)


@pytest.mark.slow
def test_unguided_sampling_matches_two_code_corpus():
    corpus = np.array([[0, 1, 2, 0]] * 256 + [[2, 2, 1, 1]] * 256)
    model = train_denoiser(corpus, S, FLOW_CFG, seed=0)
    with torch.no_grad():
        p = torch.softmax(model(torch.full((1, L), S), torch.zeros(1)), dim=-1)[0]
    # posterior of the fully masked state is the per-position mixture
    mixture = torch.as_tensor(np.stack([np.bincount(corpus[:, k], minlength=S) / len(corpus) for k in range(L)]),
                              dtype=p.dtype)
    assert (0.5 * (p - mixture).abs().sum(dim=-1)).max().item() < 0.05
    samples = sample(model, [], [], 10000, SamplerConfig(dt=0.005, eta=1.), np.random.default_rng(0))
    assert _total_variation(samples, corpus) < 0.05


@pytest.mark.slow
def test_class_guidance_reaches_target_class():
    stable = [[0, 0, 1, 1], [0, 1, 2, 2]]
    unstable = [[2, 2, 0, 0], [2, 1, 1, 0]]
    corpus = np.array((stable + unstable) * 128)
    labels = ['stable' if list(code) in stable else 'unstable' for code in corpus]
    model = train_denoiser(corpus, S, FLOW_CFG, seed=0)
    predictor = train_predictor(corpus, labels, 'categorical', S,
                                PredictorConfig(nb_layers=1, hidden=64, dropout=0., epochs=100, batch_size=64,
                                                learning_rate=1e-2), name='stability')
    cfg = SamplerConfig(dt=0.01, eta=1.)

    def stable_fraction(predictors, targets):
        samples = sample(model, predictors, targets, 2000, cfg, np.random.default_rng(1))
        return np.mean([list(code) in stable for code in samples])

    assert 0.35 < stable_fraction([], []) < 0.65
    assert stable_fraction([predictor], ['stable']) >= 0.9
