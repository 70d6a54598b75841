import itertools

import numpy as np
import pytest
import torch

from lgf_demos.learners.gqae import (GQAE, GQAEDataset, dequantise, derangement, load_gqae, pair_distances, quantise,
                                     reconstruction_accuracy, save_gqae, train_gqae)
from lgf_demos.utils.behaviour import EPS_LOG, SignatureCache, wasserstein_distance
from lgf_demos.utils.config import FSQConfig, GQAEConfig
from lgf_demos.utils.errors import DataError, GrammarError, ShapeError
from lgf_demos.utils.expression import candidate_from_skeleton

SMALL = dict(d=4, n_fsq=5, n_cha=4, n_res=16, conv_channels=4, gru_hidden=8, n_draws=5)


def _corpus(grammar, n, seed=0, N_max=25, n_draws=5):
    rng = np.random.default_rng(seed)
    seen = []
    for _ in range(50 * n):
        if len(seen) == n:
            break
        seq = grammar.random_derivation(rng, N_max)
        if seq not in seen:
            seen.append(seq)
    cache = SignatureCache(seed=seed, n_draws=n_draws)
    sigs = [cache.get(s, candidate_from_skeleton(grammar.realize(s), grammar.explicit_order)) for s in seen]
    X = np.stack([grammar.encode_one_hot(s, N_max) for s in seen])
    return seen, GQAEDataset(X, [s.mu for s in sigs], [s.sigma for s in sigs]), sigs


def test_quantise_bounds_and_idempotence():
    cfg = FSQConfig(n_fsq=5, d=3, n_cha=4)
    z_e = torch.randn(100, 3, 4) * 2
    z_q, code = quantise(z_e, cfg)
    assert code.min() >= 0 and code.max() <= 4
    z_qq, code2 = quantise(z_q, cfg)
    assert torch.equal(code, code2)
    torch.testing.assert_close(z_qq, z_q)
    torch.testing.assert_close(z_q, dequantise(code, cfg))


def test_quantise_straight_through():
    z_e = torch.randn(2, 3, 4, requires_grad=True)
    z_q, _ = quantise(z_e, FSQConfig(n_fsq=7, d=3, n_cha=4))
    z_q.sum().backward()
    assert torch.equal(z_e.grad, torch.ones_like(z_e))


def test_codebook_enumeration():
    cfg = FSQConfig(n_fsq=3, d=1, n_cha=3)
    assert cfg.codebook_size == 27
    reached = set()
    for levels in itertools.product(range(3), repeat=3):
        code = torch.tensor([[list(levels)]])
        _, back = quantise(dequantise(code, cfg), cfg)
        reached.add(tuple(back.flatten().tolist()))
    assert len(reached) == 27


def test_gqae_shapes(toy_grammar):
    cfg = GQAEConfig(**SMALL)
    model = GQAE(toy_grammar.n_rules, 25, cfg.fsq, n_res=cfg.n_res, conv_channels=cfg.conv_channels,
                 gru_hidden=cfg.gru_hidden)
    X = torch.as_tensor(np.stack([toy_grammar.encode_one_hot((2, 3, 5), 25)] * 3))
    logits, z_e, code = model(X)
    assert logits.shape == (3, 25, 14)
    assert z_e.shape == (3, 4, 4) and code.shape == (3, 4, 4)
    assert torch.all(z_e.abs() <= 1.)
    codes = model.encode_codes(X.numpy())
    assert codes.shape == (3, 4, 4) and codes.dtype == np.int64
    assert model.decode_codes(codes).shape == (3, 25, 14)
    with pytest.raises(ShapeError):
        model.encode(torch.zeros(3, 24, 14))
    with pytest.raises(ShapeError):
        model.decode(torch.zeros(3, 5, 4))


def test_derangement_has_no_fixed_points():
    torch.manual_seed(0)
    for n in (2, 3, 10, 64):
        perm = derangement(n)
        assert sorted(perm.tolist()) == list(range(n))
        assert torch.all(perm != torch.arange(n))


def test_pair_distances_match_signature_distance(toy_grammar):
    _, dataset, sigs = _corpus(toy_grammar, 6)
    perm = derangement(6)
    d = pair_distances(dataset.mu, dataset.sigma, perm)
    for i in range(6):
        assert d[i].item() == pytest.approx(wasserstein_distance(sigs[i], sigs[perm[i]]), rel=1e-9, abs=1e-9)
    same = pair_distances(dataset.mu, dataset.sigma, torch.arange(6))
    torch.testing.assert_close(same, torch.full((6,), np.log(EPS_LOG), dtype=torch.float64))


def test_dataset_checks():
    with pytest.raises(DataError):
        GQAEDataset(np.zeros((3, 2, 2)), np.zeros((2, 5)), np.zeros((3, 5)))


def test_training_on_small_corpus(toy_grammar):
    sequences, dataset, _ = _corpus(toy_grammar, 40)
    cfg = GQAEConfig(epochs=1, batch_size=64, **SMALL)
    with pytest.raises(DataError):
        train_gqae(dataset, cfg)
    cfg = GQAEConfig(epochs=150, batch_size=16, learning_rate=3e-3, **SMALL)
    model = train_gqae(dataset, cfg, seed=0)
    acc = reconstruction_accuracy(model, toy_grammar, sequences, 25)
    assert 0. <= acc <= 1.
    assert reconstruction_accuracy(model, toy_grammar, [], 25) == 0.


def test_checkpoint_round_trip(tmp_path, toy_grammar, second_order_grammar):
    cfg = GQAEConfig(**SMALL)
    model = GQAE(toy_grammar.n_rules, 25, cfg.fsq, n_res=cfg.n_res, conv_channels=cfg.conv_channels,
                 gru_hidden=cfg.gru_hidden)
    save_gqae(tmp_path / 'gqae.pt', model, toy_grammar)
    loaded = load_gqae(tmp_path / 'gqae.pt', toy_grammar)
    codes = np.random.default_rng(0).integers(0, 5, size=(4, 4, 4))
    np.testing.assert_allclose(loaded.decode_codes(codes), model.decode_codes(codes))
    with pytest.raises(GrammarError):
        load_gqae(tmp_path / 'gqae.pt', second_order_grammar)


@pytest.mark.slow
def test_single_sample_overfit(toy_grammar):
    sequences, dataset, _ = _corpus(toy_grammar, 1)
    cfg = GQAEConfig(epochs=2000, **SMALL)
    model = train_gqae(dataset, cfg, beta_w=0., batch_size=1, target_loss=1e-2)
    assert reconstruction_accuracy(model, toy_grammar, sequences, 25) == 1.


@pytest.mark.slow
def test_desk_scale_reconstruction(toy_grammar):
    sequences, dataset, _ = _corpus(toy_grammar, 500, N_max=25, n_draws=25)
    cfg = GQAEConfig(epochs=2000, batch_size=128)
    model = train_gqae(dataset, cfg, seed=0)
    order = torch.randperm(len(sequences), generator=torch.Generator().manual_seed(0))
    held_out = [sequences[i] for i in order[:int(cfg.val_fraction * len(sequences))].tolist()]
    assert reconstruction_accuracy(model, toy_grammar, held_out, 25) >= 0.9


@pytest.mark.slow
@pytest.mark.parametrize('seed', [0, 1, 2])
def test_behaviourally_near_skeletons_are_close_in_latent_space(toy_grammar, seed):
    sequences, dataset, sigs = _corpus(toy_grammar, 300, seed=seed, n_draws=25)
    model = train_gqae(dataset, GQAEConfig(epochs=1000, batch_size=128, beta_w=1e-4), seed=seed)
    with torch.no_grad():
        z = model.encode(dataset.X).flatten(start_dim=1)
    rng = np.random.default_rng(seed)
    pairs = rng.integers(len(sequences), size=(4000, 2))
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    d_w = np.array([wasserstein_distance(sigs[i], sigs[j]) for i, j in pairs])
    d_z = torch.norm(z[pairs[:, 0]] - z[pairs[:, 1]], dim=1).numpy()
    near = d_w <= np.quantile(d_w, 0.1)
    far = d_w >= np.quantile(d_w, 0.9)
    assert d_z[near].mean() < d_z[far].mean()
