import logging

import numpy as np
import torch
import torch.nn as nn
from torch.utils.data import DataLoader, Dataset

from lgf_demos.utils.behaviour import EPS_LOG, behavioural_loss
from lgf_demos.utils.config import FSQConfig
from lgf_demos.utils.errors import DataError, DecodeOverflow, GrammarError, ShapeError
from lgf_demos.utils.networks import ACTIVATIONS, BiGRU, ConvStack, ResidualBlock, weights_init
from lgf_demos.utils.training import fit, load_checkpoint, save_checkpoint

logger = logging.getLogger("lgf.gqae")


def quantise(z_e, cfg):
    """
    Finite scalar quantisation: clamp to [-1, 1], round to the nearest of
    n_fsq equally spaced levels. The backward pass treats the quantiser as the
    identity (straight-through).
    ---
    Params:
        z_e [tensor] -- ... x d x n_cha continuous latent.
        cfg [FSQConfig]

    Returns:
        z_q [tensor] -- quantised latent, same shape.
        code [LongTensor] -- level indices in {0, ..., n_fsq - 1}.
    """
    z_e = torch.as_tensor(z_e)
    bounded = torch.clamp(z_e, -1., 1.)
    code = torch.round((bounded + 1.) / 2. * (cfg.n_fsq - 1))
    levels = code / (cfg.n_fsq - 1) * 2. - 1.
    z_q = z_e + (levels - z_e).detach()
    return z_q, code.long()


def dequantise(code, cfg, dtype=torch.float32):
    return torch.as_tensor(code).to(dtype) / (cfg.n_fsq - 1) * 2. - 1.


class GQAE(nn.Module):
    """
    Grammar quantisation autoencoder.
    ---
    encoder: 3 conv layers (kernels 7, 8, 9, ReLU) over the rule sequence,
             projection to n_res, 2 residual layers, tanh head to d x n_cha
    FSQ:     quantise()
    decoder: projection of z_q, repeated over N_max steps, 2 bidirectional
             GRU layers (hidden 80) with ELU, linear rule logits
    """

    def __init__(self, n_rules, N_max, fsq, n_res=60, conv_channels=16, gru_hidden=80):
        super(GQAE, self).__init__()
        self.n_rules = n_rules
        self.N_max = N_max
        self.fsq = fsq
        self.arch = {'n_rules': n_rules, 'N_max': N_max, 'n_fsq': fsq.n_fsq, 'd': fsq.d, 'n_cha': fsq.n_cha,
                     'n_res': n_res, 'conv_channels': conv_channels, 'gru_hidden': gru_hidden}

        self.convs = ConvStack(n_rules, conv_channels, kernel_sizes=(7, 8, 9), activation='relu')
        self.enc_in = nn.Linear(conv_channels * N_max, n_res)
        self.enc_res = nn.Sequential(ResidualBlock(n_res), ResidualBlock(n_res))
        self.enc_out = nn.Linear(n_res, fsq.d * fsq.n_cha)

        self.dec_in = nn.Linear(fsq.d * fsq.n_cha, n_res)
        self.dec_act = ACTIVATIONS['elu']()
        self.gru = BiGRU(n_res, hidden=gru_hidden, num_layers=2, activation='elu')
        self.dec_out = nn.Linear(self.gru.output_dim, n_rules)

        for module in (self.enc_in, self.enc_out):
            module.apply(weights_init('relu'))
        for module in (self.dec_in, self.dec_out):
            module.apply(weights_init('elu'))

    def encode(self, X):
        X = torch.as_tensor(X, dtype=torch.float32)
        if X.dim() != 3 or X.shape[1:] != (self.N_max, self.n_rules):
            raise ShapeError('Expected B x {} x {} one-hot input, got {}.'.format(
                self.N_max, self.n_rules, tuple(X.shape)))
        h = self.convs(X.transpose(1, 2)).flatten(start_dim=1)
        h = self.enc_res(torch.relu(self.enc_in(h)))
        return torch.tanh(self.enc_out(h)).view(-1, self.fsq.d, self.fsq.n_cha)

    def quantise(self, z_e):
        return quantise(z_e, self.fsq)

    def decode(self, z_q):
        z_q = torch.as_tensor(z_q, dtype=torch.float32)
        if z_q.shape[-2:] != (self.fsq.d, self.fsq.n_cha):
            raise ShapeError('Expected ... x {} x {} latent, got {}.'.format(
                self.fsq.d, self.fsq.n_cha, tuple(z_q.shape)))
        h = self.dec_act(self.dec_in(z_q.reshape(-1, self.fsq.d * self.fsq.n_cha)))
        h = h.unsqueeze(1).expand(-1, self.N_max, -1)
        return self.dec_out(self.gru(h))

    def forward(self, X):
        z_e = self.encode(X)
        z_q, code = self.quantise(z_e)
        return self.decode(z_q), z_e, code

    # ---- numpy-level helpers used by training, flow and discovery ---- #

    def encode_codes(self, X, batch_size=1024):
        """LatentCode matrices (B x d x n_cha integer levels) for one-hot inputs."""
        self.eval()
        codes = []
        with torch.no_grad():
            for start in range(0, len(X), batch_size):
                _, code = self.quantise(self.encode(X[start:start + batch_size]))
                codes.append(code.numpy())
        return np.concatenate(codes) if codes else np.zeros((0, self.fsq.d, self.fsq.n_cha), dtype=np.int64)

    def decode_codes(self, codes):
        """Rule logits (B x N_max x n_r) for LatentCode matrices."""
        self.eval()
        with torch.no_grad():
            return self.decode(dequantise(codes, self.fsq)).numpy().astype(np.float64)


class GQAEDataset(Dataset):
    """One-hot rule matrices with the behaviour signatures of their skeletons."""

    def __init__(self, X, mu, sigma):
        if not len(X) == len(mu) == len(sigma):
            raise DataError('One-hot matrices and signatures differ in number.')
        self.X = torch.as_tensor(np.asarray(X), dtype=torch.float32)
        self.mu = torch.as_tensor(np.asarray(mu), dtype=torch.float64)
        self.sigma = torch.as_tensor(np.asarray(sigma), dtype=torch.float64)

    def __len__(self):
        return self.X.shape[0]

    def __getitem__(self, idx):
        if torch.is_tensor(idx):
            idx = idx.tolist()
        return {'X': self.X[idx], 'mu': self.mu[idx], 'sigma': self.sigma[idx]}


def pair_distances(mu, sigma, perm):
    """Log mean squared signature distance between each sample and its partner."""
    msd = ((mu - mu[perm]) ** 2 + (sigma - sigma[perm]) ** 2).mean(dim=1)
    return torch.log(torch.clamp(msd, min=EPS_LOG))


def derangement(n):
    """Random cyclic pairing with no sample paired to itself."""
    order = torch.randperm(n)
    perm = torch.empty(n, dtype=torch.long)
    perm[order] = order.roll(-1)
    return perm


def gqae_loss(beta_w, lambda_w):
    bce = nn.BCEWithLogitsLoss()

    def _loss(model, batch):
        logits, z_e, _ = model(batch['X'])
        loss = bce(logits, batch['X'])
        if beta_w > 0 and len(batch['X']) > 1:
            perm = derangement(len(batch['X']))
            d_w = pair_distances(batch['mu'], batch['sigma'], perm).to(z_e.dtype)
            loss = loss + beta_w * behavioural_loss(z_e, z_e[perm], d_w, lambda_w)
        return loss
    return _loss


def train_gqae(dataset, cfg, beta_w=None, batch_size=None, target_loss=None, seed=0):
    """
    Train a GQAE on L_BCE + beta_w * L_W with Adam and the plateau scheduler.
    ---
    Params:
        dataset [GQAEDataset] -- one-hot matrices and cached signatures.
        cfg [GQAEConfig]
        beta_w [float] -- behavioural loss weight, cfg.beta_w when None.
        batch_size [int] -- overrides cfg.batch_size and lifts the minimum size check.

    Returns:
        model [GQAE] -- the checkpoint with the best monitored loss.
    """
    beta_w = cfg.beta_w if beta_w is None else beta_w
    if batch_size is None:
        batch_size = cfg.batch_size
        if len(dataset) < batch_size:
            raise DataError('Dataset of {} samples is smaller than one batch of {}.'.format(len(dataset), batch_size))
    N, N_max, n_rules = dataset.X.shape

    generator = torch.Generator().manual_seed(seed)
    n_val = int(cfg.val_fraction * N)
    order = torch.randperm(N, generator=generator)
    train_set = torch.utils.data.Subset(dataset, order[n_val:].tolist())
    val_set = torch.utils.data.Subset(dataset, order[:n_val].tolist())
    logger.info(f'GQAE training on {len(train_set)} skeletons, validating on {len(val_set)}')

    torch.manual_seed(seed)
    model = GQAE(n_rules, N_max, cfg.fsq, n_res=cfg.n_res, conv_channels=cfg.conv_channels,
                 gru_hidden=cfg.gru_hidden)
    train_loader = DataLoader(train_set, batch_size=batch_size, shuffle=True, generator=generator)
    val_loader = DataLoader(val_set, batch_size=batch_size) if n_val > 0 else None
    fit(model, gqae_loss(beta_w, cfg.lambda_w), train_loader, val_loader, epochs=cfg.epochs,
        learning_rate=cfg.learning_rate, target_loss=target_loss, desc='gqae',
        scheduler={'factor': cfg.lr_factor, 'patience': cfg.lr_patience, 'min_lr': cfg.min_lr})
    return model


def reconstruction_accuracy(model, grammar, sequences, N_max):
    """Fraction of derivations reproduced exactly by argmax masked decoding."""
    if not sequences:
        return 0.
    X = np.stack([grammar.encode_one_hot(seq, N_max) for seq in sequences])
    logits = model.decode_codes(model.encode_codes(X))
    hits = 0
    for seq, row in zip(sequences, logits):
        try:
            hits += grammar.decode_argmax(row) == tuple(seq)
        except DecodeOverflow:
            pass
    return hits / len(sequences)


def save_gqae(path, model, grammar):
    save_checkpoint(path, model, {'kind': 'gqae', 'grammar': grammar.digest(), **model.arch})


def load_gqae(path, grammar=None):
    checkpoint = load_checkpoint(path)
    meta = checkpoint['metadata']
    if grammar is not None and meta['grammar'] != grammar.digest():
        raise GrammarError('Checkpoint {} was trained on a different grammar.'.format(path))
    fsq = FSQConfig(n_fsq=meta['n_fsq'], d=meta['d'], n_cha=meta['n_cha'])
    model = GQAE(meta['n_rules'], meta['N_max'], fsq, n_res=meta['n_res'],
                 conv_channels=meta['conv_channels'], gru_hidden=meta['gru_hidden'])
    model.load_state_dict(checkpoint['state_dict'])
    model.eval()
    return model
