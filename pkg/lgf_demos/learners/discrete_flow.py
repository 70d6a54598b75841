import dataclasses
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, TensorDataset

from lgf_demos.utils.errors import ConfigError, DataError, PredictorShapeError, ShapeError, TimeOverflow
from lgf_demos.utils.networks import DNN
from lgf_demos.utils.training import fit, load_checkpoint, save_checkpoint

logger = logging.getLogger("lgf.flow")

# exp() of larger guidance log-ratios overflows float32
MAX_LOG_RATIO = 80.


@dataclass
class FlowState:
    """
    Partially masked token sequences at flow time t. Masked positions hold
    the token index n_states.
    """
    tokens: torch.Tensor
    t: float

    def __post_init__(self):
        if not torch.is_tensor(self.tokens):
            self.tokens = torch.as_tensor(np.asarray(self.tokens))
        self.tokens = self.tokens.long()
        if self.tokens.dim() == 1:
            self.tokens = self.tokens.unsqueeze(0)

    def masked(self, n_states):
        return self.tokens == n_states


def one_hot(tokens, n_states):
    """B x L tokens (MASK = n_states) to B x L x (n_states + 1) floats."""
    return F.one_hot(torch.as_tensor(tokens, dtype=torch.long), n_states + 1).float()


def token_features(x_ohe, t):
    """Flattened one-hot tokens with the flow time appended as the last feature."""
    t = torch.as_tensor(t, dtype=x_ohe.dtype)
    if t.dim() == 0:
        t = t.expand(x_ohe.shape[0])
    return torch.cat([x_ohe.flatten(start_dim=1), t.reshape(-1, 1)], dim=1)


def corrupt(x1, t, n_states, rng):
    """
    Masking interpolant: every token is kept with probability t and replaced
    by MASK otherwise.
    ---
    Params:
        x1 [array] -- L or B x L tokens in {0, ..., n_states - 1}.
        t [float or array] -- flow time, one per row when an array.
        rng [Generator] -- numpy random source.

    Returns:
        state [FlowState]
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.int64))
    t_col = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (x1.shape[0], 1))
    keep = rng.random(x1.shape) < t_col
    return FlowState(np.where(keep, x1, n_states), float(np.mean(t)))


def corrupt_batch(x1, n_states, t=None):
    """Torch version used during training; draws t ~ U(0, 1) per row when t is None."""
    if t is None:
        t = torch.rand(x1.shape[0])
    keep = torch.rand(x1.shape) < t.unsqueeze(1)
    return torch.where(keep, x1, torch.full_like(x1, n_states)), t, keep


class Denoiser(nn.Module):
    """
    p(x1 | x_t, t) for every position: a fully connected network over the
    one-hot state (with MASK) and the flow time.
    ---
    input B x n_shape tokens, B flow times
    output B x n_shape x n_states logits
    """

    def __init__(self, n_shape, n_states, nb_layers=2, hidden=512, dropout=0.2):
        super(Denoiser, self).__init__()
        self.n_shape = n_shape
        self.n_states = n_states
        self.arch = {'n_shape': n_shape, 'n_states': n_states, 'nb_layers': nb_layers,
                     'hidden': hidden, 'dropout': dropout}
        self.net = DNN(nb_layers, hidden, n_shape * (n_states + 1) + 1, n_shape * n_states,
                       activation='relu', dropout=dropout)

    def forward_one_hot(self, x_ohe, t):
        if x_ohe.shape[1:] != (self.n_shape, self.n_states + 1):
            raise ShapeError('Denoiser expects B x {} x {} one-hot states, got {}.'.format(
                self.n_shape, self.n_states + 1, tuple(x_ohe.shape)))
        return self.net(token_features(x_ohe, t)).view(-1, self.n_shape, self.n_states)

    def forward(self, tokens, t):
        return self.forward_one_hot(one_hot(tokens, self.n_states), t)


def denoiser_loss(model, batch):
    """Cross-entropy on masked positions only; zero when nothing is masked."""
    x1 = batch[0]
    xt, t, keep = corrupt_batch(x1, model.n_states)
    logits = model(xt, t)
    masked = ~keep
    if not masked.any():
        return logits.sum() * 0.
    return F.cross_entropy(logits[masked], x1[masked])


def _as_token_matrix(codes, n_states):
    try:
        X = np.asarray(codes, dtype=np.int64)
    except ValueError:
        raise DataError('Codes have inconsistent token lengths.')
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError('Expected a non-empty N x n_shape code matrix, got shape {}.'.format(X.shape))
    if X.min() < 0 or X.max() >= n_states:
        raise DataError('Code tokens must lie in [0, {}).'.format(n_states))
    return X


def train_denoiser(codes, n_states, cfg, seed=0, epochs=None, learning_rate=None):
    """
    Fit the denoiser on flattened latent codes with t ~ U(0, 1) per sample.
    ---
    Params:
        codes [array or list] -- N x n_shape tokens.
        n_states [int] -- alphabet size S.
        cfg [FlowConfig]

    Returns:
        model [Denoiser]
    """
    X = _as_token_matrix(codes, n_states)
    torch.manual_seed(seed)
    model = Denoiser(X.shape[1], n_states, nb_layers=cfg.nb_layers, hidden=cfg.hidden, dropout=cfg.dropout)
    generator = torch.Generator().manual_seed(seed)
    loader = DataLoader(TensorDataset(torch.as_tensor(X)), batch_size=cfg.batch_size, shuffle=True,
                        generator=generator)
    logger.info(f'Denoiser training on {len(X)} codes of {X.shape[1]} tokens, S = {n_states}')
    fit(model, denoiser_loss, loader, epochs=cfg.epochs if epochs is None else epochs,
        learning_rate=cfg.learning_rate if learning_rate is None else learning_rate, desc='flow')
    return model


def _with_diagonal(rates, tokens):
    """Set each row's entry at the current token to minus the sum of the others."""
    current = F.one_hot(tokens, rates.shape[-1]).bool()
    off = rates.masked_fill(current, 0.)
    return off - current * off.sum(dim=-1, keepdim=True)


def rate(state, denoiser, cfg):
    """
    Per-position CTMC rates R_t(x, .) for the masking interpolant with
    detailed-balance remasking. A masked position moves to state s at rate
    (1 + eta t) / (1 - t) * p(s); an unmasked one moves to MASK at rate eta.
    Non-MASK states never jump directly to each other.
    ---
    Params:
        state [FlowState]
        cfg [SamplerConfig] -- dt, eta and x1_temperature are used.

    Returns:
        rates [tensor] -- B x n_shape x (n_states + 1), diagonal = -row sum.
    """
    t = float(state.t)
    if t >= 1. - cfg.dt / 2.:
        raise TimeOverflow('Flow time {} is past the last Euler step for dt = {}.'.format(t, cfg.dt))
    S = denoiser.n_states
    denoiser.eval()
    with torch.no_grad():
        p = torch.softmax(denoiser(state.tokens, torch.full((state.tokens.shape[0],), t)) / cfg.x1_temperature, dim=-1)
    masked = state.masked(S).unsqueeze(-1)
    unmask = (1. + cfg.eta * t) / (1. - t) * p * masked
    remask = torch.full_like(p[..., :1], float(cfg.eta)) * ~masked
    return _with_diagonal(torch.cat([unmask, remask], dim=-1), state.tokens)


def _check_predictors(predictors, targets, n_shape, n_states):
    if len(predictors) != len(targets):
        raise PredictorShapeError('{} predictors but {} targets.'.format(len(predictors), len(targets)))
    for predictor in predictors:
        if (predictor.n_shape, predictor.n_states) != (n_shape, n_states):
            raise PredictorShapeError('Predictor {} was trained on {} x {} tokens, the flow uses {} x {}.'.format(
                getattr(predictor, 'name', '?'), predictor.n_shape, predictor.n_states, n_shape, n_states))


def _checked(log_prob, batch):
    if log_prob.shape != (batch,):
        raise PredictorShapeError('Predictor returned log-probabilities of shape {}, expected ({},).'.format(
            tuple(log_prob.shape), batch))
    return log_prob


def _exact_log_ratios(state, predictors, targets, n_states):
    """Sum over predictors of log p(y|x~,t) - log p(y|x,t) for every single-token change x~."""
    tokens = state.tokens
    B, L = tokens.shape
    K = n_states + 1
    t = float(state.t)
    delta = torch.zeros(B, L, K)
    with torch.no_grad():
        for predictor, target in zip(predictors, targets):
            base = _checked(predictor.log_prob_tokens(tokens, t, target), B)
            for pos in range(L):
                perturbed = tokens.unsqueeze(1).repeat(1, K, 1)
                perturbed[:, :, pos] = torch.arange(K)
                lp = _checked(predictor.log_prob_tokens(perturbed.view(B * K, L), t, target), B * K)
                delta[:, pos, :] += lp.view(B, K) - base.unsqueeze(1)
    return delta


def _taylor_log_ratios(state, predictors, targets, n_states):
    """First-order approximation of the same log-ratios from the one-hot gradient."""
    x_ohe = one_hot(state.tokens, n_states)
    t = float(state.t)
    with torch.enable_grad():
        x_ohe.requires_grad_(True)
        total = 0.
        for predictor, target in zip(predictors, targets):
            total = total + _checked(predictor.log_prob_one_hot(x_ohe, t, target), x_ohe.shape[0]).sum()
        grad, = torch.autograd.grad(total, x_ohe)
    return (grad - (x_ohe * grad).sum(dim=-1, keepdim=True)).detach()


def guide_rates(rates, state, predictors, targets, guide_temperature=1., method='exact'):
    """
    Multiply every transition rate by exp(sum_i [log p_i(y_i|x~,t) - log p_i(y_i|x,t)] / T)
    and recompute the diagonal. Predictors are treated as conditionally independent.
    ---
    Params:
        rates [tensor] -- B x n_shape x (n_states + 1) from rate().
        predictors [list] -- objects with n_shape, n_states, log_prob_tokens and log_prob_one_hot.
        targets [list] -- one target per predictor.
        method [str] -- 'exact' enumerates single-token changes, 'taylor' approximates them.

    Returns:
        rates [tensor] -- guided rates of the same shape.
    """
    n_states = rates.shape[-1] - 1
    _check_predictors(predictors, targets, rates.shape[1], n_states)
    if not predictors:
        return rates
    if method == 'exact':
        delta = _exact_log_ratios(state, predictors, targets, n_states)
    elif method == 'taylor':
        delta = _taylor_log_ratios(state, predictors, targets, n_states)
    else:
        raise ConfigError('Guidance method {} not implemented.'.format(method))
    ratio = torch.exp(torch.clamp(delta / guide_temperature, max=MAX_LOG_RATIO))
    return _with_diagonal(rates * ratio, state.tokens)


def _euler_step(rates, tokens, n_states, dt, remask_cap, generator):
    probs = rates.clamp(min=0.) * dt
    probs = probs.masked_fill(F.one_hot(tokens, n_states + 1).bool(), 0.)
    probs[..., n_states] = probs[..., n_states].clamp(max=remask_cap)
    total = probs.sum(dim=-1, keepdim=True)
    probs = torch.where(total > 1., probs / total, probs)
    stay = (1. - probs.sum(dim=-1)).clamp(min=0.)
    probs = probs.scatter(-1, tokens.unsqueeze(-1), stay.unsqueeze(-1))
    flat = probs.view(-1, n_states + 1)
    return torch.multinomial(flat, 1, generator=generator).view(tokens.shape)


def sample(denoiser, predictors, targets, n, cfg, rng, batch_size=512):
    """
    Euler-discretised CTMC sampling from all-MASK at t = 0 to t = 1, guided
    by the given predictors. Remasking is switched off on the last step;
    positions still masked at the end are filled with the denoiser argmax.
    ---
    Params:
        predictors, targets [list] -- empty lists sample unguided.
        n [int] -- number of sequences.
        cfg [SamplerConfig]
        rng [Generator] -- numpy random source; seeds the torch stream.

    Returns:
        tokens [array] -- n x n_shape integers in {0, ..., n_states - 1}.
    """
    S, L = denoiser.n_states, denoiser.n_shape
    _check_predictors(predictors, targets, L, S)
    generator = torch.Generator().manual_seed(int(rng.integers(2**62)))
    n_steps = int(round(1. / cfg.dt))
    out = []
    for start in range(0, n, batch_size):
        tokens = torch.full((min(batch_size, n - start), L), S, dtype=torch.long)
        for k in range(n_steps):
            t = k * cfg.dt
            if t >= 1. - cfg.dt / 2.:
                break
            final = (k + 1) * cfg.dt >= 1. - cfg.dt / 2.
            step_cfg = dataclasses.replace(cfg, eta=0.) if final else cfg
            state = FlowState(tokens, t)
            R = rate(state, denoiser, step_cfg)
            R = guide_rates(R, state, predictors, targets, cfg.guide_temperature, cfg.guidance)
            tokens = _euler_step(R, tokens, S, cfg.dt, cfg.remask_cap, generator)
        tokens = _force_complete(denoiser, tokens, 1. - cfg.dt)
        out.append(tokens.numpy())
    return np.concatenate(out) if out else np.zeros((0, L), dtype=np.int64)


def _force_complete(denoiser, tokens, t):
    masked = tokens == denoiser.n_states
    n_forced = int(masked.sum())
    if n_forced == 0:
        return tokens
    logger.warning(f'{n_forced} positions still masked at t = 1, filled by denoiser argmax')
    denoiser.eval()
    with torch.no_grad():
        fill = denoiser(tokens, torch.full((tokens.shape[0],), t)).argmax(dim=-1)
    return torch.where(masked, fill, tokens)


class LevelCompression(object):
    """
    Per-position map between n_fsq quantiser levels and a smaller flow
    alphabet of n_states. Each position keeps its n_states most used levels;
    any other level is sent to the state of the nearest kept level.
    """

    def __init__(self, kept_levels, n_fsq):
        self.kept_levels = np.asarray(kept_levels, dtype=np.int64)
        self.n_fsq = n_fsq
        L, S = self.kept_levels.shape
        levels = np.arange(n_fsq)
        self.table = np.empty((L, n_fsq), dtype=np.int64)
        for pos in range(L):
            # argmin picks the lower level on ties
            self.table[pos] = np.abs(levels[:, None] - self.kept_levels[pos][None, :]).argmin(axis=1)

    @property
    def n_states(self):
        return self.kept_levels.shape[1]

    @classmethod
    def fit(cls, codes, n_fsq, n_states):
        X = _as_token_matrix(codes, n_fsq)
        if not 2 <= n_states <= n_fsq:
            raise DataError('Cannot compress {} levels into {} states.'.format(n_fsq, n_states))
        kept = np.empty((X.shape[1], n_states), dtype=np.int64)
        for pos in range(X.shape[1]):
            counts = np.bincount(X[:, pos], minlength=n_fsq)
            ranked = sorted(range(n_fsq), key=lambda level: (-counts[level], level))
            kept[pos] = np.sort(ranked[:n_states])
        compression = cls(kept, n_fsq)
        logger.info(f'Level compression {n_fsq} -> {n_states} keeps {compression.coverage(X):.1%} of codes intact')
        return compression

    def compress(self, codes):
        X = np.asarray(codes, dtype=np.int64)
        return np.take_along_axis(self.table[None, :, :].repeat(len(X), axis=0), X[:, :, None], axis=2)[:, :, 0]

    def expand(self, tokens):
        T = np.asarray(tokens, dtype=np.int64)
        return np.take_along_axis(self.kept_levels[None, :, :].repeat(len(T), axis=0), T[:, :, None], axis=2)[:, :, 0]

    def coverage(self, codes):
        X = np.asarray(codes, dtype=np.int64)
        return float(np.mean(np.all(self.expand(self.compress(X)) == X, axis=1)))


def save_flow(path, model, compression=None):
    meta = {'kind': 'denoiser', **model.arch}
    if compression is not None:
        meta['compression'] = {'kept_levels': compression.kept_levels.tolist(), 'n_fsq': compression.n_fsq}
    save_checkpoint(path, model, meta)


def load_flow(path):
    """Returns the denoiser and its LevelCompression (None when absent)."""
    checkpoint = load_checkpoint(path)
    meta = checkpoint['metadata']
    model = Denoiser(meta['n_shape'], meta['n_states'], nb_layers=meta['nb_layers'], hidden=meta['hidden'],
                     dropout=meta['dropout'])
    model.load_state_dict(checkpoint['state_dict'])
    model.eval()
    compression = None
    if 'compression' in meta:
        compression = LevelCompression(meta['compression']['kept_levels'], meta['compression']['n_fsq'])
    return model, compression
