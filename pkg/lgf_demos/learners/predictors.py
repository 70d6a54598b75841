import logging
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, TensorDataset

from lgf_demos.learners.discrete_flow import FlowState, _as_token_matrix, corrupt_batch, one_hot, token_features
from lgf_demos.utils.errors import ConfigError, DataError, DegenerateLabels, ShapeError
from lgf_demos.utils.networks import DNN
from lgf_demos.utils.training import fit, load_checkpoint, save_checkpoint

logger = logging.getLogger("lgf.predictors")

EPS_PROB = 1e-12
LOG_FLOOR = math.log(EPS_PROB)
KINDS = ('categorical', 'continuous')
LIFECYCLES = ('static', 'dynamic')


class PredictorNet(nn.Module):
    """
    p(y | x_t, t) over noisy latent codes: class logits for categorical
    predictors, a single standardised mean for continuous ones.
    """

    def __init__(self, n_shape, n_states, output_dim, nb_layers=1, hidden=500, dropout=0.2):
        super(PredictorNet, self).__init__()
        self.n_shape = n_shape
        self.n_states = n_states
        self.net = DNN(nb_layers, hidden, n_shape * (n_states + 1) + 1, output_dim,
                       activation='elu', dropout=dropout)

    def forward_one_hot(self, x_ohe, t):
        if x_ohe.shape[1:] != (self.n_shape, self.n_states + 1):
            raise ShapeError('Predictor expects B x {} x {} one-hot states, got {}.'.format(
                self.n_shape, self.n_states + 1, tuple(x_ohe.shape)))
        return self.net(token_features(x_ohe, t))

    def forward(self, tokens, t):
        return self.forward_one_hot(one_hot(tokens, self.n_states), t)


class PredictorModel(object):
    """
    A trained guidance predictor together with its label space.
    ---
    kind       categorical | continuous
    lifecycle  static (trained once per grammar) | dynamic (retrained every iteration)
    labels     class list (categorical)
    mean, std  label standardisation (continuous)
    sigma_y    fixed standard deviation of the Gaussian on standardised labels
    """

    def __init__(self, net, kind, lifecycle='static', labels=None, mean=0., std=1., sigma_y=1., name=None):
        if kind not in KINDS or lifecycle not in LIFECYCLES:
            raise ConfigError('Predictor kind {} / lifecycle {} not implemented.'.format(kind, lifecycle))
        self.net = net
        self.kind = kind
        self.lifecycle = lifecycle
        self.labels = list(labels) if labels is not None else None
        self.mean = float(mean)
        self.std = float(std)
        self.sigma_y = float(sigma_y)
        self.name = name or kind
        self.net.eval()

    @property
    def n_shape(self):
        return self.net.n_shape

    @property
    def n_states(self):
        return self.net.n_states

    def _class_indices(self, target):
        members = target if isinstance(target, (list, tuple, set, frozenset)) else [target]
        try:
            return [self.labels.index(y) for y in members]
        except ValueError:
            raise DataError('Target {} is outside the label space {} of predictor {}.'.format(
                target, self.labels, self.name))

    def _log_prob(self, out, target):
        if self.kind == 'categorical':
            log_p = torch.log_softmax(out, dim=-1)[:, self._class_indices(target)]
            log_p = torch.logsumexp(log_p, dim=-1)
        else:
            z = (float(target) - self.mean) / self.std
            log_p = (-0.5 * ((z - out[:, 0]) / self.sigma_y) ** 2
                     - math.log(self.sigma_y * math.sqrt(2 * math.pi)))
        return torch.clamp(log_p, min=LOG_FLOOR)

    def log_prob_tokens(self, tokens, t, target):
        """log p(target | tokens, t) for every row, floored at log(1e-12)."""
        with torch.no_grad():
            return self._log_prob(self.net(tokens, t), target)

    def log_prob_one_hot(self, x_ohe, t, target):
        """Differentiable version over one-hot states, used by Taylor guidance."""
        return self._log_prob(self.net.forward_one_hot(x_ohe, t), target)

    def predict(self, codes, t=1.):
        """Most likely class, or the de-standardised mean, for unmasked codes."""
        with torch.no_grad():
            out = self.net(torch.as_tensor(np.asarray(codes, dtype=np.int64)), t)
        if self.kind == 'categorical':
            return [self.labels[i] for i in out.argmax(dim=-1).tolist()]
        return out[:, 0].numpy().astype(np.float64) * self.std + self.mean


def log_prob(model, y, x):
    """
    log p(y | x, t) for a FlowState.
    ---
    Returns:
        log_p [array] -- one value per row of x.tokens.
    """
    if not isinstance(x, FlowState):
        x = FlowState(x, 1.)
    return model.log_prob_tokens(x.tokens, float(x.t), y).numpy().astype(np.float64)


def _predictor_loss(kind, sigma_y):
    def _loss(model, batch):
        x1, y = batch
        xt, t, _ = corrupt_batch(x1, model.n_states)
        out = model(xt, t)
        if kind == 'categorical':
            return F.cross_entropy(out, y)
        return (0.5 * ((out[:, 0] - y) / sigma_y) ** 2).mean()
    return _loss


def train_predictor(codes, labels, kind, n_states, cfg, lifecycle='static', name=None, seed=0, epochs=None,
                    learning_rate=None):
    """
    Train a noise-aware predictor on (code, label) pairs. Inputs are
    re-corrupted with t ~ U(0, 1) every epoch so the predictor models
    p(y | x_t, t) along the whole flow.
    ---
    Params:
        codes [array] -- N x n_shape flow tokens.
        labels [list] -- class labels (categorical) or reals (continuous).
        kind [str] -- categorical | continuous.
        cfg [PredictorConfig]

    Returns:
        model [PredictorModel]
    """
    X = _as_token_matrix(codes, n_states)
    if len(labels) != len(X):
        raise DataError('{} codes but {} labels.'.format(len(X), len(labels)))
    distinct = sorted({v.item() if isinstance(v, np.generic) else v for v in labels}, key=str)
    if len(distinct) < 2:
        raise DegenerateLabels('Predictor {} has a single label {}.'.format(name or kind, distinct))

    torch.manual_seed(seed)
    if kind == 'categorical':
        y = torch.as_tensor([distinct.index(v) for v in labels], dtype=torch.long)
        net = PredictorNet(X.shape[1], n_states, len(distinct), nb_layers=cfg.nb_layers, hidden=cfg.hidden,
                           dropout=cfg.dropout)
        mean, std = 0., 1.
    else:
        values = np.asarray(labels, dtype=np.float64)
        mean, std = float(values.mean()), float(values.std())
        if not std > 0:
            raise DegenerateLabels('Predictor {} has constant labels.'.format(name or kind))
        y = torch.as_tensor((values - mean) / std, dtype=torch.float32)
        net = PredictorNet(X.shape[1], n_states, 1, nb_layers=cfg.nb_layers, hidden=cfg.hidden,
                           dropout=cfg.dropout)
    generator = torch.Generator().manual_seed(seed)
    loader = DataLoader(TensorDataset(torch.as_tensor(X), y), batch_size=cfg.batch_size, shuffle=True,
                        generator=generator)
    logger.info(f'Training {lifecycle} {kind} predictor {name or kind} on {len(X)} codes')
    fit(net, _predictor_loss(kind, cfg.sigma_y), loader, epochs=cfg.epochs if epochs is None else epochs,
        learning_rate=cfg.learning_rate if learning_rate is None else learning_rate, desc=name or kind)
    return PredictorModel(net, kind, lifecycle, labels=distinct if kind == 'categorical' else None,
                          mean=mean, std=std, sigma_y=cfg.sigma_y, name=name)


def objective_label(loss):
    """Objective predictor label: log10 of the loss, floored at 1e-12."""
    return float(np.log10(max(float(loss), EPS_PROB)))


def objective_target(history):
    """Guidance target for the objective predictor: the lowest objective seen so far."""
    if len(history) == 0:
        raise DataError('The objective target needs at least one evaluated candidate.')
    return float(np.min(history))


def save_predictor(path, model):
    save_checkpoint(path, model.net, {
        'kind': model.kind, 'lifecycle': model.lifecycle, 'name': model.name, 'labels': model.labels,
        'mean': model.mean, 'std': model.std, 'sigma_y': model.sigma_y, 'n_shape': model.n_shape,
        'n_states': model.n_states, 'nb_layers': model.net.net.nb_layers,
        'hidden': model.net.net.fc[0].out_features, 'output_dim': model.net.net.output_dim})


def load_predictor(path):
    checkpoint = load_checkpoint(path)
    meta = checkpoint['metadata']
    net = PredictorNet(meta['n_shape'], meta['n_states'], meta['output_dim'], nb_layers=meta['nb_layers'],
                       hidden=meta['hidden'])
    net.load_state_dict(checkpoint['state_dict'])
    return PredictorModel(net, meta['kind'], meta['lifecycle'], labels=meta['labels'], mean=meta['mean'],
                          std=meta['std'], sigma_y=meta['sigma_y'], name=meta['name'])
