import copy
import logging
import random

import numpy as np
import torch
import torch.optim as optim
from torch.nn.utils import parameters_to_vector
from tqdm import trange

logger = logging.getLogger("lgf.training")

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def set_seed(seed):
	"""Seed every random source used by training (dropout masks, shuffling, init)."""
	random.seed(seed)
	np.random.seed(seed % 2**32)
	torch.manual_seed(seed)


def flat_parameters(model):
	return parameters_to_vector(model.parameters()).detach()


def gradients(model, loss_fn, batch):
	"""
	Reverse-mode gradients of loss_fn(model, batch) w.r.t. every parameter.
	---
	Returns:
		grad [tensor] -- flat vector aligned with flat_parameters(model).
	"""
	model.zero_grad()
	loss = loss_fn(model, batch)
	params = list(model.parameters())
	grads = torch.autograd.grad(loss, params, allow_unused=True) if loss.requires_grad else [None] * len(params)
	return torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1) for p, g in zip(params, grads)])


def make_optimizer(model, lr=1e-3):
	return optim.Adam(model.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def adam_step(optimizer, grads):
	"""Apply one Adam update with the given flat gradient vector."""
	offset = 0
	for group in optimizer.param_groups:
		for p in group['params']:
			n = p.numel()
			p.grad = grads[offset:offset + n].view_as(p).clone()
			offset += n
	optimizer.step()


def plateau_scheduler(optimizer, factor=0.9, patience=500, min_lr=1e-4):
	"""
	Multiply the learning rate by factor once the metric has not improved for
	patience epochs after the epoch that set the best value, i.e. on the
	(patience + 1)-th flat epoch. ReduceLROnPlateau waits for one more bad
	epoch than its own patience, hence the shift.
	"""
	assert patience >= 1, 'Plateau patience must be at least one epoch.'
	return optim.lr_scheduler.ReduceLROnPlateau(optimizer, mode='min', factor=factor,
												patience=patience - 1, min_lr=min_lr)


def current_lr(optimizer):
	return optimizer.param_groups[0]['lr']


def fit(model, loss_fn, train_loader, val_loader=None, epochs=100, learning_rate=1e-3,
		scheduler=None, target_loss=None, desc='train'):
	"""
	Train a model with Adam and keep the checkpoint with the best monitored
	loss (validation loss when a validation loader is given). Training stops at
	the epoch cap, or once the monitored loss reaches target_loss.
	---
	Params:
		loss_fn [callable] -- loss_fn(model, batch) -> scalar tensor.
		scheduler [dict] -- ReduceLROnPlateau settings, None disables it.

	Returns:
		history [list] -- monitored loss per epoch; the model holds the best weights.
	"""
	optimizer = make_optimizer(model, learning_rate)
	lr_scheduler = plateau_scheduler(optimizer, **scheduler) if scheduler is not None else None

	best_loss = float('inf')
	best_state = copy.deepcopy(model.state_dict())
	history = []
	with trange(epochs) as T:
		for t in T:
			T.set_description('%s epoch %i' % (desc, t))
			model.train()
			avg_in_loss = []
			for batch in train_loader:
				optimizer.zero_grad()
				loss = loss_fn(model, batch)
				loss.backward()
				optimizer.step()
				avg_in_loss.append(loss.item())
			monitored = sum(avg_in_loss) / max(len(avg_in_loss), 1)

			if val_loader is not None:
				model.eval()
				with torch.no_grad():
					val_losses = [loss_fn(model, batch).item() for batch in val_loader]
				if val_losses:
					monitored = sum(val_losses) / len(val_losses)

			history.append(monitored)
			if lr_scheduler is not None:
				lr_scheduler.step(monitored)
			if monitored < best_loss:
				best_loss = monitored
				best_state = copy.deepcopy(model.state_dict())

			T.set_postfix(loss=monitored, lr=current_lr(optimizer))
			if target_loss is not None and monitored <= target_loss:
				logger.info(f'{desc}: reached loss {monitored:.3g} after {t + 1} epochs')
				break

	model.load_state_dict(best_state)
	model.eval()
	return history


def save_checkpoint(path, model, metadata):
	"""Self-describing checkpoint: architecture metadata plus the parameters."""
	torch.save({'metadata': metadata, 'state_dict': model.state_dict()}, path)
	logger.info(f'Saved checkpoint {path}')


def load_checkpoint(path):
	return torch.load(path, map_location='cpu')
