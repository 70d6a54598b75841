import logging

import numpy as np
import torch
from scipy.integrate import cumulative_trapezoid

from lgf_demos.utils.errors import DataError, FitError
from lgf_demos.utils.networks import DNN
from lgf_demos.utils.training import fit, set_seed
from lgf_demos.utils.trajectory import Trajectory

logger = logging.getLogger("lgf.modes")

MODE_ORDER = ('u', "u'", "u''")
MAX_STANDARDISED_MSE = 1.


class ModeSurrogate(object):
	"""
	This class fits a smooth scalar network t -> y to one observed mode on
	standardised inputs and outputs, and returns the fitted values and their
	exact time derivatives.
	"""
	def __init__(self, nb_layers=2, nb_units=64, seed=0):
		set_seed(seed)
		self.net = DNN(nb_layers, nb_units, 1, 1, activation='elu').double()
		self.t_mean, self.t_std = 0., 1.
		self.y_mean, self.y_std = 0., 1.

	def _inputs(self, t):
		return torch.as_tensor((np.asarray(t) - self.t_mean) / self.t_std, dtype=torch.float64).reshape(-1, 1)

	def train(self, t, y, epochs=5000, learning_rate=1e-3):
		"""
		Full-batch Adam fit.
		---
		Returns:
			mse [float] -- standardised MSE of the fit on the observed samples.
		"""
		self.t_mean, self.t_std = float(np.mean(t)), float(np.std(t)) or 1.
		self.y_mean, self.y_std = float(np.mean(y)), float(np.std(y)) or 1.
		target = torch.as_tensor((np.asarray(y) - self.y_mean) / self.y_std, dtype=torch.float64).reshape(-1, 1)
		batch = (self._inputs(t), target)

		def loss_fn(model, b):
			return torch.mean((model(b[0]) - b[1]) ** 2)

		history = fit(self.net, loss_fn, [batch], epochs=epochs, learning_rate=learning_rate, desc='surrogate')
		return float(min(history))

	def derivatives(self, t, order=2):
		"""Fitted values and derivatives [y, y', ..., y^(order)] at t, in data units."""
		x = self._inputs(t).requires_grad_(True)
		out = [self.net(x)]
		for _ in range(order):
			out.append(torch.autograd.grad(out[-1].sum(), x, create_graph=True)[0])
		values = [out[0].detach().numpy().ravel() * self.y_std + self.y_mean]
		for k, d in enumerate(out[1:], start=1):
			values.append(d.detach().numpy().ravel() * self.y_std / self.t_std ** k)
		return values


def _anchor(ics, k):
	if ics is None or len(ics) <= k:
		raise DataError('Integrating down to {} needs its initial condition.'.format(MODE_ORDER[k]))
	return ics[k]


def approximate_modes(data, ics=None, order=2, epochs=5000, learning_rate=1e-3, seed=0):
	"""
	Fill in the unobserved modes u, u', u'' (up to order) from the lowest
	observed one. Higher modes are exact derivatives of a fitted surrogate;
	lower modes are trapezoid integrals of the surrogate anchored at ics.
	---
	Params:
		data [Trajectory] -- at least one observed mode.
		ics [list] -- [u(t0), u'(t0)], needed when integrating.
		order [int] -- highest mode to provide.

	Returns:
		data [Trajectory] -- observed modes unchanged, the others approximated;
							 the input itself when nothing is missing.
	"""
	wanted = MODE_ORDER[:order + 1]
	if all(m in data.modes for m in wanted):
		return data
	observed = data.modes[0]
	k_obs = MODE_ORDER.index(observed)

	surrogate = ModeSurrogate(seed=seed)
	mse = surrogate.train(data.t, data.mode(observed), epochs, learning_rate)
	if mse > MAX_STANDARDISED_MSE:
		raise FitError('Surrogate for {} reached standardised MSE {:.3g}.'.format(observed, mse))
	logger.info(f'Surrogate for {observed} fitted, standardised MSE {mse:.3g}')

	smooth = surrogate.derivatives(data.t, order=max(order - k_obs, 0))
	values = {m: data.mode(m) for m in data.modes}
	for j, m in enumerate(MODE_ORDER[k_obs + 1:order + 1], start=1):
		values.setdefault(m, smooth[j])
	integrand = smooth[0]
	for k in range(k_obs - 1, -1, -1):
		integrand = _anchor(ics, k) + cumulative_trapezoid(integrand, data.t, initial=0.)
		values.setdefault(MODE_ORDER[k], integrand)
	return Trajectory(data.t, values.get('u'), values.get("u'"), values.get("u''"), source='mlp-approximated')
