import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from lgf_demos.utils.config import DiscoveryConfig
from lgf_demos.utils.dynamics import accuracy_terms
from lgf_demos.utils.errors import EmptyOperator, NonFinite
from lgf_demos.utils.expression import ODECandidate, complexity, simplify

logger = logging.getLogger("lgf.fitter")


def objective_value(c, n_samples, l_acc, alpha=0.1):
	"""L_IC = alpha * C + (1 - alpha) * n_s * L_accuracy."""
	return alpha * c + (1. - alpha) * n_samples * l_acc


@dataclass(frozen=True)
class Evaluation:
	l_ic: float
	l_acc: float
	l_de: float
	l_sol: Optional[float]
	complexity: int


def objective(cand, data, ics, cfg=None):
	"""
	Score a candidate with constants against the data.
	---
	Params:
		cand [ODECandidate] -- candidate with constants.
		data [Trajectory] -- observed modes; n_s = data.n_samples.
		ics [list] -- initial conditions for the solution loss.
		cfg [DiscoveryConfig] -- alpha, theta_de and sentinel are used.

	Returns:
		evaluation [Evaluation] -- L_IC and the terms it was built from.
	"""
	cfg = cfg or DiscoveryConfig()
	l_acc, l_de, l_sol = accuracy_terms(cand, data, ics, cfg.theta_de, cfg.sentinel)
	c = complexity(cand)
	return Evaluation(objective_value(c, data.n_samples, l_acc, cfg.alpha), l_acc, l_de, l_sol, c)


@dataclass(frozen=True)
class FitResult:
	candidate: ODECandidate
	evaluation: Optional[Evaluation]
	loss: float
	n_iterations: int
	refined: bool

	@property
	def constants(self):
		return self.candidate.constants


class ConstantFitter(object):
	"""
	This class fits the constants of a skeleton with two Nelder-Mead stages:
	a coarse search, then a refinement from its result when the coarse loss
	falls below the stage-2 threshold. Every constant starts at cfg.x0 and
	the initial simplex has edge cfg.simplex_edge along each coordinate.
	"""
	def __init__(self, data, ics, cfg=None, loss_fn=None):
		self.data = data
		self.ics = ics
		self.cfg = cfg or DiscoveryConfig()
		self.loss_fn = loss_fn

	def _loss(self, skeleton):
		if self.loss_fn is not None:
			return lambda x: self._guarded(self.loss_fn, x)
		return lambda x: self._guarded(lambda c: objective(skeleton.with_constants(c), self.data, self.ics,
														   self.cfg).l_ic, x)

	def _guarded(self, fn, x):
		try:
			value = float(fn(np.asarray(x, dtype=np.float64)))
		except (NonFinite, OverflowError, ZeroDivisionError, FloatingPointError):
			return self.cfg.sentinel
		return value if np.isfinite(value) else self.cfg.sentinel

	def _simplex(self, x):
		return np.vstack([x, x + self.cfg.simplex_edge * np.eye(len(x))])

	def stage(self, loss, x, maxiter, fatol, xatol):
		res = minimize(loss, x, method='Nelder-Mead',
					   options={'initial_simplex': self._simplex(x), 'maxiter': maxiter, 'fatol': fatol,
								'xatol': xatol})
		return res.x, float(res.fun), int(res.nit)

	def fit(self, skeleton):
		"""
		Fit, simplify and re-score one skeleton.
		---
		Returns:
			result [FitResult] -- simplified candidate with its loss.
		"""
		cfg = self.cfg
		loss = self._loss(skeleton)
		if skeleton.n_constants == 0:
			return self._finish(skeleton, loss(np.zeros(0)), 0, False)

		x = np.full(skeleton.n_constants, cfg.x0)
		x, fun, nit = self.stage(loss, x, cfg.i_max_in1, cfg.fatol_1, cfg.xatol_1)
		refined = fun < cfg.stage_2_threshold
		if refined:
			x2, fun2, nit2 = self.stage(loss, x, cfg.i_max_in2, cfg.fatol_2, cfg.xatol_2)
			nit += nit2
			if fun2 <= fun:
				x, fun = x2, fun2
		return self._finish(skeleton.with_constants(x), fun, nit, refined)

	def _finish(self, cand, fun, nit, refined):
		if self.loss_fn is not None:
			return FitResult(cand, None, fun, nit, refined)
		try:
			cand = simplify(cand, self.cfg.eps_sum, self.cfg.eps_mul)
		except EmptyOperator:
			logger.debug(f'Simplification would remove every term of {cand}, kept unsimplified')
		evaluation = objective(cand, self.data, self.ics, self.cfg)
		return FitResult(cand, evaluation, evaluation.l_ic, nit, refined)


def fit_constants(skeleton, data, ics, cfg=None, loss_fn=None):
	"""
	Two-stage Nelder-Mead constant fit of a skeleton.
	---
	Params:
		skeleton [ODECandidate] -- constants are ignored.
		cfg [DiscoveryConfig]
		loss_fn [callable] -- replaces L_IC as the objective of constants when given.

	Returns:
		(constants, loss) [Tuple] -- constants of the simplified candidate and its L_IC.
	"""
	result = ConstantFitter(data, ics, cfg, loss_fn).fit(skeleton)
	return result.constants, result.loss
