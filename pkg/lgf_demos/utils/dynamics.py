"""
Numerical ODE machinery for candidates: state-space conversion, solving,
and the residual / solution / accuracy losses.
"""
import logging

import numpy as np
from scipy.integrate import solve_ivp

from lgf_demos.utils.errors import DataError, ImplicitUnsolvable, SolverDiverged
from lgf_demos.utils.expression import (Var, additive_terms, build_sum, evaluate_array, multiplicative_factors,
										to_text, variables)
from lgf_demos.utils.trajectory import Trajectory

logger = logging.getLogger("lgf.dynamics")

SENTINEL = 1e10
STATE_NAMES = ('u', "u'", "u''")
RTOL = 1e-6
ATOL = 1e-9


class StateSpace(object):
	"""
	First-order form of D(u) - F(t) = 0 for an operator linear in its
	highest derivative: u^(n) = g(t, u, ..., u^(n-1)) with
	g = (F - D|_{u^(n)=0}) / a, a the total coefficient of u^(n).
	---
	state   [u, ..., u^(n-1)]
	"""
	def __init__(self, cand, coefficient, rest, homogeneous=False):
		self.cand = cand
		self.order = cand.order
		self.coefficient = coefficient
		self.rest = rest
		self.homogeneous = homogeneous

	def _bindings(self, t, state):
		values = {'t': t}
		for k in range(self.order):
			values[STATE_NAMES[k]] = state[k]
		return values

	def highest(self, t, state):
		"""u^(n) at (t, state); vectorised when state is order x N."""
		t = np.asarray(t, dtype=np.float64)
		bindings = self._bindings(t, state)
		rest = evaluate_array(self.rest, bindings, self.cand.constants) if self.rest is not None else 0.
		forcing = 0. if self.homogeneous else self.cand.input_values(t)
		with np.errstate(all='ignore'):
			return (forcing - rest) / self.coefficient

	def __call__(self, t, state):
		return np.append(state[1:self.order], self.highest(t, state))


def _term_coefficient(term, highest, constants):
	"""Constant multiplier of highest in term, or None if term is not c * highest."""
	factors = multiplicative_factors(term)
	hits = [ix for ix, (f, den) in enumerate(factors) if f == Var(highest) and not den]
	if len(hits) != 1:
		return None
	value = 1.
	for ix, (f, den) in enumerate(factors):
		if ix == hits[0]:
			continue
		if variables(f):
			return None
		v = float(evaluate_array(f, {}, constants))
		value = value / v if den else value * v
	return value


def to_state_space(cand, homogeneous=False):
	"""
	Convert a candidate to its first-order state-space field.
	---
	Params:
		cand [ODECandidate] -- candidate with constants.
		homogeneous [bool] -- drop the input F (used by the stability fallback).

	Returns:
		field [StateSpace] -- callable field(t, state).
	"""
	order = cand.order
	if order == 0:
		raise ImplicitUnsolvable('{} has no derivative of u.'.format(cand.to_text()))
	highest = STATE_NAMES[order]
	coefficient = 0.
	rest = []
	for sign, term in additive_terms(cand.operator):
		if highest not in variables(term):
			rest.append((sign, term))
			continue
		c = _term_coefficient(term, highest, cand.constants)
		if c is None:
			raise ImplicitUnsolvable('{} is not linear in {}.'.format(to_text(term), highest))
		coefficient += sign * c
	if not np.isfinite(coefficient) or coefficient == 0.:
		raise ImplicitUnsolvable('{} has a zero coefficient on {}.'.format(cand.to_text(True), highest))
	return StateSpace(cand, coefficient, build_sum(rest) if rest else None, homogeneous)


def solve(field, ics, t_grid, rtol=RTOL, atol=ATOL, bound=SENTINEL):
	"""
	Integrate field with explicit Runge-Kutta 4(5) and sample it on t_grid.
	---
	Params:
		field [StateSpace]
		ics [list] -- [u(t0), ..., u^(n-1)(t0)] at t0 = t_grid[0].
		bound [float] -- abort once any state component exceeds it in magnitude.

	Returns:
		trajectory [Trajectory] -- all modes up to the field's order, source solved.
	"""
	t_grid = np.asarray(t_grid, dtype=np.float64)
	y0 = np.asarray(ics, dtype=np.float64)[:field.order]
	if len(y0) != field.order:
		raise DataError('Order {} field needs {} initial conditions, got {}.'.format(field.order, field.order, len(y0)))

	def rhs(t, y):
		dy = field(t, y)
		if not np.all(np.isfinite(dy)):
			raise SolverDiverged('Non-finite derivative at t = {:.4g}.'.format(t))
		return dy

	def escaped(t, y):
		return bound - np.max(np.abs(y))
	escaped.terminal = True

	if not np.all(np.isfinite(rhs(t_grid[0], y0))):
		raise SolverDiverged('Field is not finite at the initial state.')
	sol = solve_ivp(rhs, (t_grid[0], t_grid[-1]), y0, method='RK45', t_eval=t_grid, rtol=rtol, atol=atol,
					events=escaped)
	if sol.status != 0 or sol.y.shape[1] != len(t_grid) or not np.all(np.isfinite(sol.y)):
		raise SolverDiverged('Solver stopped at t = {:.4g}: {}'.format(sol.t[-1] if len(sol.t) else t_grid[0],
																	   sol.message))
	modes = list(sol.y) + [field.highest(sol.t, sol.y)]
	return Trajectory(sol.t, modes[0], modes[1] if len(modes) > 1 else None,
					  modes[2] if len(modes) > 2 else None, source='solved')


def _finite_or_sentinel(value, sentinel):
	value = float(value)
	return value if np.isfinite(value) and value < sentinel else sentinel


def residual_loss(cand, data, sentinel=SENTINEL):
	"""L_DE: mean squared residual D(u) - F over the data samples."""
	missing = sorted(variables(cand.operator) - {'t'} - set(data.modes))
	if missing:
		raise DataError('Order {} candidate needs modes the data does not have: {}.'.format(cand.order, missing))
	with np.errstate(all='ignore'):
		residual = cand.operator_values(data.bindings()) - cand.input_values(data.t)
		return _finite_or_sentinel(np.mean(residual ** 2), sentinel)


def standardised_mse(predicted, reference):
	"""MSE divided by the reference variance; zero-variance references are not rescaled."""
	var = np.var(reference)
	with np.errstate(all='ignore'):
		return float(np.mean((predicted - reference) ** 2) / (var if var > 0 else 1.))


def initial_state(ics, order, data=None):
	"""First `order` initial conditions, completed from the data's first sample when short."""
	ics = list(ics if ics is not None else [])
	for name in STATE_NAMES[len(ics):order]:
		if data is None:
			raise DataError('Missing initial condition for {}.'.format(name))
		ics.append(float(data.mode(name)[0]))
	return ics[:order]


def solution_loss(cand, data, ics, sentinel=SENTINEL):
	"""
	L_SOL: solve the candidate from ics and average the standardised MSE over
	the modes both the solution and the data provide.
	"""
	try:
		field = to_state_space(cand)
		solved = solve(field, initial_state(ics, field.order, data), data.t)
	except (ImplicitUnsolvable, SolverDiverged) as e:
		logger.debug(f'{cand}: {e}')
		return sentinel
	modes = [m for m in solved.modes if m in data.modes]
	return _finite_or_sentinel(np.mean([standardised_mse(solved.mode(m), data.mode(m)) for m in modes]), sentinel)


def accuracy_terms(cand, data, ics, theta_de=200., sentinel=SENTINEL):
	"""
	Returns:
		(L_acc, L_DE, L_SOL) -- L_SOL is None when L_DE >= theta_de and no solve was made.
	"""
	l_de = residual_loss(cand, data, sentinel)
	if l_de < theta_de:
		l_sol = solution_loss(cand, data, ics, sentinel)
		return l_sol, l_de, l_sol
	return l_de, l_de, None


def accuracy_loss(cand, data, ics, theta_de=200., sentinel=SENTINEL):
	"""L_SOL when L_DE < theta_de, otherwise L_DE."""
	return accuracy_terms(cand, data, ics, theta_de, sentinel)[0]
