"""
Benchmark problems, noisy dataset generation, dataset CSV files and the
relative L2 error used to score discovered equations.
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import pandas as pd

from lgf_demos.utils.dynamics import solve, to_state_space
from lgf_demos.utils.errors import DataError, ZeroReference
from lgf_demos.utils.expression import candidate_from_text
from lgf_demos.utils.trajectory import MODES, Trajectory

logger = logging.getLogger("lgf.benchmarks")

DATASET_COLUMNS = ['t', 'u', 'udot', 'uddot', 'F']


@dataclass(frozen=True)
class BenchmarkProblem:
	"""
	One ODE with its sampling protocol.
	---
	equation		ground truth as text, e.g. "2*u'' + u' + 5*u = 2*sin(0.5*t)"
	t_domain		(t0, t1)
	f_s				sampling frequency; the grid has (t1 - t0) * f_s + 1 samples
	ics				[u(t0), u'(t0)] up to the ODE order
	observed_mode	the only mode kept in generated datasets
	"""
	name: str
	equation: str
	t_domain: Tuple[float, float]
	f_s: float
	ics: Tuple[float, ...]
	observed_mode: str = 'u'
	noise_level: float = 0.05

	def __post_init__(self):
		if self.observed_mode not in MODES:
			raise DataError('Unknown observed mode {}.'.format(self.observed_mode))

	@property
	def ground_truth(self):
		return candidate_from_text(self.equation)

	@property
	def n_samples(self):
		t0, t1 = self.t_domain
		return int(round((t1 - t0) * self.f_s)) + 1

	@property
	def t_grid(self):
		return np.linspace(self.t_domain[0], self.t_domain[1], self.n_samples)


def _problems(*problems):
	return {p.name: p for p in problems}


PROBLEMS = _problems(
	# implicit second order, only u'' observed
	BenchmarkProblem('pendulum', "2*u'' + u' + 5*u = 2*sin(0.5*t)", (0., 60.), 10, (0., 3.), "u''"),
	BenchmarkProblem('duffing', "5*u'' + u' + 7*u + 25*u^3 = cos(2*t)", (0., 30.), 10, (0., 1.5), "u''"),
	BenchmarkProblem('van_der_pol', "u'' + 5*u'*(1 - u^2) + u = cos(2*t)", (0., 30.), 10, (1., 0.), "u''"),
	BenchmarkProblem('damped_oscillator', "1.2*u'' + 2.2*u' + 0.8*t*u' + 3*u = 2.3*sin(1.2*t)", (0., 30.), 20,
					 (0.4, 0.2), "u''"),
	BenchmarkProblem('exp_stiffness', "u'' + 1.2*u' + 3*exp(0.25*t)*u = 1.8*cos(1.5*t)", (0., 20.), 20,
					 (0.5, 0.8), "u''"),
	BenchmarkProblem('nonlinear_damping_1', "3*u'' + 1.3*u' + 2.5*u'^2 + 4*u = 1.5*cos(2*t/3)", (0., 30.), 15,
					 (1., 0.2), "u''"),
	BenchmarkProblem('nonlinear_damping_2', "2*u'' + 2.7*u' + 3*u'^3 + 2*u = 3*sin(0.7*t)", (0., 30.), 15,
					 (2., 0.), "u''"),
	# explicit first order, u observed
	BenchmarkProblem('exponential_decay', "u' = -0.8*u", (0., 10.), 10, (2.,)),
	BenchmarkProblem('logistic', "u' = 0.9*u*(1 - u/5)", (0., 10.), 10, (0.5,)),
	BenchmarkProblem('sinusoidal', "u' = 1.5*sin(t)", (0., 10.), 10, (0.,)),
)
SECOND_ORDER = ('pendulum', 'duffing', 'van_der_pol', 'damped_oscillator', 'exp_stiffness',
				'nonlinear_damping_1', 'nonlinear_damping_2')
FIRST_ORDER = ('exponential_decay', 'logistic', 'sinusoidal')


def get_problem(name):
	if name not in PROBLEMS:
		raise DataError('Benchmark problem {} not implemented.'.format(name))
	return PROBLEMS[name]


def solve_problem(problem):
	"""Clean ground-truth trajectory with every mode up to the ODE order."""
	gt = problem.ground_truth
	return solve(to_state_space(gt), list(problem.ics)[:gt.order], problem.t_grid).with_source('observed')


def generate_dataset(problem, rng, noise_level=None):
	"""
	Solve the ground truth on the problem grid and keep only the observed
	mode, corrupted with Gaussian noise of std noise_level * std(clean mode).
	---
	Params:
		problem [BenchmarkProblem]
		rng [Generator] -- numpy random generator.
		noise_level [float] -- overrides problem.noise_level.

	Returns:
		data [Trajectory] -- t and the noisy observed mode.
	"""
	noise_level = problem.noise_level if noise_level is None else noise_level
	clean = solve_problem(problem)
	signal = clean.mode(problem.observed_mode)
	noisy = signal + rng.normal(0., noise_level * np.std(signal), size=signal.shape) if noise_level > 0 else signal
	values = {problem.observed_mode: noisy}
	logger.info(f'Generated {problem.name}: {len(signal)} samples of {problem.observed_mode}, noise {noise_level}')
	return Trajectory(clean.t, values.get('u'), values.get("u'"), values.get("u''"))


def write_dataset(data, path, forcing=None):
	"""CSV with columns t,u,udot,uddot,F; unobserved columns are left empty."""
	frame = pd.DataFrame({'t': data.t})
	for name, (_, column) in MODES.items():
		frame[column] = data.mode(name) if name in data.modes else np.nan
	frame['F'] = np.nan if forcing is None else forcing
	frame[DATASET_COLUMNS].to_csv(path, index=False)
	logger.info(f'Wrote dataset {path}')


def read_dataset(path):
	frame = pd.read_csv(path)
	unknown = set(frame.columns) - set(DATASET_COLUMNS)
	if unknown:
		raise DataError('Unknown dataset columns {} in {}.'.format(sorted(unknown), path))
	return Trajectory.from_frame(frame)


# ---- Metrics ---- #

def relative_l2(y, yhat):
	"""||y - yhat|| / ||y||."""
	y = np.asarray(y, dtype=np.float64)
	yhat = np.asarray(yhat, dtype=np.float64)
	assert y.shape == yhat.shape, 'Shapes {} and {} differ.'.format(y.shape, yhat.shape)
	norm = np.linalg.norm(y)
	if norm == 0:
		raise ZeroReference('Relative error against an all-zero reference.')
	return float(np.linalg.norm(y - yhat) / norm)


def floored(error):
	"""Errors above 1 count as 1 in aggregated means."""
	return min(float(error), 1.)
