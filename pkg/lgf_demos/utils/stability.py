import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import newton

from lgf_demos.utils.behaviour import DEFAULT_GRID
from lgf_demos.utils.config import StabilityConfig
from lgf_demos.utils.dynamics import solve, to_state_space
from lgf_demos.utils.errors import ImplicitUnsolvable, SolverDiverged

logger = logging.getLogger("lgf.stability")

LABELS = ('stable', 'unstable', 'numeric-stable', 'numeric-unstable')
STABLE_LABELS = ('stable', 'numeric-stable')
LYAPUNOV = 'lyapunov-indirect'
FALLBACK = 'numeric-fallback'
JACOBIAN_STEP = 1e-5


@dataclass(frozen=True)
class StabilityVerdict:
	label: str
	method: str
	evidence: dict = field(default_factory=dict, compare=False)

	@property
	def stable(self):
		return self.label in STABLE_LABELS


def find_equilibria(space, cfg, grid=DEFAULT_GRID):
	"""
	Equilibria (u*, 0, ..., 0) of an autonomous field: roots of
	g(u, 0, ..., 0) by Newton / secant iterations from cfg.n_starts values
	spread symmetrically around 0 over the grid's u extent, deduplicated at
	cfg.dedup_tol.
	"""
	def g(u):
		state = np.zeros(space.order)
		state[0] = u
		return float(space.highest(0., state))

	extent = float(np.max(np.abs(grid.u_samples)))
	roots = []
	for u0 in np.linspace(-extent, extent, cfg.n_starts):
		try:
			with np.errstate(all='ignore'), warnings.catch_warnings():
				warnings.simplefilter('ignore', RuntimeWarning)
				root = newton(g, u0, maxiter=100)
		except (RuntimeError, OverflowError, ZeroDivisionError, ValueError):
			continue
		if not np.isfinite(root) or not abs(g(root)) < 1e-8 * max(1., abs(root)):
			continue
		if all(abs(root - r) > cfg.dedup_tol for r in roots):
			roots.append(float(root))
	return roots


def jacobian(space, state, t=0.):
	"""Central-difference Jacobian of the state-space field."""
	n = len(state)
	J = np.empty((n, n))
	for k in range(n):
		h = JACOBIAN_STEP * max(1., abs(state[k]))
		step = np.zeros(n)
		step[k] = h
		J[:, k] = (space(t, state + step) - space(t, state - step)) / (2 * h)
	return J


def numeric_stability(space, cfg, grid=DEFAULT_GRID):
	"""
	Integrate the homogeneous dynamics from cfg.fallback_starts grid states over
	[0, cfg.fallback_horizon]. Numeric-stable iff no start diverged and the
	final state norm does not exceed the initial one for at least
	cfg.fallback_fraction of the starts.
	"""
	n = cfg.fallback_starts
	u_starts = np.linspace(grid.u_samples[0], grid.u_samples[-1], 2 * n)[1::2]
	udot_starts = np.linspace(grid.udot_samples[0], grid.udot_samples[-1], 2 * n)[1::2]
	decayed = 0
	for u0, udot0 in zip(u_starts, udot_starts):
		y0 = np.array([u0, udot0][:space.order])
		try:
			end = solve(space, y0, [0., cfg.fallback_horizon])
		except SolverDiverged:
			return StabilityVerdict('numeric-unstable', FALLBACK, {'diverged_from': y0.tolist()})
		final = np.array([end.mode(m)[-1] for m in ('u', "u'")[:space.order]])
		decayed += np.linalg.norm(final) <= np.linalg.norm(y0)
	fraction = decayed / n
	label = 'numeric-stable' if fraction >= cfg.fallback_fraction else 'numeric-unstable'
	return StabilityVerdict(label, FALLBACK, {'decayed_fraction': fraction})


def assess_stability(cand, cfg=None, grid=DEFAULT_GRID):
	"""
	Stability of the intrinsic dynamics of the operator (input F set to 0).
	---
	Autonomous operators: Lyapunov's indirect method at every equilibrium
	found. Non-autonomous operators, operators without equilibria, and
	eigenvalues with a real part within cfg.zero_tol of 0 go to the numeric
	fallback.

	Returns:
		verdict [StabilityVerdict]
	"""
	cfg = cfg or StabilityConfig()
	try:
		space = to_state_space(cand, homogeneous=True)
	except ImplicitUnsolvable:
		return StabilityVerdict('numeric-unstable', FALLBACK, {'reason': 'unsolvable'})
	if not cand.autonomous:
		return numeric_stability(space, cfg, grid)

	equilibria = find_equilibria(space, cfg, grid)
	eigenvalues = []
	for u_star in equilibria:
		state = np.zeros(space.order)
		state[0] = u_star
		with np.errstate(all='ignore'):
			J = jacobian(space, state)
		if not np.all(np.isfinite(J)):
			return numeric_stability(space, cfg, grid)
		eig = np.linalg.eigvals(J)
		if np.any(np.abs(eig.real) < cfg.zero_tol):
			return numeric_stability(space, cfg, grid)
		eigenvalues.append(eig.tolist())
	if not equilibria:
		return numeric_stability(space, cfg, grid)
	stable = all(np.all(np.real(eig) < 0) for eig in eigenvalues)
	return StabilityVerdict('stable' if stable else 'unstable', LYAPUNOV,
							{'equilibria': equilibria, 'eigenvalues': eigenvalues})


def assess_skeleton_stability(skeleton, rng, cfg=None, grid=DEFAULT_GRID):
	"""
	Majority label over cfg.n_draws constant draws from
	Uniform(cfg.draw_low, cfg.draw_high); ties go to the label seen first.
	Only the skeleton's structure matters, any constants it carries are replaced.
	"""
	cfg = cfg or StabilityConfig()
	n_draws = cfg.n_draws if skeleton.n_constants else 1
	labels = []
	for _ in range(n_draws):
		constants = rng.uniform(cfg.draw_low, cfg.draw_high, size=skeleton.n_constants)
		labels.append(assess_stability(skeleton.with_constants(constants), cfg, grid).label)
	return Counter(labels).most_common(1)[0][0]
