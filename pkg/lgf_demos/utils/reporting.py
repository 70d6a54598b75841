"""
Result records for discovered equations: per-mode relative L2 errors of the
solved candidate against the clean ground truth, as CSV, text and a
trajectory dump for external plotting.
"""
import logging
import os

import numpy as np
import pandas as pd

from lgf_demos.utils.benchmarks import floored, relative_l2, solve_problem
from lgf_demos.utils.dynamics import initial_state, solve, to_state_space
from lgf_demos.utils.errors import ImplicitUnsolvable, SolverDiverged, ZeroReference
from lgf_demos.utils.expression import candidate_from_text, complexity
from lgf_demos.utils.trajectory import MODES

logger = logging.getLogger("lgf.report")

RESULT_COLUMNS = ['problem', 'mode', 'rel_l2', 'rel_l2_floored', 'complexity', 'expression', 'seconds']


def solve_candidate(cand, problem, clean=None):
	"""The candidate solved on the problem grid from the problem ICs, or None if it cannot be solved."""
	clean = solve_problem(problem) if clean is None else clean
	try:
		field = to_state_space(cand)
		return solve(field, initial_state(problem.ics, field.order, clean), clean.t)
	except (ImplicitUnsolvable, SolverDiverged) as e:
		logger.warning(f'{cand.to_text(True)} cannot be solved on {problem.name}: {e}')
		return None


def score_candidate(cand, problem, seconds=None):
	"""
	Relative L2 error of the solved candidate on every clean mode.
	---
	Returns:
		frame [DataFrame] -- one row per mode, RESULT_COLUMNS.
		clean [Trajectory], solved [Trajectory or None]
	"""
	clean = solve_problem(problem)
	solved = solve_candidate(cand, problem, clean)
	rows = []
	for mode in clean.modes:
		if solved is not None and mode in solved.modes:
			try:
				error = relative_l2(clean.mode(mode), solved.mode(mode))
			except ZeroReference:
				logger.warning(f'{problem.name}: clean {mode} is identically zero, not scored')
				continue
		else:
			error = np.inf
		rows.append({'problem': problem.name, 'mode': mode, 'rel_l2': error, 'rel_l2_floored': floored(error),
					 'complexity': complexity(cand), 'expression': cand.to_text(with_constants=True),
					 'seconds': np.nan if seconds is None else round(seconds, 3)})
	return pd.DataFrame(rows, columns=RESULT_COLUMNS), clean, solved


def trajectory_frame(clean, solved):
	frame = pd.DataFrame({'t': clean.t})
	for mode in clean.modes:
		column = MODES[mode][1]
		frame['clean_' + column] = clean.mode(mode)
		frame['solved_' + column] = solved.mode(mode) if solved is not None and mode in solved.modes else np.nan
	return frame


def report_text(frame, iterations=None):
	lines = []
	if len(frame):
		lines.append('problem     {}'.format(frame['problem'].iloc[0]))
		lines.append('expression  {}'.format(frame['expression'].iloc[0]))
		lines.append('complexity  {}'.format(frame['complexity'].iloc[0]))
	if iterations is not None:
		lines.append('iterations  {}'.format(iterations))
	for _, row in frame.iterrows():
		lines.append("rel_l2[{}] = {:.6g} (floored {:.6g})".format(row['mode'], row['rel_l2'], row['rel_l2_floored']))
	if len(frame) and not np.isnan(frame['seconds'].iloc[0]):
		lines.append('seconds     {:.3f}'.format(frame['seconds'].iloc[0]))
	return '\n'.join(lines) + '\n'


def write_report(frame, clean, solved, out_dir, iterations=None, trajectory_samples=None):
	"""results.csv, report.txt and trajectory.csv; trajectory_samples thins the trajectory dump."""
	os.makedirs(out_dir, exist_ok=True)
	if trajectory_samples is not None and trajectory_samples < clean.n_samples:
		clean = clean.downsample(trajectory_samples)
		solved = solved.downsample(trajectory_samples) if solved is not None else None
	frame.to_csv(os.path.join(out_dir, 'results.csv'), index=False, float_format='%.6g')
	with open(os.path.join(out_dir, 'report.txt'), 'w', encoding='utf-8') as f:
		f.write(report_text(frame, iterations))
	trajectory_frame(clean, solved).to_csv(os.path.join(out_dir, 'trajectory.csv'), index=False, float_format='%.10g')
	logger.info(f'Wrote report to {out_dir}')


def report(run, problem, out_dir=None, seconds=None, trajectory_samples=None):
	"""
	Score the best candidate of a discovery run against the problem's clean data.
	---
	Params:
		run [DiscoveryRun] -- finished run with at least one candidate.
		problem [BenchmarkProblem]
		seconds [float] -- wall time of the run; left empty when None.
		trajectory_samples [int] -- equally spaced rows of trajectory.csv, the full grid when None.

	Returns:
		frame [DataFrame] -- the results.csv rows.
	"""
	cand = run.best_candidate
	assert cand is not None, 'The run has no candidate to report.'
	frame, clean, solved = score_candidate(cand, problem, seconds)
	if out_dir is not None:
		write_report(frame, clean, solved, out_dir, run.iteration, trajectory_samples)
	return frame


def evaluate_candidate(text, problem, out_dir=None):
	"""Score an equation given as text, e.g. "u' = -0.79*u", against a problem."""
	frame, clean, solved = score_candidate(candidate_from_text(text), problem)
	if out_dir is not None:
		write_report(frame, clean, solved, out_dir)
	return frame
