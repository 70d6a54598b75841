import os

import numpy as np
import pandas as pd
import pytest

from lgf_demos.planners.discovery import DiscoveryRun, LedgerEntry
from lgf_demos.utils.benchmarks import BenchmarkProblem, get_problem
from lgf_demos.utils.expression import candidate_from_text
from lgf_demos.utils.reporting import (RESULT_COLUMNS, evaluate_candidate, report, report_text, score_candidate,
                                       write_report)


def test_ground_truth_scores_zero():
    problem = get_problem('pendulum')
    frame, clean, solved = score_candidate(problem.ground_truth, problem, seconds=1.23456)
    assert list(frame.columns) == RESULT_COLUMNS
    assert list(frame['mode']) == ['u', "u'", "u''"]
    assert np.all(frame['rel_l2'] < 1e-4)
    assert set(frame['complexity']) == {15}
    assert set(frame['seconds']) == {1.235}
    assert solved.n_samples == clean.n_samples == 601


def test_unsolvable_candidate_is_floored():
    frame = evaluate_candidate("u'*u + u = 0", get_problem('exponential_decay'))
    assert np.all(np.isinf(frame['rel_l2']))
    assert np.all(frame['rel_l2_floored'] == 1.)
    assert frame['seconds'].isna().all()


def test_wrong_constant_gives_relative_error():
    frame = evaluate_candidate("u' = -0.5*u", get_problem('exponential_decay'))
    row = frame.set_index('mode').loc['u']
    assert 0.05 < row['rel_l2'] < 1.
    assert row['rel_l2_floored'] == row['rel_l2']


def test_all_zero_reference_is_skipped():
    problem = BenchmarkProblem('rest', "u' = -u", (0., 1.), 10, (0.,))
    frame, _, _ = score_candidate(problem.ground_truth, problem)
    assert len(frame) == 0


def test_report_files(tmp_path):
    problem = get_problem('exponential_decay')
    cand = candidate_from_text("u' = -0.79*u")
    run = DiscoveryRun(top_k_size=1)
    run.add(LedgerEntry(1, 'C * u', (2, 3, 5), (0, 1), cand.to_text(True), cand.constants, 0.1, 0.01, 1.4, 5,
                        'stable', 1), cand)
    run.iteration = 1
    run.close_iteration()
    frame = report(run, problem, out_dir=str(tmp_path))
    for name in ('results.csv', 'report.txt', 'trajectory.csv'):
        assert os.path.exists(tmp_path / name)
    assert len(pd.read_csv(tmp_path / 'results.csv')) == len(frame) == 2
    trajectory = pd.read_csv(tmp_path / 'trajectory.csv')
    assert list(trajectory.columns) == ['t', 'clean_u', 'solved_u', 'clean_udot', 'solved_udot']
    text = (tmp_path / 'report.txt').read_text()
    assert 'iterations  1' in text
    assert 'rel_l2[u] = ' in text


def test_report_text_without_rows():
    frame = pd.DataFrame(columns=RESULT_COLUMNS)
    assert report_text(frame, 2) == 'iterations  2\n'


def test_report_needs_a_candidate():
    with pytest.raises(AssertionError):
        report(DiscoveryRun(top_k_size=1), get_problem('logistic'))


def test_trajectory_dump_is_thinned(tmp_path):
    problem = get_problem('exponential_decay')
    frame, clean, solved = score_candidate(candidate_from_text("u' = -0.79*u"), problem)
    write_report(frame, clean, solved, str(tmp_path), trajectory_samples=11)
    trajectory = pd.read_csv(tmp_path / 'trajectory.csv')
    np.testing.assert_allclose(trajectory['t'], np.linspace(0., 10., 11))
    np.testing.assert_allclose(trajectory['clean_u'], 2. * np.exp(-0.8 * trajectory['t']), rtol=1e-4)
    assert len(pd.read_csv(tmp_path / 'results.csv')) == len(frame)
    # an unsolvable candidate leaves the solved columns empty
    frame, clean, _ = score_candidate(candidate_from_text("u'*u + u = 0"), problem)
    write_report(frame, clean, None, str(tmp_path), trajectory_samples=11)
    assert pd.read_csv(tmp_path / 'trajectory.csv')['solved_u'].isna().all()
