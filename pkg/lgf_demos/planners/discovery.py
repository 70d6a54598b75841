"""
The nested discovery loop: guided sampling of skeleton populations from the
latent flow, constant fitting, label evaluation and dynamic predictor
retraining until the population stops improving.
"""
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
import yaml

from lgf_demos.learners import discrete_flow
from lgf_demos.learners.predictors import objective_label, objective_target, train_predictor
from lgf_demos.planners.constant_fitter import ConstantFitter, objective
from lgf_demos.utils.config import Config, dump_config
from lgf_demos.utils.errors import DataError, DecodeOverflow, DegenerateLabels, EmptyOperator, ExhaustedPopulation
from lgf_demos.utils.expression import ODECandidate, candidate_from_skeleton, parse_expression, to_text
from lgf_demos.utils.behaviour import skeleton_key
from lgf_demos.utils.stability import assess_skeleton_stability, assess_stability

logger = logging.getLogger("lgf.discovery")


@dataclass
class LedgerEntry:
	iteration: int
	skeleton: str
	rules: Tuple[int, ...]
	code: Tuple[int, ...]
	expression: str
	constants: Tuple[float, ...]
	l_de: float
	l_sol: Optional[float]
	l_ic: float
	complexity: int
	stability: str
	order: int
	duplicate: bool = False
	fitted_stability: Optional[str] = None


@dataclass
class DiscoveryRun:
	"""
	Append-only ledger of evaluated candidates with per-iteration statistics.
	---
	n_unique   cumulative number of unique skeletons after each iteration
	top_k      mean of the k lowest objectives over unique skeletons after each iteration
	"""
	top_k_size: int
	iteration: int = 0
	entries: List[LedgerEntry] = field(default_factory=list)
	unique_skeletons: dict = field(default_factory=dict)
	n_unique: List[int] = field(default_factory=list)
	top_k: List[float] = field(default_factory=list)
	candidates: dict = field(default_factory=dict)

	@property
	def best(self):
		"""Ledger entry with the lowest objective."""
		return min(self.unique_skeletons.values(), key=lambda e: e.l_ic) if self.unique_skeletons else None

	@property
	def best_candidate(self):
		best = self.best
		return None if best is None else self.candidates[best.rules]

	def add(self, entry, candidate=None):
		self.entries.append(entry)
		if not entry.duplicate:
			self.unique_skeletons[entry.rules] = entry
			self.candidates[entry.rules] = candidate

	def close_iteration(self):
		losses = sorted(e.l_ic for e in self.unique_skeletons.values())
		self.n_unique.append(len(losses))
		self.top_k.append(float(np.mean(losses[:self.top_k_size])) if losses else math.inf)

	def converged(self, eps_unique, eps_ic_k, n_pop):
		"""Both criteria, from the second iteration on."""
		if len(self.n_unique) < 2:
			return False
		few_new = self.n_unique[-1] - self.n_unique[-2] <= eps_unique * n_pop
		stalled = self.top_k[-1] >= (1. - eps_ic_k) * self.top_k[-2]
		return few_new and stalled

	def history(self):
		return [e.l_ic for e in self.entries]

	def to_frame(self, iteration=None):
		rows = [asdict(e) for e in self.entries if iteration is None or e.iteration == iteration]
		frame = pd.DataFrame(rows, columns=[f.name for f in LedgerEntry.__dataclass_fields__.values()])
		for column in ('rules', 'code', 'constants'):
			frame[column] = frame[column].map(lambda v: ' '.join(str(x) for x in v))
		return frame


def save_best(path, entry, candidate):
	"""Best candidate with full-precision constants, readable by load_best."""
	record = {'expression': entry.expression, 'l_ic': float(entry.l_ic), 'skeleton': entry.skeleton,
			  'iteration': entry.iteration, 'operator': to_text(candidate.operator),
			  'input': to_text(candidate.input) if candidate.input is not None else None,
			  'constants': [float(c) for c in candidate.constants]}
	with open(path, 'w', encoding='utf-8') as f:
		yaml.safe_dump(record, f, sort_keys=False)


def load_best(path):
	with open(path, encoding='utf-8') as f:
		record = yaml.safe_load(f)
	inp = parse_expression(record['input']) if record.get('input') else None
	return ODECandidate(parse_expression(record['operator']), inp, tuple(record['constants']))


def skeleton_rng(rules, seed):
	"""Random stream of one skeleton, independent of visiting order and worker process."""
	return np.random.default_rng([seed, int(skeleton_key(rules)[:12], 16)])


def evaluate_labels(cand, data, ics, cfg=None, rng=None):
	"""
	Labels recorded for a fitted candidate. The stability label belongs to the
	skeleton: the majority verdict over cfg.stability.n_draws constant draws.
	The verdict of the fitted constants is returned as evidence only.
	---
	Returns:
		(order, stability, fitted_stability, evaluation) -- evaluation.l_ic is L_IC.
	"""
	cfg = cfg or Config()
	rng = rng if rng is not None else np.random.default_rng(cfg.setup.seed)
	stability = assess_skeleton_stability(cand, rng, cfg.stability)
	fitted = assess_stability(cand, cfg.stability).label
	return cand.order, stability, fitted, objective(cand, data, ics, cfg.discovery)


def _evaluate_skeleton(task):
	"""Fit one new skeleton; runs in worker processes."""
	rules, text, explicit_order, data, ics, cfg = task
	skeleton = candidate_from_skeleton(text, explicit_order, rules)
	result = ConstantFitter(data, ics, cfg.discovery).fit(skeleton)
	return (result.candidate,) + evaluate_labels(result.candidate, data, ics, cfg, skeleton_rng(rules, cfg.setup.seed))


class Discovery(object):
	"""
	This class runs the discovery loop for one dataset given a grammar, a
	trained GQAE and denoiser, and optional static predictors with their
	guidance targets.
	"""
	def __init__(self, data, ics, grammar, gqae, denoiser, cfg, static_predictors=(), compression=None,
				 out_dir=None):
		self.data = data
		self.ics = ics
		self.grammar = grammar
		self.gqae = gqae
		self.denoiser = denoiser
		self.cfg = cfg
		self.static = list(static_predictors)
		self.compression = compression
		self.out_dir = out_dir
		self.dynamic = []
		self.rng = np.random.default_rng(cfg.setup.seed)
		self.run = DiscoveryRun(cfg.discovery.top_k)
		if out_dir is not None:
			os.makedirs(out_dir, exist_ok=True)
			dump_config(cfg, os.path.join(out_dir, 'config.yaml'))

	# ---- Sampling ---- #

	def _guidance(self):
		pairs = self.static + self.dynamic
		return [p for p, _ in pairs], [t for _, t in pairs]

	def _decode(self, tokens):
		levels = self.compression.expand(tokens) if self.compression is not None else tokens
		fsq = self.gqae.fsq
		logits = self.gqae.decode_codes(levels.reshape(len(levels), fsq.d, fsq.n_cha))
		return logits

	def sample_population(self, n_pop):
		"""
		Sample n_pop codes and decode them. Codes whose derivation overflows
		are resampled; the iteration fails once more than
		rejection_factor * n_pop overflows accumulate.
		---
		Returns:
			population [list] -- (rules, code) pairs, unique rule sequences.
			seeds [list] -- (seed, code) of every sampled code.
		"""
		predictors, targets = self._guidance()
		sampler = self.cfg.discovery.sampler
		max_rejections = self.cfg.discovery.rejection_factor * n_pop
		population, seen, seeds = [], set(), []
		rejected = 0
		remaining = n_pop
		while remaining > 0:
			seed = int(self.rng.integers(2**62))
			tokens = discrete_flow.sample(self.denoiser, predictors, targets, remaining, sampler,
										  np.random.default_rng(seed))
			seeds.extend((seed, tuple(int(x) for x in code)) for code in tokens)
			for code, logits in zip(tokens, self._decode(tokens)):
				try:
					rules = self.grammar.masked_decode(logits)
				except DecodeOverflow:
					rejected += 1
					continue
				remaining -= 1
				if rules not in seen:
					seen.add(rules)
					population.append((rules, tuple(int(x) for x in code)))
			if rejected > max_rejections:
				raise ExhaustedPopulation('{} decode overflows while sampling {} codes.'.format(rejected, n_pop))
		logger.info(f'Sampled {len(population)} distinct skeletons ({rejected} overflows)')
		return population, seeds

	# ---- Evaluation ---- #

	def evaluate_population(self, population, iteration):
		tasks, pending = [], []
		for rules, code in population:
			known = self.run.unique_skeletons.get(rules)
			if known is not None:
				self.run.add(LedgerEntry(**{**asdict(known), 'iteration': iteration, 'code': code,
											'duplicate': True}))
				continue
			text = self.grammar.realize(rules)
			try:
				candidate_from_skeleton(text, self.grammar.explicit_order, rules)
			except EmptyOperator:
				logger.debug(f'Skeleton {text} has no term in u, skipped')
				continue
			tasks.append((rules, text, self.grammar.explicit_order, self.data, self.ics, self.cfg))
			pending.append((rules, code, text))

		threads = self.cfg.setup.threads
		if threads > 1 and len(tasks) > 1:
			with ProcessPoolExecutor(max_workers=threads) as pool:
				results = list(pool.map(_evaluate_skeleton, tasks))
		else:
			results = [_evaluate_skeleton(task) for task in tasks]

		for (rules, code, text), (cand, order, stability, fitted, evaluation) in zip(pending, results):
			self.run.add(LedgerEntry(iteration, text, rules, code, cand.to_text(with_constants=True), cand.constants,
									 evaluation.l_de, evaluation.l_sol, evaluation.l_ic, evaluation.complexity,
									 stability, order, fitted_stability=fitted), cand)
		return len(tasks)

	# ---- Dynamic predictors ---- #

	def train_dynamic_predictors(self, iteration):
		"""Retrain the stability and objective predictors from scratch on the whole ledger."""
		entries = self.run.entries
		codes = np.array([e.code for e in entries], dtype=np.int64)
		n_states = self.denoiser.n_states
		self.dynamic = []
		seed = int(self.rng.integers(2**31))
		frame = pd.DataFrame({'code': [' '.join(map(str, e.code)) for e in entries],
							  'stability': [e.stability for e in entries],
							  'objective': [objective_label(e.l_ic) for e in entries]})
		if self.out_dir is not None:
			frame.to_csv(os.path.join(self.out_dir, 'predictor_data_{:02d}.csv'.format(iteration)), index=False)

		target = self.cfg.discovery.stability_target
		if target:
			try:
				model = train_predictor(codes, list(frame['stability']), 'categorical', n_states, self.cfg.predictors,
										lifecycle='dynamic', name='stability', seed=seed)
				agreement = np.mean([p == y for p, y in zip(model.predict(codes), frame['stability'])])
				logger.info(f'Stability predictor agrees with {agreement:.0%} of the ledger')
				members = [label for label in target if label in model.labels]
				if members:
					self.dynamic.append((model, members))
				else:
					logger.info(f'No sampled candidate is {target} yet, stability guidance skipped')
			except DegenerateLabels as e:
				logger.info(f'Stability predictor skipped: {e}')
		if self.cfg.discovery.objective_guidance:
			try:
				model = train_predictor(codes, list(frame['objective']), 'continuous', n_states, self.cfg.predictors,
										lifecycle='dynamic', name='objective', seed=seed + 1)
				error = np.mean(np.abs(model.predict(codes) - frame['objective'].to_numpy()))
				logger.info(f'Objective predictor is off by {error:.3g} decades on the ledger')
				self.dynamic.append((model, objective_label(objective_target(self.run.history()))))
			except DegenerateLabels as e:
				logger.info(f'Objective predictor skipped: {e}')

	# ---- Loop ---- #

	def _save_iteration(self, iteration, seeds):
		if self.out_dir is None:
			return
		self.run.to_frame(iteration).to_csv(os.path.join(self.out_dir, 'ledger_{:02d}.csv'.format(iteration)),
											index=False)
		pd.DataFrame({'seed': [s for s, _ in seeds], 'code': [' '.join(map(str, c)) for _, c in seeds]}).to_csv(
			os.path.join(self.out_dir, 'codes_{:02d}.csv'.format(iteration)), index=False)
		best = self.run.best
		if best is not None:
			save_best(os.path.join(self.out_dir, 'best.yaml'), best, self.run.best_candidate)

	def step(self):
		"""One outer iteration: sample and evaluate a population. Returns the number of new skeletons fitted."""
		dcfg = self.cfg.discovery
		iteration = self.run.iteration + 1
		n_pop = dcfg.initial_population if iteration == 1 else dcfg.n_pop
		population, seeds = self.sample_population(n_pop)
		n_new = self.evaluate_population(population, iteration)
		self.run.iteration = iteration
		self.run.close_iteration()
		best = self.run.best
		logger.info(f'Iteration {iteration}: {n_new} new skeletons, {self.run.n_unique[-1]} unique, '
					f'top-k mean {self.run.top_k[-1]:.4g}' + (f', best {best.expression}' if best else ''))
		self._save_iteration(iteration, seeds)
		return n_new

	def __call__(self):
		dcfg = self.cfg.discovery
		for i in range(dcfg.i_max_out):
			self.step()
			if self.run.converged(dcfg.eps_unique, dcfg.eps_ic_k, dcfg.n_pop):
				logger.info(f'Converged after {self.run.iteration} iterations')
				break
			if i + 1 < dcfg.i_max_out and self.run.entries:
				self.train_dynamic_predictors(self.run.iteration)
		return self.run


def run_discovery(data, grammar, gqae, denoiser, static_predictors, cfg, ics=None, compression=None, out_dir=None):
	"""
	Discover an ODE for data.
	---
	Params:
		data [Trajectory] -- observed (or approximated) modes.
		grammar [Grammar] -- the grammar the GQAE was trained on.
		gqae [GQAE], denoiser [Denoiser] -- trained models.
		static_predictors [list] -- (PredictorModel, target) pairs.
		cfg [Config]
		ics [list] -- initial conditions, cfg.problem.ics when None.

	Returns:
		run [DiscoveryRun]
	"""
	ics = cfg.problem.ics if ics is None else ics
	if ics is None:
		raise DataError('Discovery needs initial conditions.')
	return Discovery(data, ics, grammar, gqae, denoiser, cfg, static_predictors, compression, out_dir)()
