"""
Run configuration. YAML files in config/ are loaded into the dataclasses
below; JSON files load the same way since yaml.safe_load reads JSON.
"""
import dataclasses
import math
from dataclasses import dataclass, field
from typing import List, Optional

import yaml

from lgf_demos.utils.errors import ConfigError


@dataclass(frozen=True)
class FSQConfig:
	n_fsq: int
	d: int
	n_cha: int = 4

	def __post_init__(self):
		if self.n_fsq < 2 or self.d < 1 or self.n_cha < 1:
			raise ConfigError('Invalid FSQ configuration {}.'.format(self))

	@property
	def codebook_size(self):
		return self.n_fsq ** self.n_cha

	@property
	def n_shape(self):
		return self.d * self.n_cha


@dataclass
class SetupConfig:
	seed: int = 0
	out: str = 'runs/default'
	threads: int = 1


@dataclass
class GrammarConfig:
	path: str = 'config/grammars/toy.grammar'
	N_max: int = 25
	corpus_size: int = 500


@dataclass
class GQAEConfig:
	d: int = 8
	n_fsq: int = 5
	n_cha: int = 4
	n_res: int = 40
	conv_channels: int = 16
	gru_hidden: int = 80
	beta_w: float = 1e-4
	lambda_w: float = 1e-2
	n_draws: int = 25
	epochs: int = 2000
	batch_size: int = 512
	learning_rate: float = 1e-3
	val_fraction: float = 0.1
	lr_factor: float = 0.9
	lr_patience: int = 500
	min_lr: float = 1e-4

	def __post_init__(self):
		if self.lr_patience < 1 or not 0 < self.lr_factor < 1:
			raise ConfigError('gqae needs lr_patience >= 1 and lr_factor in (0, 1).')

	@property
	def fsq(self):
		return FSQConfig(n_fsq=self.n_fsq, d=self.d, n_cha=self.n_cha)


@dataclass
class FlowConfig:
	nb_layers: int = 2
	hidden: int = 512
	dropout: float = 0.2
	epochs: int = 300
	batch_size: int = 256
	learning_rate: float = 1e-3
	# flow alphabet size S; None uses n_fsq, smaller values need compression
	n_states: Optional[int] = None
	compression: bool = False


@dataclass
class SamplerConfig:
	dt: float = 0.01
	eta: float = 10.0
	x1_temperature: float = 1.0
	guide_temperature: float = 1.0
	remask_cap: float = 0.5
	guidance: str = 'exact'

	def __post_init__(self):
		if not 0 < self.dt <= 1 or self.eta < 0:
			raise ConfigError('Sampler needs dt in (0, 1] and eta >= 0.')
		if self.guidance not in ('exact', 'taylor'):
			raise ConfigError('Guidance method {} not implemented.'.format(self.guidance))


@dataclass
class PredictorConfig:
	nb_layers: int = 1
	hidden: int = 500
	dropout: float = 0.2
	epochs: int = 200
	batch_size: int = 128
	learning_rate: float = 1e-3
	sigma_y: float = 1.0


@dataclass
class StabilityConfig:
	n_starts: int = 16
	dedup_tol: float = 1e-6
	zero_tol: float = 1e-9
	fallback_starts: int = 8
	fallback_horizon: float = 10.0
	fallback_fraction: float = 0.75
	n_draws: int = 5
	draw_low: float = -10.0
	draw_high: float = 10.0

	def __post_init__(self):
		if self.n_draws < 1 or not self.draw_low < self.draw_high:
			raise ConfigError('Stability needs n_draws >= 1 and draw_low < draw_high.')


@dataclass
class DiscoveryConfig:
	n_pop: int = 50
	n_pop_0: Optional[int] = None
	i_max_out: int = 10
	i_max_in1: int = 50
	i_max_in2: int = 150
	alpha: float = 0.1
	theta_de: float = 200.
	eps_unique: float = 0.1
	eps_ic_k: float = 0.01
	top_k_fraction: float = 0.1
	eps_sum: float = 1e-2
	eps_mul: float = 1e-2
	fatol_1: float = 0.1
	xatol_1: float = 0.5
	fatol_2: float = 1e-3
	xatol_2: float = 0.1
	stage_2_threshold: float = 25.
	x0: float = 1.0
	simplex_edge: float = 0.5
	sentinel: float = 1e10
	rejection_factor: int = 10
	order_target: Optional[int] = None
	stability_target: Optional[List[str]] = None
	objective_guidance: bool = True
	sampler: SamplerConfig = field(default_factory=SamplerConfig)

	def __post_init__(self):
		if isinstance(self.sampler, dict):
			self.sampler = _build(SamplerConfig, self.sampler, 'discovery.sampler')
		if isinstance(self.stability_target, str):
			self.stability_target = [self.stability_target]
		tolerances = (self.eps_unique, self.eps_ic_k, self.top_k_fraction, self.fatol_1, self.xatol_1,
					  self.fatol_2, self.xatol_2)
		if min(tolerances) <= 0 or self.eps_sum < 0 or self.eps_mul < 0:
			raise ConfigError('Discovery tolerances must be positive.')

	@property
	def initial_population(self):
		return self.n_pop if self.n_pop_0 is None else self.n_pop_0

	@property
	def top_k(self):
		return math.ceil(self.top_k_fraction * self.n_pop)


@dataclass
class ProblemConfig:
	name: Optional[str] = None
	dataset: Optional[str] = None
	ics: Optional[List[float]] = None
	noise_level: float = 0.05
	observed_mode: Optional[str] = None
	surrogate_epochs: int = 5000


@dataclass
class ReportConfig:
	timing: bool = False
	trajectory_samples: Optional[int] = None

	def __post_init__(self):
		if self.trajectory_samples is not None and self.trajectory_samples < 2:
			raise ConfigError('report.trajectory_samples needs at least 2 samples.')


@dataclass
class Config:
	setup: SetupConfig = field(default_factory=SetupConfig)
	grammar: GrammarConfig = field(default_factory=GrammarConfig)
	gqae: GQAEConfig = field(default_factory=GQAEConfig)
	flow: FlowConfig = field(default_factory=FlowConfig)
	predictors: PredictorConfig = field(default_factory=PredictorConfig)
	stability: StabilityConfig = field(default_factory=StabilityConfig)
	discovery: DiscoveryConfig = field(default_factory=DiscoveryConfig)
	problem: ProblemConfig = field(default_factory=ProblemConfig)
	report: ReportConfig = field(default_factory=ReportConfig)

	def to_dict(self):
		return dataclasses.asdict(self)


def _build(cls, values, section):
	if values is None:
		return cls()
	if not isinstance(values, dict):
		raise ConfigError('Section {} must be a mapping.'.format(section))
	names = {f.name for f in dataclasses.fields(cls)}
	unknown = set(values) - names
	if unknown:
		raise ConfigError('Unknown keys in {}: {}.'.format(section, ', '.join(sorted(unknown))))
	return cls(**values)


def config_from_dict(values):
	values = values or {}
	sections = {f.name: f.type for f in dataclasses.fields(Config)}
	unknown = set(values) - set(sections)
	if unknown:
		raise ConfigError('Unknown config sections: {}.'.format(', '.join(sorted(unknown))))
	built = {}
	for f in dataclasses.fields(Config):
		built[f.name] = _build(f.default_factory, values.get(f.name), f.name)
	return Config(**built)


def load_config(path):
	with open(path, encoding='utf-8') as f:
		return config_from_dict(yaml.safe_load(f))


def dump_config(config, path):
	with open(path, 'w', encoding='utf-8') as f:
		yaml.safe_dump(config.to_dict(), f, sort_keys=False)
