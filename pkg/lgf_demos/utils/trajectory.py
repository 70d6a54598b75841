import numpy as np
import pandas as pd

from lgf_demos.utils.errors import DataError

# mode name -> (attribute, column in CSV files)
MODES = {'u': ('u', 'u'), "u'": ('udot', 'udot'), "u''": ('uddot', 'uddot')}
SOURCES = ('observed', 'solved', 'mlp-approximated')


class Trajectory(object):
	"""
	This class represents a sampled solution of a one-dimensional ODE: the
	time grid and whichever of u, u' and u'' are available.
	Supports interpolating, downsampling and conversion to data frames.
	"""
	def __init__(self, t, u=None, udot=None, uddot=None, source='observed'):
		self.t = np.asarray(t, dtype=np.float64)
		self.u = None if u is None else np.asarray(u, dtype=np.float64)
		self.udot = None if udot is None else np.asarray(udot, dtype=np.float64)
		self.uddot = None if uddot is None else np.asarray(uddot, dtype=np.float64)
		self.source = source

		if source not in SOURCES:
			raise DataError('Unknown trajectory source {}.'.format(source))
		if self.t.ndim != 1 or len(self.t) < 2:
			raise DataError('A trajectory needs at least two samples.')
		if not self.modes:
			raise DataError('A trajectory needs at least one mode.')
		for name in self.modes:
			if self.mode(name).shape != self.t.shape:
				raise DataError('Mode {} has {} samples, t has {}.'.format(name, len(self.mode(name)), len(self.t)))
		if np.any(np.diff(self.t) <= 0):
			raise DataError('Trajectory times must be strictly increasing.')
		self.n_samples = len(self.t)
		self.timestep = (self.t[-1] - self.t[0]) / (self.n_samples - 1)

	@property
	def modes(self):
		"""Names of the available modes, lowest derivative first."""
		return [name for name, (attr, _) in MODES.items() if getattr(self, attr) is not None]

	def mode(self, name):
		values = getattr(self, MODES[name][0])
		if values is None:
			raise DataError('Trajectory has no {} mode.'.format(name))
		return values

	def bindings(self):
		"""Variable bindings for expression evaluation over the samples."""
		values = {'t': self.t}
		values.update({name: self.mode(name) for name in self.modes})
		return values

	def interpolate(self, t):
		"""
		Gets the modes at time t by linear interpolation between samples.
		Times past either end return the first or last sample.

		Params:
			t [float or array] -- The time(s) of desired interpolation.

		Returns:
			values [dict] -- mode name -> interpolated value(s).
		"""
		return {name: np.interp(t, self.t, self.mode(name)) for name in self.modes}

	def downsample(self, num_samples):
		"""
		Resample the trajectory on num_samples equally spaced times.
		Error if num_samples is larger than the current number of samples.
		"""
		if num_samples > self.n_samples or num_samples < 2:
			raise DataError('Cannot downsample {} samples to {}.'.format(self.n_samples, num_samples))
		t = np.linspace(self.t[0], self.t[-1], num_samples)
		values = self.interpolate(t)
		return Trajectory(t, values.get('u'), values.get("u'"), values.get("u''"), self.source)

	def with_source(self, source):
		return Trajectory(self.t, self.u, self.udot, self.uddot, source)

	def to_frame(self):
		frame = pd.DataFrame({'t': self.t})
		for name in self.modes:
			frame[MODES[name][1]] = self.mode(name)
		return frame

	@classmethod
	def from_frame(cls, frame, source='observed'):
		if 't' not in frame:
			raise DataError('Trajectory data needs a t column, got {}.'.format(list(frame.columns)))

		def _column(name):
			if name not in frame or frame[name].isna().all():
				return None
			return frame[name].to_numpy(dtype=np.float64)
		return cls(frame['t'].to_numpy(dtype=np.float64), _column('u'), _column('udot'), _column('uddot'), source)
