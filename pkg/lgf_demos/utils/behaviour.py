import hashlib
import logging
import threading
from dataclasses import dataclass

import numpy as np
import torch

logger = logging.getLogger("lgf.behaviour")

CLIP = 1e10
EPS_LOG = 1e-12


class VectorFieldGrid(object):
	"""
	Fixed sample points of the vector field, identical for every skeleton.
	Points are laid out t-major, then u, then u'. Second-order operators are
	evaluated with u'' held at uddot so the leading term contributes an offset.
	"""
	def __init__(self, t_range=(0., 10.), n_t=8, u_range=(0., 100.), n_u=16,
				 udot_range=(0., 500.), n_udot=16, uddot=1.0):
		self.t_samples = np.linspace(*t_range, n_t)
		self.u_samples = np.linspace(*u_range, n_u)
		self.udot_samples = np.linspace(*udot_range, n_udot)
		t, u, udot = np.meshgrid(self.t_samples, self.u_samples, self.udot_samples, indexing='ij')
		self.bindings = {'t': t.ravel(), 'u': u.ravel(), "u'": udot.ravel(),
						 "u''": np.full(t.size, float(uddot))}

	@property
	def n_points(self):
		return self.bindings['t'].size


DEFAULT_GRID = VectorFieldGrid()


@dataclass(frozen=True, eq=False)
class BehaviourSignature:
	mu: np.ndarray
	sigma: np.ndarray


def sample_signature(skeleton, rng, grid=DEFAULT_GRID, n_draws=25, low=-10., high=10.):
	"""
	Mean and standard deviation of the operator D over the grid under random
	constants. Non-finite evaluations are clipped to +-1e10 before aggregating.
	---
	Params:
		skeleton [ODECandidate] -- only its operator is evaluated.
		rng [Generator] -- source of the constant draws.
		n_draws [int] -- number of constant draws from Uniform(low, high).

	Returns:
		signature [BehaviourSignature]
	"""
	draws = rng.uniform(low, high, size=(n_draws, skeleton.n_constants))
	values = np.empty((n_draws, grid.n_points))
	for k, constants in enumerate(draws):
		values[k] = skeleton.operator_values(grid.bindings, constants)
	values = np.clip(np.nan_to_num(values, nan=CLIP, posinf=CLIP, neginf=-CLIP), -CLIP, CLIP)
	mu = np.clip(values.mean(axis=0), -CLIP, CLIP)
	sigma = np.clip(values.std(axis=0), 0., CLIP)
	return BehaviourSignature(mu, sigma)


def wasserstein_distance(a, b, eps_log=EPS_LOG):
	"""Log of the grid-mean squared distance between two Gaussian signatures, floored at log(eps_log)."""
	msd = np.mean((a.mu - b.mu) ** 2 + (a.sigma - b.sigma) ** 2)
	return float(np.log(max(msd, eps_log)))


def behavioural_loss(z_e_i, z_e_j, d_w, lambda_w=1e-2):
	"""
	||z_e_i - z_e_j|| - lambda_w * d_w, averaged over a batch of pairs.
	---
	Params:
		z_e_i, z_e_j [tensor] -- B x ... encoded latents, or one flat latent each.
		d_w [tensor or float] -- behavioural distances of the pairs, shape B.

	Returns:
		loss [tensor] -- scalar
	"""
	z_e_i, z_e_j = torch.as_tensor(z_e_i), torch.as_tensor(z_e_j)
	if z_e_i.dim() == 1:
		z_e_i, z_e_j = z_e_i.unsqueeze(0), z_e_j.unsqueeze(0)
	sq = ((z_e_i - z_e_j).flatten(start_dim=1) ** 2).sum(dim=1)
	# sqrt has no gradient at 0; identical latents contribute a zero subgradient
	positive = sq > 0
	dist = torch.where(positive, torch.sqrt(torch.where(positive, sq, torch.ones_like(sq))), torch.zeros_like(sq))
	d_w = torch.as_tensor(d_w, dtype=dist.dtype)
	return (dist - lambda_w * d_w).mean()


def skeleton_key(seq):
	return hashlib.sha256(','.join(str(int(i)) for i in seq).encode('ascii')).hexdigest()


class SignatureCache(object):
	"""
	Behaviour signatures keyed by rule sequence. Each skeleton gets its own
	random stream derived from (seed, key) so entries do not depend on the
	order in which skeletons are visited.
	"""
	def __init__(self, seed=0, grid=DEFAULT_GRID, n_draws=25):
		self.seed = seed
		self.grid = grid
		self.n_draws = n_draws
		self._entries = {}
		self._lock = threading.Lock()

	def __len__(self):
		return len(self._entries)

	def __contains__(self, seq):
		return skeleton_key(seq) in self._entries

	def get(self, seq, skeleton):
		key = skeleton_key(seq)
		signature = self._entries.get(key)
		if signature is None:
			rng = np.random.default_rng([self.seed, int(key[:12], 16)])
			signature = sample_signature(skeleton, rng, self.grid, self.n_draws)
			with self._lock:
				signature = self._entries.setdefault(key, signature)
		return signature

	def save(self, path):
		n = self.grid.n_points
		dtype = np.dtype([('key', 'S64'), ('mu', '<f8', (n,)), ('sigma', '<f8', (n,))])
		records = np.empty(len(self._entries), dtype=dtype)
		for ix, key in enumerate(sorted(self._entries)):
			records[ix] = (key.encode('ascii'), self._entries[key].mu, self._entries[key].sigma)
		with open(path, 'wb') as f:
			np.save(f, records, allow_pickle=False)
		logger.info(f'Saved {len(records)} behaviour signatures to {path}')

	@classmethod
	def load(cls, path, seed=0, grid=DEFAULT_GRID, n_draws=25):
		cache = cls(seed, grid, n_draws)
		records = np.load(path, allow_pickle=False)
		for rec in records:
			cache._entries[rec['key'].decode('ascii')] = BehaviourSignature(np.array(rec['mu']), np.array(rec['sigma']))
		return cache
