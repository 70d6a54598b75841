import torch
import torch.nn as nn

from lgf_demos.utils.errors import ShapeError

ACTIVATIONS = {'relu': nn.ReLU, 'elu': nn.ELU, 'sigmoid': nn.Sigmoid, 'tanh': nn.Tanh,
			   'leaky_relu': nn.LeakyReLU, 'identity': nn.Identity}
# nn.init has no gain for ELU; its positive branch matches ReLU
GAINS = {'relu': 'relu', 'elu': 'relu', 'sigmoid': 'sigmoid', 'tanh': 'tanh',
		 'leaky_relu': 'leaky_relu', 'identity': 'linear'}


def weights_init(activation):
	def _init(m):
		if isinstance(m, (nn.Linear, nn.Conv1d)):
			torch.nn.init.xavier_normal_(m.weight, gain=nn.init.calculate_gain(GAINS[activation]))
			torch.nn.init.zeros_(m.bias)
	return _init


class DNN(nn.Module):
	"""
	Creates a fully connected NN with a configurable non-linearity and dropout
	after every hidden layer; the output layer is linear.
	---
	input nb_layers, nb_units, input_dim, output_dim
	output output_dim logits / values
	"""
	def __init__(self, nb_layers, nb_units, input_dim, output_dim=1, activation='relu', dropout=0.0):
		super(DNN, self).__init__()
		self.nb_layers = nb_layers
		self.input_dim = input_dim
		self.output_dim = output_dim

		layers = []
		dim_list = [input_dim] + [nb_units] * nb_layers + [output_dim]

		for i in range(len(dim_list) - 1):
			layers.append(nn.Linear(dim_list[i], dim_list[i+1]))

		self.fc = nn.ModuleList(layers)
		self.act = ACTIVATIONS[activation]()
		self.dropout = nn.Dropout(dropout)

		self.apply(weights_init(activation))

	def forward(self, x):
		if x.shape[-1] != self.input_dim:
			raise ShapeError('DNN expects {} input features, got {}.'.format(self.input_dim, x.shape[-1]))
		for layer in self.fc[:-1]:
			x = self.dropout(self.act(layer(x)))
		return self.fc[-1](x)


class ResidualBlock(nn.Module):
	"""x + act(W x + b), width preserved."""
	def __init__(self, width, activation='relu'):
		super(ResidualBlock, self).__init__()
		self.width = width
		self.linear = nn.Linear(width, width)
		self.act = ACTIVATIONS[activation]()
		self.apply(weights_init(activation))

	def forward(self, x):
		if x.shape[-1] != self.width:
			raise ShapeError('Residual block of width {} got {} features.'.format(self.width, x.shape[-1]))
		return x + self.act(self.linear(x))


class ConvStack(nn.Module):
	"""
	1-D convolutions over a sequence, stride 1 and 'same' zero padding so the
	sequence length is preserved.
	---
	input B x channels x length
	output B x out_channels x length
	"""
	def __init__(self, in_channels, out_channels, kernel_sizes=(7, 8, 9), activation='relu'):
		super(ConvStack, self).__init__()
		self.in_channels = in_channels
		channels = [in_channels] + [out_channels] * len(kernel_sizes)
		self.convs = nn.ModuleList([nn.Conv1d(channels[i], channels[i+1], k, padding='same')
									for i, k in enumerate(kernel_sizes)])
		self.act = ACTIVATIONS[activation]()
		self.apply(weights_init(activation))

	def forward(self, x):
		if x.dim() != 3 or x.shape[1] != self.in_channels:
			raise ShapeError('ConvStack expects B x {} x L input, got {}.'.format(self.in_channels, tuple(x.shape)))
		for conv in self.convs:
			x = self.act(conv(x))
		return x


class BiGRU(nn.Module):
	"""
	Stacked bidirectional GRU followed by an activation.
	---
	input B x length x input_dim
	output B x length x 2*hidden
	"""
	def __init__(self, input_dim, hidden=80, num_layers=2, activation='elu'):
		super(BiGRU, self).__init__()
		self.input_dim = input_dim
		self.gru = nn.GRU(input_dim, hidden, num_layers=num_layers, batch_first=True, bidirectional=True)
		self.act = ACTIVATIONS[activation]()

	@property
	def output_dim(self):
		return 2 * self.gru.hidden_size

	def forward(self, x):
		if x.dim() != 3 or x.shape[-1] != self.input_dim:
			raise ShapeError('BiGRU expects B x L x {} input, got {}.'.format(self.input_dim, tuple(x.shape)))
		out, _ = self.gru(x)
		return self.act(out)
