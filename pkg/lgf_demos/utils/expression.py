"""
Expression trees for ODE skeletons and the implicit-form candidate D(u) - F(t) = 0.
"""
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional, Tuple

import numpy as np

from lgf_demos.utils.errors import EmptyOperator, NonFinite, ParseError

BINARY = ('Add', 'Sub', 'Mul', 'Div', 'Pow')
UNARY = ('Sin', 'Cos', 'Exp', 'Log')
LEAVES = ('Var', 'Const', 'Literal')
VARIABLES = ('t', 'u', "u'", "u''")
DERIVATIVE_ORDER = {'u': 0, "u'": 1, "u''": 2}
SYMBOLS = {'Add': '+', 'Sub': '-', 'Mul': '*', 'Div': '/', 'Pow': '^'}
FUNCTIONS = {'sin': 'Sin', 'cos': 'Cos', 'exp': 'Exp', 'log': 'Log'}


@dataclass(frozen=True)
class Expression:
	"""
	Immutable expression node.
	---
	kind		one of Add, Sub, Mul, Div, Pow, Sin, Cos, Exp, Log, Var, Const, Literal
	children	sub-expressions (2 for binary ops, 1 for functions, 0 for leaves)
	value		variable name for Var, slot index for Const, float for Literal
	"""
	kind: str
	children: Tuple['Expression', ...] = ()
	value: object = None

	def __post_init__(self):
		arity = 2 if self.kind in BINARY else 1 if self.kind in UNARY else 0 if self.kind in LEAVES else None
		assert arity is not None, 'Unknown node kind {}.'.format(self.kind)
		assert len(self.children) == arity, '{} takes {} children, got {}.'.format(self.kind, arity, len(self.children))
		if self.kind == 'Var':
			assert self.value in VARIABLES, 'Unknown variable {}.'.format(self.value)

	def __getstate__(self):
		state = dict(self.__dict__)
		state.pop('fn', None)
		return state

	def __setstate__(self, state):
		self.__dict__.update(state)

	def __str__(self):
		return to_text(self)

	@cached_property
	def fn(self):
		"""The node compiled to a closure f(bindings, constants) over numpy arrays."""
		return _compile(self)

	def nodes(self):
		"""Pre-order (left-to-right) traversal."""
		yield self
		for child in self.children:
			yield from child.nodes()


def Var(name):
	return Expression('Var', value=name)


def Const(slot):
	return Expression('Const', value=int(slot))


def Literal(x):
	return Expression('Literal', value=float(x))


def node(kind, *children):
	return Expression(kind, tuple(children))


# ---- Evaluation ---- #

_UFUNCS = {'Add': np.add, 'Sub': np.subtract, 'Mul': np.multiply, 'Div': np.divide, 'Pow': np.power,
		   'Sin': np.sin, 'Cos': np.cos, 'Exp': np.exp, 'Log': np.log}


def _compile(expr):
	if expr.kind == 'Var':
		name = expr.value
		return lambda b, c: b[name]
	if expr.kind == 'Const':
		slot = expr.value
		return lambda b, c: c[slot]
	if expr.kind == 'Literal':
		x = expr.value
		return lambda b, c: x
	op = _UFUNCS[expr.kind]
	if len(expr.children) == 1:
		f = expr.children[0].fn
		return lambda b, c: op(f(b, c))
	f, g = expr.children[0].fn, expr.children[1].fn
	return lambda b, c: op(f(b, c), g(b, c))


def evaluate_array(expr, bindings, constants=()):
	"""
	Vectorised evaluation; non-finite values are returned as inf/nan, not raised.
	---
	Params:
		expr [Expression] -- expression to evaluate.
		bindings [dict] -- values (scalars or arrays) for t, u, u', u''.
		constants [array] -- values of the constant slots.

	Returns:
		y [array or float] -- broadcast result, float64.
	"""
	with np.errstate(all='ignore'):
		return np.asarray(expr.fn(bindings, np.asarray(constants, dtype=np.float64)), dtype=np.float64)


def evaluate(expr, bindings, constants=()):
	missing = variables(expr) - set(bindings)
	if missing:
		raise KeyError('No binding for {}.'.format(sorted(missing)))
	n_c = max(constant_slots(expr), default=-1) + 1
	assert len(constants) >= n_c, 'Expression needs {} constants, got {}.'.format(n_c, len(constants))
	y = evaluate_array(expr, bindings, constants)
	if not np.all(np.isfinite(y)):
		raise NonFinite('{} evaluated to {}.'.format(to_text(expr), y))
	return float(y) if y.ndim == 0 else y


# ---- Structure ---- #

def variables(expr):
	return {n.value for n in expr.nodes() if n.kind == 'Var'}


def constant_slots(expr):
	return [n.value for n in expr.nodes() if n.kind == 'Const']


def depends_on_u(expr):
	return bool(variables(expr) & set(DERIVATIVE_ORDER))


def order_of(expr):
	"""Highest derivative of u appearing in expr, 0 if none."""
	return max((DERIVATIVE_ORDER.get(name, 0) for name in variables(expr)), default=0)


def node_count(expr):
	"""Operators, variables and constants each count one; parentheses are not nodes."""
	return sum(1 for _ in expr.nodes())


def additive_terms(expr, sign=1):
	"""Flatten Add/Sub chains into signed summands [(+-1, term), ...]."""
	if expr.kind == 'Add':
		return additive_terms(expr.children[0], sign) + additive_terms(expr.children[1], sign)
	if expr.kind == 'Sub':
		return additive_terms(expr.children[0], sign) + additive_terms(expr.children[1], -sign)
	if expr.kind == 'Mul' and expr.children[0] == Literal(-1.0):
		return additive_terms(expr.children[1], -sign)
	return [(sign, expr)]


def build_sum(terms):
	"""Inverse of additive_terms; a leading negative term is written as -1*term."""
	assert terms, 'Cannot build an empty sum.'
	sign, expr = terms[0]
	if sign < 0:
		expr = node('Mul', Literal(-1.0), expr)
	for sign, term in terms[1:]:
		expr = node('Add' if sign > 0 else 'Sub', expr, term)
	return expr


def multiplicative_factors(expr):
	"""Flatten Mul/Div chains into [(factor, in_denominator), ...]."""
	if expr.kind == 'Mul':
		return multiplicative_factors(expr.children[0]) + multiplicative_factors(expr.children[1])
	if expr.kind == 'Div':
		return multiplicative_factors(expr.children[0]) + [(expr.children[1], True)]
	return [(expr, False)]


def build_product(factors):
	numerators = [f for f, den in factors if not den]
	expr = numerators[0]
	for f in numerators[1:]:
		expr = node('Mul', expr, f)
	for f, den in factors:
		if den:
			expr = node('Div', expr, f)
	return expr


def renumber(exprs, constants):
	"""
	Renumber constant slots 0..n_c-1 in left-to-right order over exprs (None
	entries are skipped) and permute the constant vector to match.
	"""
	order = []
	for expr in exprs:
		if expr is not None:
			for slot in constant_slots(expr):
				if slot not in order:
					order.append(slot)
	mapping = {old: new for new, old in enumerate(order)}

	def _map(expr):
		if expr.kind == 'Const':
			return Const(mapping[expr.value])
		if not expr.children:
			return expr
		return Expression(expr.kind, tuple(_map(c) for c in expr.children))

	new_exprs = [None if e is None else _map(e) for e in exprs]
	new_constants = tuple(float(constants[old]) for old in order) if len(constants) else tuple(1.0 for _ in order)
	return new_exprs, new_constants


# ---- Text ---- #

def _format_number(x):
	if float(x).is_integer() and abs(x) < 1e15:
		return str(int(x))
	return '{:.6g}'.format(x)


def to_text(expr, constants=None):
	"""Canonical infix text: explicit parentheses around binary ops, C{k} placeholders."""
	if expr.kind == 'Var':
		return expr.value
	if expr.kind == 'Const':
		if constants is None:
			return 'C{}'.format(expr.value)
		value = constants[expr.value]
		return _format_number(value) if value >= 0 else '({})'.format(_format_number(value))
	if expr.kind == 'Literal':
		return _format_number(expr.value) if expr.value >= 0 else '({})'.format(_format_number(expr.value))
	if expr.kind in UNARY:
		return '{}({})'.format(expr.kind.lower(), to_text(expr.children[0], constants))
	a, b = (to_text(c, constants) for c in expr.children)
	return '({} {} {})'.format(a, SYMBOLS[expr.kind], b)


_TOKEN_RE = re.compile(r"\s*(C\d*(?![A-Za-z_])|(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?"
						r"|u''|u'|\*\*|sin|cos|exp|log|[tu+\-*/^()=])")


def _tokenize(text):
	tokens = []
	pos = 0
	text = text.strip()
	while pos < len(text):
		match = _TOKEN_RE.match(text, pos)
		if match is None:
			raise ParseError('Cannot tokenise {!r} at position {}.'.format(text, pos))
		tok = match.group(1)
		tokens.append('^' if tok == '**' else tok)
		pos = match.end()
	return tokens


class _ExpressionParser(object):
	"""Recursive-descent parser: + - < * / < unary minus < ^ (right associative)."""

	def __init__(self, text):
		self.text = text
		self.tokens = _tokenize(text)
		self.pos = 0
		self.next_slot = 0
		self.explicit_slots = False

	def peek(self):
		return self.tokens[self.pos] if self.pos < len(self.tokens) else None

	def take(self, expected=None):
		tok = self.peek()
		if tok is None or (expected is not None and tok != expected):
			raise ParseError('Expected {!r} in {!r}, found {!r}.'.format(expected or 'a token', self.text, tok))
		self.pos += 1
		return tok

	def equation(self):
		lhs = self.expr()
		rhs = None
		if self.peek() == '=':
			self.take('=')
			rhs = self.expr()
		if self.peek() is not None:
			raise ParseError('Unexpected {!r} in {!r}.'.format(self.peek(), self.text))
		return lhs, rhs

	def expr(self):
		left = self.term()
		while self.peek() in ('+', '-'):
			kind = 'Add' if self.take() == '+' else 'Sub'
			left = node(kind, left, self.term())
		return left

	def term(self):
		left = self.unary()
		while self.peek() in ('*', '/'):
			kind = 'Mul' if self.take() == '*' else 'Div'
			left = node(kind, left, self.unary())
		return left

	def unary(self):
		if self.peek() == '-':
			self.take('-')
			operand = self.unary()
			if operand.kind == 'Literal':
				return Literal(-operand.value)
			return node('Mul', Literal(-1.0), operand)
		return self.power()

	def power(self):
		base = self.atom()
		if self.peek() == '^':
			self.take('^')
			return node('Pow', base, self.unary())
		return base

	def atom(self):
		tok = self.take()
		if tok == '(':
			inner = self.expr()
			self.take(')')
			return inner
		if tok in FUNCTIONS:
			self.take('(')
			inner = self.expr()
			self.take(')')
			return node(FUNCTIONS[tok], inner)
		if tok in VARIABLES:
			return Var(tok)
		if tok.startswith('C'):
			if len(tok) > 1:
				self.explicit_slots = True
				return Const(int(tok[1:]))
			slot = self.next_slot
			self.next_slot += 1
			return Const(slot)
		try:
			return Literal(float(tok))
		except ValueError:
			raise ParseError('Unexpected {!r} in {!r}.'.format(tok, self.text))


def parse_expression(text):
	"""Parse infix text (skeleton with C / C{k} placeholders, or with literals)."""
	parser = _ExpressionParser(text)
	lhs, rhs = parser.equation()
	if rhs is not None:
		raise ParseError('{!r} is an equation, not an expression.'.format(text))
	return lhs


def abstract_literals(expr, first_slot=0):
	"""
	Replace scalar literals by constant slots, numbered from first_slot in
	traversal order. Literal exponents of Pow and the -1 of a negation stay.
	---
	Returns:
		(expr, values) -- abstracted expression and the literal values per slot.
	"""
	values = []

	def _walk(e, keep=False):
		if e.kind == 'Literal' and not keep:
			values.append(e.value)
			return Const(first_slot + len(values) - 1)
		if not e.children:
			return e
		if e.kind == 'Pow':
			return node('Pow', _walk(e.children[0]), _walk(e.children[1], keep=e.children[1].kind == 'Literal'))
		if e.kind == 'Mul' and e.children[0] == Literal(-1.0):
			return node('Mul', e.children[0], _walk(e.children[1]))
		return node(e.kind, *(_walk(c) for c in e.children))

	return _walk(expr), values


# ---- Candidates ---- #

@dataclass(frozen=True)
class ODECandidate:
	"""
	Implicit-form ODE D(u) - F(t) = 0.
	---
	operator	D, the terms depending on u, u' or u''
	input		F, a function of t only, or None
	constants	values of the constant slots (operator slots first, then input)
	skeleton_id	rule sequence the skeleton was decoded from, if any
	"""
	operator: Expression
	input: Optional[Expression] = None
	constants: Tuple[float, ...] = ()
	skeleton_id: Optional[Tuple[int, ...]] = field(default=None, compare=False)

	@property
	def order(self):
		return order_of(self.operator)

	@property
	def n_constants(self):
		return len(set(constant_slots(self.operator)) | set(constant_slots(self.input) if self.input is not None else []))

	@property
	def autonomous(self):
		return 't' not in variables(self.operator)

	def with_constants(self, constants):
		constants = tuple(float(c) for c in constants)
		assert len(constants) == self.n_constants, \
			'Candidate has {} constant slots, got {} values.'.format(self.n_constants, len(constants))
		return replace(self, constants=constants)

	def operator_values(self, bindings, constants=None):
		return evaluate_array(self.operator, bindings, self.constants if constants is None else constants)

	def input_values(self, t, constants=None):
		t = np.asarray(t, dtype=np.float64)
		if self.input is None:
			return np.zeros_like(t)
		return np.broadcast_to(evaluate_array(self.input, {'t': t}, self.constants if constants is None else constants),
							   t.shape).copy()

	def to_text(self, with_constants=False):
		constants = self.constants if with_constants else None
		rhs = to_text(self.input, constants) if self.input is not None else '0'
		return '{} = {}'.format(to_text(self.operator, constants), rhs)

	def __str__(self):
		return self.to_text(with_constants=bool(self.constants))


def complexity(cand):
	"""Number of operators, variables and constants over D and F."""
	return node_count(cand.operator) + (node_count(cand.input) if cand.input is not None else 0)


def _assemble(residual, values, skeleton_id=None):
	"""Split a residual expression R = D - F into an ODECandidate."""
	terms = additive_terms(residual)
	d_terms = [(s, t) for s, t in terms if depends_on_u(t)]
	f_terms = [(-s, t) for s, t in terms if not depends_on_u(t)]
	if not d_terms:
		raise EmptyOperator('{} has no term in u.'.format(to_text(residual)))
	d_terms, f_terms = _normalise_signs(d_terms, f_terms)
	(operator, inp), constants = renumber([build_sum(d_terms), build_sum(f_terms) if f_terms else None], values)
	return ODECandidate(operator, inp, constants, skeleton_id)


def _positive_first(terms):
	for i, (s, _) in enumerate(terms):
		if s > 0:
			return [terms[i]] + terms[:i] + terms[i + 1:]
	return terms


def _normalise_signs(d_terms, f_terms):
	d_terms = _positive_first(d_terms)
	if d_terms[0][0] < 0:
		d_terms = [(-s, t) for s, t in d_terms]
		f_terms = [(-s, t) for s, t in f_terms]
	return d_terms, _positive_first(f_terms)


def _highest_derivative(order):
	return Var({1: "u'", 2: "u''"}[order])


def candidate_from_skeleton(text, explicit_order=0, skeleton_id=None):
	"""
	Candidate from a grammar-generated skeleton string. With explicit_order n
	the string is the right-hand side f of u^(n) = f; otherwise it is the
	residual D(u) - F(t). Constants start at 1.
	"""
	expr = parse_expression(text)
	residual = node('Sub', _highest_derivative(explicit_order), expr) if explicit_order else expr
	return _assemble(residual, (), skeleton_id)


def candidate_from_text(text, explicit_order=0):
	"""
	Candidate from an equation with numeric constants, e.g.
	"2*u'' + u' + 5*u = 2*sin(0.5*t)". Literals become fitted constant slots.
	"""
	parser = _ExpressionParser(text)
	lhs, rhs = parser.equation()
	if explicit_order:
		assert rhs is None, 'An explicit equation is given by its right-hand side only.'
		lhs, rhs = _highest_derivative(explicit_order), lhs
	residual = lhs if rhs is None else node('Sub', lhs, rhs)
	if parser.next_slot or parser.explicit_slots:
		raise ParseError('{!r} contains placeholders; use candidate_from_skeleton.'.format(text))
	residual, values = abstract_literals(residual)
	return _assemble(residual, values)


# ---- Simplification ---- #

def _drop_factors(term, constants, eps_mul):
	factors = multiplicative_factors(term)
	kept = list(factors)
	for ix, (factor, in_denominator) in enumerate(factors):
		slots = constant_slots(factor)
		if not slots or variables(factor):
			continue
		if sum(abs(constants[s] - 1.0) for s in slots) >= eps_mul:
			continue
		# a term keeps at least one numerator factor
		if not in_denominator and sum(1 for f in kept if f is not None and not f[1]) == 1:
			continue
		kept[ix] = None
	kept = [f for f in kept if f is not None]
	return build_product(kept) if len(kept) != len(factors) else term


def _simplify_terms(terms, constants, eps_sum, eps_mul):
	out = []
	for sign, term in terms:
		term = _drop_factors(term, constants, eps_mul)
		slots = constant_slots(term)
		if slots and sum(constants[s] ** 2 for s in slots) < eps_sum:
			continue
		out.append((sign, term))
	return out


def simplify(cand, eps_sum=1e-2, eps_mul=1e-2):
	"""
	Drop multiplicative constant factors within eps_mul of 1, then top-level
	additive terms whose constants have squared sum below eps_sum. eps_mul=0
	disables factor dropping.
	"""
	constants = cand.constants
	d_terms = _simplify_terms(additive_terms(cand.operator), constants, eps_sum, eps_mul)
	if not d_terms:
		raise EmptyOperator('All terms of {} were eliminated.'.format(cand.to_text(True)))
	f_terms = _simplify_terms(additive_terms(cand.input), constants, eps_sum, eps_mul) if cand.input is not None else []
	d_terms, f_terms = _normalise_signs(d_terms, f_terms)
	(operator, inp), new_constants = renumber([build_sum(d_terms), build_sum(f_terms) if f_terms else None], constants)
	return ODECandidate(operator, inp, new_constants, cand.skeleton_id)
