import hashlib
import itertools
import logging
import re
from collections import namedtuple

import nltk
import numpy as np

from lgf_demos.utils.errors import (AmbiguityError, ConfigError, DecodeOverflow, GrammarError,
                                    IncompleteDerivation, LengthError, ParseError)

logger = logging.getLogger("lgf.grammar")

PAD = 'PAD'
DERIVATIVE_ORDER = {"u''": 2, "u'": 1}
NUMBER = r'(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?'

ProductionRule = namedtuple('ProductionRule', ['lhs', 'rhs'])


class Grammar(object):
    """
    Context-free grammar over equation skeletons. Equations are handled as
    leftmost derivations, i.e. tuples of rule indices into self.rules, in the
    order the rules appear in the grammar file.
    ---
    Grammar file format, one item per line:
        LHS -> RHS1 RHS2 ...     production rule (whitespace-separated tokens)
        S -> PAD                 the padding rule
        # ...                    comment
        %start S                 start symbol (default: LHS of the first rule)
        %unambiguous             declare the grammar unambiguous, enables parse()
        %explicit 1              strings are the right-hand side f of u^(n) = f
    """

    def __init__(self, rules, start=None, unambiguous=False, explicit_order=0, name=None):
        self.name = name
        self.rules = tuple(ProductionRule(lhs, tuple(rhs)) for lhs, rhs in rules)
        self.start = start if start is not None else self.rules[0].lhs
        self.unambiguous = unambiguous
        self.explicit_order = int(explicit_order)

        pads = [i for i, rule in enumerate(self.rules) if rule.rhs == (PAD,)]
        if len(pads) != 1:
            raise GrammarError('Grammar needs exactly one padding rule, found {}.'.format(len(pads)))
        self.padding_rule_index = pads[0]
        if self.rules[self.padding_rule_index].lhs != self.start:
            raise GrammarError('The padding rule must expand the start symbol.')

        self.nonterminals = frozenset(rule.lhs for rule in self.rules)
        if self.start not in self.nonterminals:
            raise GrammarError('Start symbol {} has no rules.'.format(self.start))
        self.terminals = frozenset(sym for rule in self.rules for sym in rule.rhs
                                   if sym not in self.nonterminals and sym != PAD)
        if len(set(self.rules)) != len(self.rules):
            raise GrammarError('Duplicate production rules.')

        # ---- Masks: rules eligible for each nonterminal, padding excluded ---- #
        self.lhs_list = sorted(self.nonterminals)
        self._lhs_map = {lhs: ix for ix, lhs in enumerate(self.lhs_list)}
        self.masks = np.zeros((len(self.lhs_list), self.n_rules), dtype=bool)
        for ix, rule in enumerate(self.rules):
            if ix != self.padding_rule_index:
                self.masks[self._lhs_map[rule.lhs], ix] = True
        self._rhs_nonterminals = [tuple(sym for sym in rule.rhs if sym in self.nonterminals)
                                  for rule in self.rules]

        self._build_parser()
        self._build_tokenizer()

    @classmethod
    def from_string(cls, text, name=None):
        rules = []
        start = None
        unambiguous = False
        explicit_order = 0
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith('#'):
                continue
            if line.startswith('%'):
                parts = line[1:].split()
                if parts[0] == 'start' and len(parts) == 2:
                    start = parts[1]
                elif parts[0] == 'unambiguous' and len(parts) == 1:
                    unambiguous = True
                elif parts[0] == 'explicit' and len(parts) == 2:
                    explicit_order = int(parts[1])
                else:
                    raise GrammarError('Line {}: unknown directive {!r}.'.format(lineno, line))
                continue
            if '->' not in line:
                raise GrammarError('Line {}: expected "LHS -> RHS", got {!r}.'.format(lineno, line))
            lhs, rhs = line.split('->', 1)
            lhs = lhs.strip()
            rhs = rhs.split()
            if not lhs or len(lhs.split()) != 1 or not rhs:
                raise GrammarError('Line {}: malformed rule {!r}.'.format(lineno, line))
            rules.append((lhs, rhs))
        if not rules:
            raise GrammarError('Grammar has no rules.')
        return cls(rules, start=start, unambiguous=unambiguous,
                   explicit_order=explicit_order, name=name)

    @classmethod
    def from_file(cls, path):
        with open(path, encoding='utf-8') as f:
            return cls.from_string(f.read(), name=str(path))

    @property
    def n_rules(self):
        return len(self.rules)

    def digest(self):
        """Stable hash of the rule list and directives, stored next to trained models."""
        lines = ['%start ' + self.start, '%explicit {}'.format(self.explicit_order)]
        lines += ['{} -> {}'.format(rule.lhs, ' '.join(rule.rhs)) for rule in self.rules]
        return hashlib.sha256('\n'.join(lines).encode('utf-8')).hexdigest()

    def __str__(self):
        return '\n'.join('{:3d}: {} -> {}'.format(ix, rule.lhs, ' '.join(rule.rhs))
                         for ix, rule in enumerate(self.rules))

    # ---- Tokenisation ---- #

    def _build_tokenizer(self):
        symbols = sorted(self.terminals, key=len, reverse=True)
        alternatives = [r'C\d*(?![A-Za-z_])', NUMBER] + [re.escape(sym) for sym in symbols]
        self._token_re = re.compile(r'\s*(?:' + '|'.join('({})'.format(a) for a in alternatives) + r')')

    def tokenize(self, text):
        """
        Split an expression into grammar terminals. Scalar literals and indexed
        placeholders (C0, C1, ...) become C, except a literal directly after '^'
        that is itself a terminal (integer exponents).
        """
        tokens = []
        pos = 0
        text = text.rstrip()
        while pos < len(text):
            match = self._token_re.match(text, pos)
            if match is None or match.end() == pos:
                raise ParseError('Cannot tokenise {!r} at position {}.'.format(text, pos))
            placeholder, number = match.group(1), match.group(2)
            if placeholder is not None:
                tokens.append('C')
            elif number is not None:
                if tokens and tokens[-1] == '^' and number in self.terminals:
                    tokens.append(number)
                else:
                    tokens.append('C')
            else:
                tokens.append(match.group(0).strip())
            pos = match.end()
        return tokens

    # ---- Parse / realize ---- #

    def _build_parser(self):
        productions = []
        self._prod_map = {}
        for ix, rule in enumerate(self.rules):
            if ix == self.padding_rule_index:
                continue
            rhs = [nltk.grammar.Nonterminal(sym) if sym in self.nonterminals else sym for sym in rule.rhs]
            prod = nltk.grammar.Production(nltk.grammar.Nonterminal(rule.lhs), rhs)
            productions.append(prod)
            self._prod_map[prod] = ix
        cfg = nltk.grammar.CFG(nltk.grammar.Nonterminal(self.start), productions)
        self._cfg_parser = nltk.ChartParser(cfg)

    def parse(self, expression_text):
        """
        Leftmost derivation of an expression.
        ---
        Params:
            expression_text [str] -- terminal string, constants as C or literals.

        Returns:
            seq [tuple] -- rule indices, padding excluded.
        """
        if not self.unambiguous:
            raise GrammarError('parse() needs a grammar declared %unambiguous.')
        tokens = self.tokenize(expression_text)
        if not tokens:
            raise ParseError('Empty expression.')
        try:
            trees = list(itertools.islice(self._cfg_parser.parse(tokens), 2))
        except ValueError as e:
            raise ParseError(str(e))
        if not trees:
            raise ParseError('{!r} is not in the language of the grammar.'.format(expression_text))
        if len(trees) > 1:
            raise AmbiguityError('{!r} has more than one leftmost derivation.'.format(expression_text))
        return tuple(self._prod_map[prod] for prod in trees[0].productions())

    def derive(self, seq):
        """
        Apply rules leftmost from the start symbol.
        ---
        Returns:
            tokens [list] -- the terminal string as a list of tokens.
        """
        form = [self.start]
        ended = False
        for ix in seq:
            ix = int(ix)
            if not 0 <= ix < self.n_rules:
                raise GrammarError('Rule index {} out of range.'.format(ix))
            if ix == self.padding_rule_index:
                ended = True
                continue
            if ended:
                raise IncompleteDerivation('Rule {} follows the padding rule.'.format(ix))
            pos = next((i for i, sym in enumerate(form) if sym in self.nonterminals), None)
            if pos is None:
                raise GrammarError('Rule {} applied to a complete derivation.'.format(ix))
            rule = self.rules[ix]
            if form[pos] != rule.lhs:
                raise GrammarError('Rule {} expands {}, leftmost nonterminal is {}.'.format(ix, rule.lhs, form[pos]))
            form[pos:pos + 1] = list(rule.rhs)
        remaining = [sym for sym in form if sym in self.nonterminals]
        if remaining:
            raise IncompleteDerivation('Nonterminals {} remain after {} rules.'.format(remaining, len(seq)))
        return form

    def realize(self, seq):
        return ''.join(self.derive(seq))

    def order_of_sequence(self, seq):
        """Highest derivative of u used by a derivation (grammar-level order annotation)."""
        order = self.explicit_order
        for ix in seq:
            for sym in self.rules[ix].rhs:
                order = max(order, DERIVATIVE_ORDER.get(sym, 0))
        return order

    # ---- One-hot encoding and masked decoding ---- #

    def encode_one_hot(self, seq, N_max):
        if len(seq) > N_max:
            raise LengthError('Sequence of length {} exceeds N_max={}.'.format(len(seq), N_max))
        X = np.zeros((N_max, self.n_rules), dtype=np.float32)
        X[np.arange(len(seq)), list(seq)] = 1.
        X[np.arange(len(seq), N_max), self.padding_rule_index] = 1.
        return X

    def masked_decode(self, logits, mode='argmax', rng=None):
        """
        Decode rule logits into a derivation, allowing at each row only the rules
        whose LHS is the leftmost open nonterminal.
        ---
        Params:
            logits [array] -- N_max x n_r unnormalised scores.
            mode [str] -- 'argmax' or 'sample'.
            rng [Generator] -- numpy random generator, required when sampling.

        Returns:
            seq [tuple] -- rule indices of the complete derivation.
        """
        logits = np.asarray(logits, dtype=np.float64)
        assert logits.ndim == 2 and logits.shape[1] == self.n_rules, \
            'Logits must be N_max x {}, got {}.'.format(self.n_rules, logits.shape)
        assert np.all(np.isfinite(logits)), 'Logits must be finite.'
        if mode == 'sample' and rng is None:
            raise ConfigError('Sampling requires a random generator.')

        stack = [self.start]
        seq = []
        for row in logits:
            if not stack:
                break
            mask = self.masks[self._lhs_map[stack.pop()]]
            if mode == 'argmax':
                ix = int(np.argmax(np.where(mask, row, -np.inf)))
            elif mode == 'sample':
                scores = np.where(mask, row - row[mask].max(), -np.inf)
                p = np.exp(scores)
                ix = int(rng.choice(self.n_rules, p=p / p.sum()))
            else:
                raise ConfigError('Decode mode {} not implemented.'.format(mode))
            seq.append(ix)
            stack.extend(reversed(self._rhs_nonterminals[ix]))
        if stack:
            raise DecodeOverflow('Derivation still open after {} rules.'.format(logits.shape[0]))
        return tuple(seq)

    def decode_argmax(self, X):
        """Most likely complete derivation for one row of rule scores."""
        return self.masked_decode(X, mode='argmax')

    def random_derivation(self, rng, N_max, max_tries=1000):
        """Derivation sampled uniformly over eligible rules, rejecting overflows."""
        for _ in range(max_tries):
            try:
                return self.masked_decode(np.zeros((N_max, self.n_rules)), mode='sample', rng=rng)
            except DecodeOverflow:
                continue
        raise DecodeOverflow('No derivation shorter than {} rules in {} tries.'.format(N_max, max_tries))

    def check_ambiguity(self, max_length):
        """
        Enumerate all derivations of at most max_length rules and look for two
        that realize the same token string.
        ---
        Returns:
            text [str or None] -- a witness string with two derivations, or None.
        """
        seen = {}
        frontier = [((), (self.start,))]
        while frontier:
            seq, form = frontier.pop()
            pos = next((i for i, sym in enumerate(form) if sym in self.nonterminals), None)
            if pos is None:
                key = tuple(form)
                if key in seen and seen[key] != seq:
                    return ''.join(form)
                seen[key] = seq
                continue
            if len(seq) >= max_length:
                continue
            for ix in np.flatnonzero(self.masks[self._lhs_map[form[pos]]]):
                frontier.append((seq + (int(ix),), form[:pos] + self.rules[ix].rhs + form[pos + 1:]))
        return None
