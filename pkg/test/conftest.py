import os

import numpy as np
import pytest

from lgf_demos.grammars.cfg_grammar import Grammar

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
GRAMMARS = os.path.join(ROOT, 'config', 'grammars')


@pytest.fixture
def toy_grammar():
    return Grammar.from_file(os.path.join(GRAMMARS, 'toy.grammar'))


@pytest.fixture
def second_order_grammar():
    return Grammar.from_file(os.path.join(GRAMMARS, 'second_order.grammar'))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
