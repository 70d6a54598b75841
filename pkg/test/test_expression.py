import numpy as np
import pytest

from lgf_demos.utils.errors import EmptyOperator, NonFinite, ParseError
from lgf_demos.utils.expression import (Const, ODECandidate, Var, additive_terms, build_sum, candidate_from_skeleton,
                                        candidate_from_text, complexity, evaluate, node, order_of, parse_expression,
                                        simplify, to_text)

PENDULUM = "2*u'' + u' + 5*u = 2*sin(0.5*t)"


def test_evaluate():
    assert evaluate(parse_expression('u + C'), {'u': 2.}, [3.]) == 5.
    assert evaluate(parse_expression('u^2 + t'), {'u': 3., 't': 1.}) == 10.
    pendulum = candidate_from_text(PENDULUM)
    assert evaluate(pendulum.operator, {'u': 1., "u'": 1., "u''": 1.}, pendulum.constants) == 8.


def test_evaluate_errors():
    with pytest.raises(NonFinite):
        evaluate(parse_expression('log(u)'), {'u': 0.})
    with pytest.raises(NonFinite):
        evaluate(parse_expression('u / t'), {'u': 1., 't': 0.})
    with pytest.raises(KeyError):
        evaluate(parse_expression('u + t'), {'u': 1.})


def test_evaluate_is_vectorised():
    t = np.linspace(0., 1., 5)
    np.testing.assert_allclose(evaluate(parse_expression('C*sin(t)'), {'t': t}, [2.]), 2. * np.sin(t))


def test_complexity():
    assert complexity(ODECandidate(Var('u'))) == 1
    cand = ODECandidate(node('Add', node('Mul', Const(0), Var('u')), Const(1)), None, (1., 2.))
    assert complexity(cand) == 5
    assert complexity(candidate_from_text(PENDULUM)) == 15


def test_order_of():
    assert order_of(parse_expression("u' + u")) == 1
    assert order_of(parse_expression('t')) == 0
    assert order_of(candidate_from_text(PENDULUM).operator) == 2


def test_canonical_text_round_trip():
    expr = parse_expression('C*u+sin(C*t)')
    text = to_text(expr)
    assert text == '((C0 * u) + sin((C1 * t)))'
    assert parse_expression(text) == expr


def test_candidate_from_text_splits_operator_and_input():
    cand = candidate_from_text(PENDULUM)
    assert cand.order == 2
    assert cand.autonomous
    assert cand.constants == (2., 5., 2., 0.5)
    assert to_text(cand.operator) == "(((C0 * u'') + u') + (C1 * u))"
    assert to_text(cand.input) == '(C2 * sin((C3 * t)))'
    t = np.linspace(0., 3., 7)
    np.testing.assert_allclose(cand.input_values(t), 2. * np.sin(0.5 * t))


def test_candidate_from_text_keeps_exponents():
    cand = candidate_from_text("u' = u^2")
    assert cand.n_constants == 0
    assert cand.input is None
    assert not candidate_from_text("1.2*u'' + 0.8*t*u' + 3*u = 0").autonomous


def test_explicit_candidate():
    cand = candidate_from_text('-0.8*u', explicit_order=1)
    bindings = {'u': np.array([1., 2.]), "u'": np.array([-0.8, -1.6])}
    np.testing.assert_allclose(cand.operator_values(bindings), 0., atol=1e-12)
    assert cand.order == 1


def test_candidate_from_skeleton():
    cand = candidate_from_skeleton('C*u+C*t', explicit_order=1)
    assert to_text(cand.operator) == "(u' - (C0 * u))"
    assert to_text(cand.input) == '(C1 * t)'
    assert cand.constants == (1., 1.)
    with pytest.raises(EmptyOperator):
        candidate_from_skeleton('C*t')
    with pytest.raises(ParseError):
        candidate_from_text('C*u = 0')


def test_with_constants_checks_slot_count():
    cand = candidate_from_skeleton('C*u+C*t', explicit_order=1)
    assert cand.with_constants([0.5, 2.]).constants == (0.5, 2.)
    with pytest.raises(AssertionError):
        cand.with_constants([1.])


def test_additive_terms_round_trip():
    expr = parse_expression('u - C*t + sin(u)')
    terms = additive_terms(expr)
    assert [s for s, _ in terms] == [1, -1, 1]
    assert additive_terms(build_sum(terms)) == terms


def test_simplify_drops_small_terms():
    cand = candidate_from_text("2.1*u' + 0.003*sin(t)")
    simple = simplify(cand, eps_sum=1e-2, eps_mul=1e-2)
    assert simple.input is None
    assert to_text(simple.operator) == "(C0 * u')"
    assert simple.constants == (2.1,)


def test_simplify_drops_unit_factors():
    cand = candidate_from_text("1.0004*u'' + 3*u")
    simple = simplify(cand, eps_sum=1e-2, eps_mul=1e-2)
    assert to_text(simple.operator) == "(u'' + (C0 * u))"
    assert simple.constants == (3.,)
    # factor dropping disabled
    assert simplify(cand, eps_sum=1e-2, eps_mul=0.) == cand


def test_simplify_renumbers_slots():
    cand = candidate_from_skeleton('C*u+C*t', explicit_order=1).with_constants([0.5, 0.001])
    simple = simplify(cand)
    assert simple.input is None
    assert simple.n_constants == 1 and simple.constants == (0.5,)


def test_simplify_rejects_empty_operator():
    cand = candidate_from_skeleton('C*u+C*t').with_constants([0.001, 1.])
    with pytest.raises(EmptyOperator):
        simplify(cand)


def test_simplify_is_idempotent_and_never_more_complex(rng):
    skeletons = ["C*u''+C*u'+C*u+C*sin(C*t)", "C*u'+C*u^2+C*t", "C*u''+C*u*C+C"]
    for _ in range(100):
        skeleton = candidate_from_skeleton(skeletons[rng.integers(len(skeletons))])
        constants = rng.choice([0., 0.001, 1., 1.005, 2.5, -3.], size=skeleton.n_constants)
        constants[0] = 2.
        once = simplify(skeleton.with_constants(constants))
        assert simplify(once) == once
        assert complexity(once) <= complexity(skeleton)
