import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvperiodic import expr as ex
from mvperiodic.measure import ParticleCloud, mixture
from mvperiodic.model import (
    COUPLED, MAIN, ModelError, ModelSpec, builtin_example, eval_diffusion, eval_drift, eval_expr,
    ex53_force, zero_model,
)

TWO_PI = 2 * math.pi


def parse(s, T=TWO_PI, d=1):
    return ex.parse(s, T, d)


def test_eval_square_ignores_measure():
    mu = ParticleCloud.uniform([[5.0], [7.0]])
    assert eval_expr(parse("x1^2"), 0.0, [3.0], mu) == 9.0


def test_eval_observable_is_empirical_mean():
    mu = ParticleCloud.uniform([[0.0], [2.0]])
    assert eval_expr(parse("M[1]"), 0.3, [10.0], mu) == 1.0


def test_eval_example52_drift_by_hand():
    e = parse("-4*x1**3 + (1/8)*x1*sin(t) + M[1]")
    val = eval_expr(e, math.pi / 2, [1.0], ParticleCloud.dirac([2.0]))
    assert val == pytest.approx(-1.875, abs=1e-15)


def test_eval_dimension_mismatch():
    with pytest.raises(ModelError):
        eval_expr(parse("x1"), 0.0, [1.0, 2.0], ParticleCloud.dirac([0.0]))


def test_eval_nonfinite_atom_reports_atom():
    with pytest.raises(ex.ExprEvalError) as info:
        ex.evaluate(parse("x1 + 1"), 0.0, [math.inf])
    assert info.value.atom == ex.Coord(0)


@pytest.mark.parametrize("bad", ["t", "x1**7", "M[5]", "sin(0.5*w*t)", "x4", "1/x1", "exp(x1)",
                                 "M[1,0]", "sin(x1)"])
def test_parse_rejects(bad):
    with pytest.raises(ex.ExprError):
        parse(bad)


def test_parse_accepts_grammar_forms():
    e = parse("sqrt(2)*x1 - 2*cos(3*w*t) + M[2]/4 + x1^2")
    assert ex.degree(e) == 2
    assert ex.observables(e) == {(2,)}
    # sin(t) with T = 2*pi is sin(1*w*t)
    assert parse("sin(t)") == ex.sin(1, TWO_PI)
    assert parse("sin(-2*w*t)") == -ex.sin(2, TWO_PI)


def test_diff_rules():
    e = parse("x1**4 + 3*x1*sin(w*t)")
    d1 = ex.diff(e, 0)
    dt = ex.diff(e, "t")
    for x, t in [(0.3, 0.1), (-1.7, 2.0)]:
        assert ex.evaluate(d1, t, [x]) == pytest.approx(4 * x ** 3 + 3 * math.sin(t))
        assert ex.evaluate(dt, t, [x]) == pytest.approx(3 * x * math.cos(t))


def test_string_roundtrip():
    ms = builtin_example("ex52_quartic")
    again = ModelSpec.from_json(ms.to_json())
    assert again == ms


EXPRS = ["-4*x1**3 + (1/8)*x1*sin(w*t) + M[1]", "x1^2*cos(2*w*t) - M[3] + 1.5",
         "sin(w*t)*cos(3*w*t)*M[4]*x1**6"]


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(EXPRS), st.floats(-50, 50), st.floats(-3, 3),
       st.lists(st.floats(-2, 2), min_size=1, max_size=5), st.integers(1, 4))
def test_periodic_in_time(text, t, x, pts, shifts):
    T = 1.7
    e = ex.parse(text, T, 1)
    mu = ParticleCloud.uniform(np.array(pts).reshape(-1, 1))
    a = eval_expr(e, t, [x], mu)
    b = eval_expr(e, t + shifts * T, [x], mu)
    assert b == pytest.approx(a, rel=1e-9, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=30), st.randoms(use_true_random=False))
def test_permutation_invariance_bitwise(pts, rnd):
    e = parse("M[1] + M[2]*x1 - M[4]")
    perm = list(range(len(pts)))
    rnd.shuffle(perm)
    mu = ParticleCloud.uniform(np.array(pts).reshape(-1, 1))
    nu = ParticleCloud.uniform(np.array(pts)[perm].reshape(-1, 1))
    assert eval_expr(e, 0.2, [0.7], mu) == eval_expr(e, 0.2, [0.7], nu)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=10),
       st.lists(st.floats(-3, 3), min_size=1, max_size=10))
def test_linear_in_observables_mixture(p1, p2):
    e = parse("2*M[1] - 0.5*M[2] + 3*M[3]")
    mu = ParticleCloud.uniform(np.array(p1).reshape(-1, 1))
    nu = ParticleCloud.uniform(np.array(p2).reshape(-1, 1))
    mix = mixture([mu, nu], [0.5, 0.5])
    lhs = eval_expr(e, 0.0, [0.0], mix)
    rhs = 0.5 * (eval_expr(e, 0.0, [0.0], mu) + eval_expr(e, 0.0, [0.0], nu))
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


# --- ModelSpec -------------------------------------------------------------------

def ou_pure():
    return ModelSpec(1, 1, TWO_PI, (parse("-x1"),), ((parse("1"),),))


def test_drift_example51():
    assert eval_drift(ou_pure(), MAIN, 0.0, [2.0], ParticleCloud.dirac([9.0]))[0] == -2.0


def test_drift_example52():
    ms = builtin_example("ex52_quartic")
    v = eval_drift(ms, MAIN, math.pi / 2, [1.0], ParticleCloud.dirac([2.0]))
    assert v[0] == pytest.approx(-1.875, abs=1e-15)


def test_drift_truncation_clips():
    ms = builtin_example("ex52_quartic").with_truncation(1.0)
    assert eval_drift(ms, MAIN, 0.0, [5.0], ParticleCloud.dirac([0.0]))[0] == -4.0


def test_diffusion_example52():
    ms = builtin_example("ex52_quartic")
    mu = ParticleCloud.dirac([0.0])
    assert eval_diffusion(ms, MAIN, 0.0, [1.0], mu)[0, 0] == pytest.approx(math.sqrt(2))
    assert eval_diffusion(ms.with_truncation(1.0), MAIN, 0.0, [3.0], mu)[0, 0] == \
        pytest.approx(math.sqrt(2))


def test_constant_identity_diffusion():
    d = 2
    one, z = ex.ONE, ex.ZERO
    ms = ModelSpec(d, d, 1.0, (z, z), ((one, z), (z, one)))
    mu = ParticleCloud.dirac([0.0, 0.0])
    for x in ([0, 0], [3.0, -1.0]):
        np.testing.assert_array_equal(eval_diffusion(ms, MAIN, 0.4, x, mu), np.eye(2))


def test_builtin_ex52_contents():
    ms = builtin_example("ex52_quartic")
    assert ms.T == TWO_PI
    assert ms.drift[0] == parse("-4*x1**3 + (1/8)*x1*sin(t) + M[1]")
    assert ms.diffusion[0][0] == parse("sqrt(2)*x1")


def test_builtin_ex51_degenerate_is_homogeneous():
    ms = builtin_example("ex51_ou", b=0, c=0)
    assert ms.drift[0] == parse("-x1")
    assert not any(isinstance(a, ex.Trig) for a in ex.atoms(ms.drift[0]))


def test_builtin_ex53_adds_force():
    base = builtin_example("ex51_ou")
    forced = builtin_example("ex53_forced")
    diff = forced.drift[0] - base.drift[0]
    mu = ParticleCloud.uniform([[0.5], [-1.0]])
    for t, x in [(0.0, 1.0), (1.3, -2.0), (4.0, 0.25)]:
        assert eval_expr(diff, t, [x], mu) == pytest.approx(eval_expr(ex53_force(), t, [x], mu))


def test_builtin_unknown():
    with pytest.raises(ModelError):
        builtin_example("ex99")


def test_model_shape_checks():
    with pytest.raises(ModelError):
        ModelSpec(1, 1, TWO_PI, (parse("x1"), parse("x1")), ((parse("1"),),))
    with pytest.raises(ModelError):
        ModelSpec(1, 1, TWO_PI, (parse("x1"),), ((parse("1"), parse("1")),))
    # time atom with another period is rejected
    with pytest.raises(ModelError):
        ModelSpec(1, 1, 1.0, (ex.sin(1, 3.0),), ((ex.ONE,),))


@settings(max_examples=40, deadline=None)
@given(st.floats(1.0, 40.0), st.floats(0, 7))
def test_truncation_idempotent(r, t):
    ms = builtin_example("ex52_quartic").with_truncation(1.0)
    mu = ParticleCloud.dirac([0.3])
    for sgn in (1, -1):
        assert eval_drift(ms, MAIN, t, [sgn * r], mu)[0] == eval_drift(ms, MAIN, t, [sgn * 1.0], mu)[0]


def test_coupled_defaults_to_main():
    ms = builtin_example("ex51_ou")
    assert ms.coefficients(COUPLED) == ms.coefficients(MAIN)
    z = zero_model()
    ms2 = ms.with_coupled(z.drift, z.diffusion)
    assert eval_drift(ms2, COUPLED, 0.0, [1.0], ParticleCloud.dirac([0.0]))[0] == 0.0
