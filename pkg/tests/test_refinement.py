import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracle import affine_oracle, pnorm_oracle, random_instance
from pnormreg.audit import Audit
from pnormreg.gamma_core import safe_pow
from pnormreg.refinement import (DenseModel, ProblemInstance, initial_solution, reduce_affine, solve_affine,
                                 solve_pnorm, solve_pnorm_dual)


def obj(x, p):
    return float(np.sum(np.abs(x) ** p))


def test_initial_solution_examples():
    assert np.allclose(initial_solution(np.array([[1.0, 1.0]]), np.array([2.0])), [1.0, 1.0])
    assert np.allclose(initial_solution(np.eye(3), np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])
    assert np.allclose(initial_solution(np.array([[1.0, 0.0]]), np.array([1.0])), [1.0, 0.0])
    with pytest.raises(ValueError):
        initial_solution(np.array([[1.0, 1.0], [1.0, 1.0]]), np.array([1.0, 2.0]))


def test_instance_validation():
    with pytest.raises(ValueError):
        ProblemInstance(np.eye(2), np.ones(2), 1.0)
    with pytest.raises(ValueError):
        ProblemInstance(np.eye(2), np.ones(2), 3.0, eps=0.0)
    with pytest.raises(ValueError):
        ProblemInstance(np.eye(2), np.ones(3), 3.0)
    with pytest.warns(UserWarning):
        ProblemInstance(np.ones((3, 2)), np.ones(3), 3.0)


def test_identity_returns_b():
    b = np.array([1.0, -2.0, 3.0])
    rep = solve_pnorm(ProblemInstance(np.eye(3), b, 4.0, 1e-6))
    assert np.allclose(rep.x, b) and rep.objective == pytest.approx(obj(b, 4.0))
    rep = solve_pnorm(ProblemInstance(np.eye(3), b, 1.5, 1e-6))
    assert np.allclose(rep.x, b)


@pytest.mark.parametrize("p,expected", [(2.0, 0.5), (4.0, 0.125), (1.5, 2 * 0.5**1.5)])
def test_two_coordinate_split(p, expected):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = solve_pnorm(ProblemInstance(np.array([[1.0, 1.0]]), np.array([1.0]), p, 1e-8))
    assert np.allclose(rep.x, [0.5, 0.5], atol=1e-6)
    assert rep.objective == pytest.approx(expected, rel=1e-8)


def test_zero_rhs():
    rep = solve_pnorm(ProblemInstance(np.ones((1, 3)), np.zeros(1), 3.0))
    assert not rep.x.any() and rep.converged


@pytest.mark.parametrize("seed", range(3))
def test_random_p3_against_oracle(seed):
    rng = np.random.default_rng(seed)
    A, b = random_instance(rng, 5, 30)
    audit = Audit("record")
    rep = solve_pnorm(ProblemInstance(A, b, 3.0, 1e-4), audit=audit, keep_trace=True)
    fo = obj(pnorm_oracle(A, b, 3.0), 3.0)
    assert np.linalg.norm(A @ rep.x - b) <= 1e-8
    assert rep.objective <= (1 + 1e-4) * fo
    assert rep.kkt_residual <= 1e-4 and rep.converged
    objs = [row["objective"] for row in rep.trace]
    assert all(b_ <= a_ for a_, b_ in zip(objs, objs[1:]))
    assert all(v["violations"] == 0 for k, v in audit.summary().items() if k not in audit.advisory)


def test_dual_recovery_identity():
    rng = np.random.default_rng(4)
    A, b = random_instance(rng, 4, 20)
    p = 1.5
    rep = solve_pnorm_dual(ProblemInstance(A, b, p, 1e-4))
    q = p / (p - 1)
    z = A.T @ rep.dual_y
    grad = np.sign(z) * safe_pow(np.abs(z), q - 1)
    assert obj(grad, p) == pytest.approx(obj(z, q), rel=1e-9)
    assert np.linalg.norm(A @ rep.x - b) <= 1e-8
    assert rep.objective <= (1 + 1e-4) * obj(pnorm_oracle(A, b, p), p)


def test_dual_route_rejects_large_p():
    with pytest.raises(ValueError):
        solve_pnorm_dual(ProblemInstance(np.eye(2), np.ones(2), 3.0))


def test_affine_examples():
    x, val, _ = solve_affine(np.eye(3), np.zeros(3), None, None, 4.0)
    assert not np.any(x) and val == 0.0
    rng = np.random.default_rng(0)
    A, b = random_instance(rng, 2, 6)
    red = reduce_affine(np.eye(6), np.zeros(6), A, b)
    z = red.x0 + red.V @ rng.standard_normal(red.V.shape[1])
    assert np.allclose(red.A_lift @ z, red.b_lift)


@pytest.mark.parametrize("seed", range(4))
def test_affine_against_oracle(seed):
    rng = np.random.default_rng(seed)
    C = rng.standard_normal((6, 4))
    d = rng.standard_normal(6)
    A, b = random_instance(rng, 2, 4)
    p = 3.0
    x, val, _ = solve_affine(C, d, A, b, p, eps=1e-8)
    assert np.linalg.norm(A @ x - b) <= 1e-8
    assert val == pytest.approx(affine_oracle(C, d, A, b, p), rel=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([2.5, 4.0]))
def test_feasible_and_monotone(seed, p):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    m = int(rng.integers(n + 1, 30))
    A, b = random_instance(rng, n, m)
    model = DenseModel(A, b)
    rep = solve_pnorm(ProblemInstance(A, b, p, 1e-5))
    assert np.linalg.norm(A @ rep.x - b) <= 1e-8 * max(1, np.linalg.norm(b))
    assert rep.objective <= obj(model.x0, p) * (1 + 1e-12)
    objs = [row["objective"] for row in rep.trace]
    assert all(b_ <= a_ for a_, b_ in zip(objs, objs[1:]))
