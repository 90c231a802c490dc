import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safeanchor.analytics import random_orthonormal
from safeanchor.linalg import ShapeError
from safeanchor.osca import ProjectionPolicy, compose_update, project_orthogonal, relaxation_coefficient, relaxed_gradient
from safeanchor.ssi import SafetySubspace, empty_subspace, projection_apply


def sub_of(basis, trace=1.0):
    basis = np.asarray(basis, float)
    return SafetySubspace(0, basis, np.ones(basis.shape[1]), trace)


def e1(dim):
    return sub_of(np.eye(dim)[:, :1])


def test_project_orthogonal_examples():
    np.testing.assert_array_equal(project_orthogonal(e1(2), [3.0, 4.0]), [0.0, 4.0])
    assert np.linalg.norm(project_orthogonal(e1(2), [5.0, 0.0])) <= 1e-10
    g = np.array([0.0, -2.5])
    np.testing.assert_allclose(project_orthogonal(e1(2), g), g, atol=1e-12)


def test_project_orthogonal_empty_and_shape():
    g = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(project_orthogonal(empty_subspace(0, 3), g), g)
    with pytest.raises(ShapeError):
        project_orthogonal(e1(2), g)


@pytest.mark.parametrize("trace,lam,alpha", [(0.0, 0.5, 1.0), (2.0, 0.5, 0.0), (10.0, 0.5, 0.0), (1.0, 0.5, 0.5), (3.0, 0.0, 1.0)])
def test_relaxation_coefficient_examples(trace, lam, alpha):
    assert relaxation_coefficient(trace, lam) == alpha


def test_relaxation_coefficient_rejects_negative():
    with pytest.raises(ValueError):
        relaxation_coefficient(-1e-3, 0.5)
    with pytest.raises(ValueError):
        relaxation_coefficient(1.0, -0.5)


def test_compose_update_examples():
    g = np.array([2.0, 1.0, 0.0])
    zero = np.zeros(3)
    np.testing.assert_allclose(compose_update(e1(3), g, zero, 0.25), [0.5, 1.0, 0.0], atol=1e-15)
    np.testing.assert_array_equal(compose_update(e1(3), g, zero, 1.0), g)
    strict = compose_update(e1(3), g, zero, 0.0)
    assert abs(strict[0]) <= 1e-9 * np.linalg.norm(g)
    anchor = np.array([1.0, 0.0, -1.0])
    # anchor gradient is added after projection, so its in-span part survives
    np.testing.assert_allclose(compose_update(e1(3), g, anchor, 0.0), [1.0, 1.0, -1.0])
    with pytest.raises(ShapeError):
        compose_update(e1(3), g, np.zeros(2), 0.5)


def test_policy_modes():
    subs = [sub_of(np.eye(4)[:, :1], trace=t) for t in (0.4, 4.0)]
    assert ProjectionPolicy("strict").alphas(subs) == [0.0, 0.0]
    assert ProjectionPolicy("off").alphas(subs) == [1.0, 1.0]
    assert ProjectionPolicy("adaptive", lam=0.5).alphas(subs) == pytest.approx([0.8, 0.0])
    # normalized traces are 0.1 and 1.0
    assert ProjectionPolicy("adaptive", lam=0.5, trace_normalize=True).alphas(subs) == pytest.approx([0.95, 0.5])
    with pytest.raises(ValueError):
        ProjectionPolicy("loose")
    with pytest.raises(ValueError):
        ProjectionPolicy("adaptive", lam=-1)


@st.composite
def projection_case(draw):
    seed = draw(st.integers(0, 2**31 - 1))
    dim = draw(st.integers(1, 64))
    k = draw(st.integers(1, dim))
    alpha = draw(st.floats(0.0, 1.0))
    rng = np.random.default_rng(seed)
    scale = 10.0 ** draw(st.integers(-3, 3))
    return sub_of(random_orthonormal(rng, dim, k)), scale * rng.normal(size=dim), alpha, rng


@settings(max_examples=250, deadline=None)
@given(projection_case())
def test_projection_properties(case):
    sub, g, alpha, rng = case
    v = sub.basis
    norm = np.linalg.norm(g)
    tilde = project_orthogonal(sub, g)
    # complement exactness
    assert np.linalg.norm(v.T @ tilde) <= 1e-9 * norm
    # idempotence
    np.testing.assert_allclose(project_orthogonal(sub, tilde), tilde, atol=1e-12 * max(norm, 1e-300))
    # in-span annihilation
    inside = v @ rng.normal(size=sub.rank)
    assert np.linalg.norm(project_orthogonal(sub, inside)) <= 1e-10 * np.linalg.norm(inside)
    # alpha-energy identity
    hat = relaxed_gradient(sub, g, alpha)
    lhs = np.linalg.norm(projection_apply(sub, hat))
    rhs = alpha * np.linalg.norm(projection_apply(sub, g))
    assert abs(lhs - rhs) <= 1e-10 * rhs + 1e-13 * norm  # second term is roundoff at alpha = 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0), st.floats(-3, 3), st.floats(-3, 3))
def test_compose_update_linear_in_task_gradient(seed, alpha, c1, c2):
    rng = np.random.default_rng(seed)
    sub = sub_of(random_orthonormal(rng, 12, 3))
    g1, g2, a = rng.normal(size=(3, 12))
    lhs = compose_update(sub, c1 * g1 + c2 * g2, a, alpha) - a
    rhs = c1 * (compose_update(sub, g1, a, alpha) - a) + c2 * (compose_update(sub, g2, a, alpha) - a)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
