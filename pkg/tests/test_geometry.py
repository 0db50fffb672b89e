import math

import numpy as np
import pytest

from annulus_billiards.errors import CaseMismatch, NotOnBoundary, VerticalState
from annulus_billiards.geometry import (
    AnnulusDomain,
    Case,
    Orientation,
    angle_a,
    angle_b,
    classify,
    classify_batch,
    exit_times,
    first_hits,
    outward_normal,
    reflect,
    weight_h,
    weight_h_batch,
)

from conftest import random_states, state


def ray_circle(x, v, rho):
    """Positive roots of |x_p + t v_p| = rho (forward)."""
    a = v[0] ** 2 + v[1] ** 2
    b = 2 * (x[0] * v[0] + x[1] * v[1])
    c = x[0] ** 2 + x[1] ** 2 - rho ** 2
    disc = b * b - 4 * a * c
    if disc < 0:
        return []
    sq = math.sqrt(disc)
    return sorted(t for t in ((-b - sq) / (2 * a), (-b + sq) / (2 * a)) if t > 1e-14)


def oracle_exit(dom, x, v):
    tf = min(ray_circle(x, v, dom.r) + ray_circle(x, v, dom.R))
    tb = min(ray_circle(x, -v, dom.r) + ray_circle(x, -v, dom.R))
    return tb, tf


def test_domain_validation():
    with pytest.raises(ValueError):
        AnnulusDomain(R=1.0, r=2.0)
    with pytest.raises(ValueError):
        AnnulusDomain(R=2.0, r=1.0, eps_boundary=1e-3)
    with pytest.raises(ValueError):
        AnnulusDomain(R=2.0, r=0.0)


def test_outward_normal(dom):
    np.testing.assert_allclose(outward_normal(dom, (2, 0, 0)), [1, 0, 0])
    np.testing.assert_allclose(outward_normal(dom, (0, -1, 0)), [0, 1, 0], atol=1e-15)
    with pytest.raises(NotOnBoundary):
        outward_normal(dom, (1.5, 0, 0))


def test_reflect_examples(dom):
    np.testing.assert_allclose(reflect(dom, (2, 0, 0), (-0.5, 0.3, 0.7)), [0.5, 0.3, 0.7])
    np.testing.assert_allclose(reflect(dom, (1, 0, 0), (1, 0, 0)), [-1, 0, 0])
    np.testing.assert_allclose(reflect(dom, (2, 0, 0), (0, 1, 0)), [0, 1, 0])
    with pytest.raises(NotOnBoundary):
        reflect(dom, (1.5, 0, 0), (1, 0, 0))


def test_reflect_involution(dom):
    rng = np.random.default_rng(3)
    for _ in range(50):
        th = rng.uniform(-np.pi, np.pi)
        rad = dom.R if rng.random() < 0.5 else dom.r
        x = (rad * math.cos(th), rad * math.sin(th), rng.normal())
        v = rng.normal(size=3)
        w = reflect(dom, x, v)
        np.testing.assert_allclose(reflect(dom, x, w), v, atol=1e-14)
        assert abs(np.linalg.norm(w) - np.linalg.norm(v)) < 1e-14
        assert w[2] == v[2]
        assert abs(math.hypot(*w[:2]) - math.hypot(*v[:2])) < 1e-14


def test_exit_times_examples(dom):
    tb, tf, ts, l = exit_times(dom, state((1.5, 0, 0), (1, 0, 0)))
    assert (tb, tf, ts, l) == pytest.approx((0.5, 0.5, 1.0, 1.0), abs=1e-15)
    tb, tf, ts, _ = exit_times(dom, state((0, 1.9, 0), (1, 0, 0)))
    assert tb == pytest.approx(math.sqrt(0.39), rel=1e-14)
    assert tf == pytest.approx(math.sqrt(0.39), rel=1e-14)
    tb, tf, ts, l = exit_times(dom, state((1.5, 0, 0), (0, 0, 3)))
    assert math.isinf(tb) and math.isinf(tf) and math.isinf(ts)


def test_exit_times_match_quadratic_oracle(dom):
    rng = np.random.default_rng(0)
    x, v = random_states(rng, dom, 500)
    for xi, vi in zip(x, v):
        tb, tf, ts, l = exit_times(dom, state(xi, vi))
        otb, otf = oracle_exit(dom, xi, vi)
        assert tb == pytest.approx(otb, rel=1e-9, abs=1e-12)
        assert tf == pytest.approx(otf, rel=1e-9, abs=1e-12)
        assert ts == tb + tf
        assert l == pytest.approx(math.hypot(vi[0], vi[1]) * ts, rel=1e-14)


def test_first_hits(dom):
    X0, X1 = first_hits(dom, state((1.5, 0, 0), (1, 0, 0)))
    np.testing.assert_allclose(X0, [2, 0, 0], atol=1e-15)
    np.testing.assert_allclose(X1, [1, 0, 0], atol=1e-15)
    X0, X1 = first_hits(dom, state((1.5, 0, 0), (-1, 0, 0)))
    np.testing.assert_allclose(X0, [1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(X1, [2, 0, 0], atol=1e-15)
    X0, X1 = first_hits(dom, state((0, 1.9, 0), (1, 0, 0)))
    np.testing.assert_allclose(X0, [math.sqrt(0.39), 1.9, 0], atol=1e-14)
    np.testing.assert_allclose(X1, [-math.sqrt(0.39), 1.9, 0], atol=1e-14)
    with pytest.raises(VerticalState):
        first_hits(dom, state((1.5, 0, 0), (0, 0, 1)))


def test_classify_examples(dom):
    d = classify(dom, state((1.5, 0, 0), (1, 0, 0)))
    assert d.case == Case.C1 and d.orientation == Orientation.RADIAL
    assert d.a == 0 and d.b == 0
    d = classify(dom, state((1.5, 0, 0), (-1, 0, 0)))
    assert d.case == Case.C2 and d.a == 0 and d.b == 0
    d = classify(dom, state((-1, 1, 0), (1, 0, 0)))
    assert d.case == Case.GRAZING
    assert d.b == pytest.approx(math.pi / 2)
    assert d.cos_a == pytest.approx(math.sqrt(3) / 2, rel=1e-14)
    d = classify(dom, state((0, 1.9, 0), (1, 0, 0)))
    assert d.case == Case.C3
    with pytest.raises(VerticalState):
        classify(dom, state((1.5, 0, 0), (0, 0, 1)))


def test_classification_consistent_with_hits(dom):
    rng = np.random.default_rng(1)
    x, v = random_states(rng, dom, 20000)
    c = classify_batch(dom, x, v)
    assert np.all(c["t_star"] == c["t_b"] + c["t_f"])
    r0 = np.hypot(c["X0"][:, 0], c["X0"][:, 1])
    r1 = np.hypot(c["X1"][:, 0], c["X1"][:, 1])
    tol = dom.eps_boundary
    c1, c2, c3 = c["case"] == Case.C1, c["case"] == Case.C2, c["case"] == Case.C3
    assert np.all(np.abs(r0[c1] - dom.R) < tol) and np.all(np.abs(r1[c1] - dom.r) < tol)
    assert np.all(np.abs(r0[c2] - dom.r) < tol) and np.all(np.abs(r1[c2] - dom.R) < tol)
    assert np.all(np.abs(r0[c3] - dom.R) < tol) and np.all(np.abs(r1[c3] - dom.R) < tol)
    assert c1.sum() > 1000 and c2.sum() > 1000 and c3.sum() > 1000
    assert np.all(c["cos_a"] > 0)


def test_angle_identities(dom):
    rng = np.random.default_rng(2)
    x, v = random_states(rng, dom, 20000)
    c = classify_batch(dom, x, v)
    m = (c["case"] == Case.C1) | (c["case"] == Case.C2)
    err = np.abs(np.sin(c["a"][m]) - dom.r / dom.R * np.sin(c["b"][m]))
    assert err.max() < 1e-10
    h = weight_h_batch(dom, x, v)
    assert np.abs(h - c["cos_a"]).max() < 1e-12
    assert h[m].min() >= math.sqrt(1 - (dom.r / dom.R) ** 2) - 1e-12


def test_angles_against_inner_products(dom):
    s = state((0, 1.9, 0), (1, 0, 0))
    assert angle_a(dom, s) == pytest.approx(math.asin(0.95), abs=1e-12)
    X0, _ = first_hits(dom, s)
    assert math.cos(angle_a(dom, s)) == pytest.approx(X0[:2] @ [1, 0] / 2, abs=1e-12)
    with pytest.raises(CaseMismatch):
        angle_b(dom, s)
    assert angle_b(dom, state((-1, 1, 0), (1, 0, 0))) == pytest.approx(math.pi / 2)
    s = state((1.5, 0.2, 0.1), (0.8, 0.3, 0.4))
    assert classify(dom, s).case == Case.C1
    _, X1 = first_hits(dom, s)
    vh = np.array([0.8, 0.3]) / math.hypot(0.8, 0.3)
    assert math.cos(angle_b(dom, s)) == pytest.approx(abs(X1[:2] @ vh) / dom.r, abs=1e-10)


def test_weight_h_examples(dom):
    assert weight_h(dom, (0, 1.9), (1, 0)) == pytest.approx(math.sqrt(0.0975), rel=1e-14)
    assert weight_h(dom, (1.5, 0), (1, 0)) == pytest.approx(1.0)
    assert weight_h(dom, (1.5, 0), (0, 0)) == pytest.approx(math.sqrt(1 - 1.5 ** 2 / 4))
