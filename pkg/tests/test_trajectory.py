import math

import numpy as np
import pytest

from annulus_billiards.errors import BounceOverflow, CaseMismatch, VerticalState
from annulus_billiards.geometry import Case, classify_batch, reflect
from annulus_billiards.trajectory import (
    bounce_count,
    bounce_sequence,
    bounce_sequence_batch,
    closed_form_batch,
    closed_form_bounce,
    flow,
    flow_batch,
    flow_oracle,
    flow_oracle_batch,
    orientation_sign,
)

from conftest import random_states, state

RADIAL = ((1.5, 0, 0), (1, 0, 0))


def test_bounce_sequence_radial(dom):
    seq = bounce_sequence(dom, state(*RADIAL), 2)
    np.testing.assert_allclose(seq[0].X, [2, 0, 0], atol=1e-15)
    np.testing.assert_allclose(seq[1].X, [1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(seq[1].V, [-1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(seq[2].X, [2, 0, 0], atol=1e-15)
    np.testing.assert_allclose(seq[2].V, [1, 0, 0], atol=1e-15)
    assert len(bounce_sequence(dom, state(*RADIAL), 0)) == 1


def test_bounce_sequence_first_reflection_matches_reflect(dom):
    seq = bounce_sequence(dom, state((0, 1.9, 0), (1, 0, 0)), 1)
    X0 = np.array([math.sqrt(0.39), 1.9, 0.0])
    np.testing.assert_allclose(seq[0].X, X0, atol=1e-14)
    # V_1 is the reflection of V_0 at X_1 (backward hit); its y-component is +0.59328
    np.testing.assert_allclose(seq[1].V, reflect(dom, seq[1].X, (1, 0, 0)), atol=1e-14)
    np.testing.assert_allclose(seq[1].V, [0.805, 0.5932748, 0.0], atol=1e-6)


def test_bounce_sequence_vertical(dom):
    with pytest.raises(VerticalState):
        bounce_sequence(dom, state((1.5, 0, 0), (0, 0, 1)), 3)


def test_bounce_algebra_invariants(dom):
    rng = np.random.default_rng(4)
    x, v = random_states(rng, dom, 2000)
    X, V, tb, _ = bounce_sequence_batch(dom, x, v, 40)
    c = classify_batch(dom, x, v)
    ts = c["t_star"]
    assert np.max(np.abs(tb[1:] - ts) / ts) < 1e-9
    rad = np.hypot(X[..., 0], X[..., 1])
    assert np.max(np.abs(rad[0::2] - rad[0])) < 1e-9
    assert np.max(np.abs(rad[1::2] - rad[1])) < 1e-9
    sp = np.linalg.norm(v, axis=1)
    assert np.max(np.abs(np.linalg.norm(V, axis=2) - sp) / sp) < 1e-12
    assert np.all(V[..., 2] == v[:, 2])


def test_orientation_sign_is_plus():
    assert orientation_sign() == 1


def test_closed_form_examples(dom):
    th, rad, thv = closed_form_bounce(dom, state(*RADIAL), 3)
    assert (th, rad) == pytest.approx((0.0, 1.0), abs=1e-15)
    assert closed_form_bounce(dom, state(*RADIAL), 4)[1] == pytest.approx(2.0)
    a = math.asin(0.95)
    th0, rad0, _ = closed_form_bounce(dom, state((0, 1.9, 0), (1, 0, 0)), 0)
    assert th0 == pytest.approx(a, abs=1e-12) and rad0 == pytest.approx(2.0)
    th1, rad1, _ = closed_form_bounce(dom, state((0, 1.9, 0), (1, 0, 0)), 1)
    assert rad1 == pytest.approx(2.0)
    assert abs(th1 - th0) == pytest.approx(math.pi - 2 * a, abs=1e-12)
    with pytest.raises(CaseMismatch):
        closed_form_bounce(dom, state((-1, 1, 0), (1, 0, 0)), 1)


def test_closed_form_matches_recursion(dom):
    rng = np.random.default_rng(5)
    x, v = random_states(rng, dom, 2000)
    c = classify_batch(dom, x, v)
    keep = np.isin(c["case"], [Case.C1, Case.C2, Case.C3])
    x, v = x[keep], v[keep]
    X, V, _, _ = bounce_sequence_batch(dom, x, v, 50)
    for k in (0, 1, 2, 7, 20, 50):
        Xc, Vc, thx, thv = closed_form_batch(dom, x, v, k)
        dth = np.angle(np.exp(1j * (thx - np.arctan2(X[k, :, 1], X[k, :, 0]))))
        dtv = np.angle(np.exp(1j * (thv - np.arctan2(V[k, :, 1], V[k, :, 0]))))
        assert np.abs(dth).max() < 1e-9
        assert np.abs(dtv).max() < 1e-9


def test_bounce_count_examples(dom):
    s = state(*RADIAL)
    assert bounce_count(dom, 0.0, 2.2, s) == 2
    assert bounce_count(dom, 0.0, 0.3, s) == 0
    assert bounce_count(dom, 2.2, 2.2, s) == 0
    assert bounce_count(dom, 0.0, 5.0, state((1.5, 0, 0), (0, 0, 1))) == 0


def test_bounce_count_tie_goes_to_smaller_index(dom):
    # t_1 = t - t_b = 1.7 for t = 2.2; s exactly at t_1 is assigned k = 1
    assert bounce_count(dom, 1.7, 2.2, state(*RADIAL)) == 1
    assert bounce_count(dom, 0.7, 2.2, state(*RADIAL)) == 2


def test_flow_examples(dom):
    f = flow(dom, 0.0, 2.2, state(*RADIAL))
    np.testing.assert_allclose(f.X, [1.3, 0, 0], atol=1e-14)
    np.testing.assert_allclose(f.V, [1, 0, 0], atol=1e-14)
    f = flow(dom, 0.0, 0.3, state(*RADIAL))
    np.testing.assert_allclose(f.X, [1.2, 0, 0], atol=1e-15)
    f = flow(dom, 0.5, 2.0, state((1.5, 0, 0.3), (1, 0, 2)))
    assert f.X[2] == pytest.approx(0.3 - 1.5 * 2, abs=1e-14)
    assert f.V[2] == 2


def test_flow_log(dom):
    f = flow(dom, 0.0, 2.2, state(*RADIAL), with_log=True)
    assert [e[0] for e in f.log] == [1, 2]
    assert f.log[0][1] == pytest.approx(1.7)
    np.testing.assert_allclose(f.log[0][2], [1, 0, 0], atol=1e-15)


def test_flow_oracle_examples(dom):
    a = flow(dom, 0.0, 2.2, state(*RADIAL))
    b = flow_oracle(dom, 0.0, 2.2, state(*RADIAL))
    assert np.linalg.norm(a.X - b.X) < 1e-10
    assert b.k == 2
    x = (-1.0, 1 - 1e-6, 0.0)
    a = flow(dom, 0.0, 5.0, state(x, (1, 0, 0)))
    b = flow_oracle(dom, 0.0, 5.0, state(x, (1, 0, 0)))
    assert np.linalg.norm(a.X - b.X) < 1e-6


def test_free_streaming_exact(dom):
    rng = np.random.default_rng(6)
    x, v = random_states(rng, dom, 3000)
    c = classify_batch(dom, x, v)
    t = 0.9 * c["t_b"]
    X, V, m, _ = flow_batch(dom, 0.0, t, x, v)
    assert np.all(m == 0)
    np.testing.assert_allclose(X, x - t[:, None] * v, rtol=0, atol=1e-13)
    assert np.all(V == v)


def test_flow_matches_oracle(dom):
    rng = np.random.default_rng(7)
    x, v = random_states(rng, dom, 3000)
    t = rng.uniform(0, 20, x.shape[0])
    s = t * rng.uniform(0, 1, x.shape[0])
    X, V, _, _ = flow_batch(dom, s, t, x, v)
    Xo, Vo, _ = flow_oracle_batch(dom, s, t, x, v)
    err = np.linalg.norm(X - Xo, axis=1) + np.linalg.norm(V - Vo, axis=1)
    bound = 1e-8 * (1 + np.linalg.norm(v, axis=1) * t)
    assert np.all(err < bound)


def test_conservation_and_semigroup(dom):
    rng = np.random.default_rng(8)
    x, v = random_states(rng, dom, 1000)
    t = rng.uniform(1, 10, x.shape[0])
    u = t * rng.uniform(0.3, 0.7, x.shape[0])
    s = u * rng.uniform(0, 1, x.shape[0])
    X, V, _, _ = flow_batch(dom, s, t, x, v)
    assert np.all(np.abs(np.linalg.norm(V, axis=1) - np.linalg.norm(v, axis=1)) < 1e-12)
    assert np.all(V[:, 2] == v[:, 2])
    Xu, Vu, _, _ = flow_batch(dom, u, t, x, v)
    Xs, Vs, _, _ = flow_batch(dom, s, u, Xu, Vu)
    assert np.max(np.linalg.norm(Xs - X, axis=1)) < 1e-9
    assert np.max(np.linalg.norm(Vs - V, axis=1)) < 1e-9


def test_specular_compatibility(dom):
    rng = np.random.default_rng(9)
    for _ in range(100):
        th = rng.uniform(-np.pi, np.pi)
        rad = dom.R if rng.random() < 0.5 else dom.r
        x = np.array([rad * math.cos(th), rad * math.sin(th), 0.0])
        v = rng.normal(size=3)
        w = reflect(dom, x, v)
        t = rng.uniform(0.5, 5)
        s = rng.uniform(0, 0.99) * t
        a = flow_oracle(dom, s, t, state(x, v))
        b = flow_oracle(dom, s, t, state(x, w))
        assert np.linalg.norm(a.X - b.X) < 1e-9


def test_bounce_overflow(dom):
    with pytest.raises(BounceOverflow):
        flow_oracle(dom, 0.0, 1000.0, state(*RADIAL), max_bounces=10)
