import math

import numpy as np
import pytest

from annulus_billiards.errors import BetaOutOfRange, EmptyInput, GrazingTooClose, PreconditionViolated
from annulus_billiards.estimates import (
    QuotientRecord,
    ScanConfig,
    ZetaParams,
    averaging_check,
    averaging_sample,
    disk_gradient_check,
    eval_singular_weight,
    fit_constant,
    grazing_sweep,
    growth_exponent,
    kernel_domination_check,
    quotient_scan,
    tangency_term_closed_form,
    zeta_integral,
)
from annulus_billiards.shift import make_space_shift

SQ3 = math.sqrt(3.0)


def test_singular_weight_examples(dom):
    inp = {"x": (0, 1.9, 0), "x_tilde": (0, SQ3, 0), "v": (1, 0, 0)}
    assert eval_singular_weight(dom, "T_sp2", inp).value == pytest.approx(1 / 0.0975 + 4, rel=1e-12)
    assert eval_singular_weight(dom, "H_sp", inp).value == pytest.approx(2.0, rel=1e-12)
    assert eval_singular_weight(dom, "S_sp", {"x_bar": (0, 1.9, 0), "v": (1, 0, 0)}).value == 0.0


def test_singular_weight_s_sp_inner(dom):
    # x_bar = (1.5, 0.5): |y| = 0.5 < r, so C1 with cos b = sqrt(1 - 0.25)
    w = eval_singular_weight(dom, "S_sp", {"x_bar": (1.5, 0.5, 0), "v": (-1, 0, 0)}).value
    assert w == pytest.approx(1 / math.sqrt(0.75), rel=1e-12)


def rec(ratio, lhs=1.0, delta=1.0):
    return QuotientRecord(pair=None, s=0.0, t=1.0, lhs=lhs, rhs=lhs / ratio, ratio=ratio, lemma_id="x", delta=delta)


def test_fit_constant_examples():
    f = fit_constant([rec(0.7)])
    assert f["max_ratio"] == 0.7 and f["refinement_ratio"] == 1.0
    f = fit_constant([rec(0.3) for _ in range(50)])
    assert f["refinement_ratio"] == 1.0
    with pytest.raises(EmptyInput):
        fit_constant([])


def test_fit_constant_power_law_exponent():
    d = np.logspace(-8, -3, 20)
    recs = [rec(1.0, lhs=2.0 * di ** 0.5, delta=di) for di in d]
    assert fit_constant(recs)["exponent_fit"] == pytest.approx(0.5, abs=1e-10)


@pytest.mark.parametrize("lemma", ["4.4", "5.1", "6.5", "4.6", "5.3", "6.9"])
def test_quotient_scan_small(dom, lemma):
    res = quotient_scan(dom, ScanConfig(lemma=lemma, n_pairs=300, seed=2))
    f = fit_constant(res.records)
    assert len(res.records) == 300
    assert np.isfinite(f["max_ratio"]) and f["max_ratio"] > 0
    assert all(r.rhs > 0 for r in res.records)


def test_quotient_scan_deterministic(dom):
    a = quotient_scan(dom, ScanConfig(lemma="3.5", n_pairs=200, seed=11))
    b = quotient_scan(dom, ScanConfig(lemma="3.5", n_pairs=200, seed=11))
    assert [r.ratio for r in a.records] == [r.ratio for r in b.records]


def test_grazing_sweep_exponents(dom):
    g = grazing_sweep(dom)
    assert 0.45 <= g.holder_exponent <= 0.55
    assert g.lipschitz_slope <= -0.4
    assert g.deltas.min() <= 1e-8 and g.deltas.max() >= 1e-3


def chord_shift(dom, x1=1.5, y0=-0.4, y1=0.5, L=1.3):
    return make_space_shift(dom, np.array([x1, y1, 0.0]), np.array([x1, y0, 0.0]), np.array([L, 0, 0]))


def test_averaging_chord_closed_form(dom):
    sh = chord_shift(dom)
    for ts in (0.0, 0.3, 0.8):
        q, _, _ = averaging_check(dom, sh, ts, term="tangency")
        assert q == pytest.approx(tangency_term_closed_form(dom, sh, ts), rel=1e-6)


def test_averaging_chord_frozen_value(dom):
    # r sqrt(1 - y*^2) / (L |dy|) with y* = 0.5 * 0.9 - 0.4 = 0.05
    sh = chord_shift(dom)
    expected = math.sqrt(1 - 0.05 ** 2) / (1.3 * 0.9)
    assert tangency_term_closed_form(dom, sh, 0.5) == pytest.approx(expected, rel=1e-14)


def test_averaging_empty_interval(dom):
    # transverse coordinate 0.2 -> 1.0 reaches the tangency y = r exactly at tau = 1
    sh = chord_shift(dom, y0=0.2, y1=1.0)
    q, _, _ = averaging_check(dom, sh, 1.0, term="tangency")
    assert q == pytest.approx(0.0, abs=1e-12)


def test_averaging_precondition(dom):
    # the path sits on one side of the head-on chord y = 0 but tau_star is beyond the tangency
    sh = make_space_shift(dom, np.array([0.0, 1.3, 0.0]), np.array([-0.5, 1.8, 0.0]), np.array([1.0, 0, 0]))
    with pytest.raises(PreconditionViolated):
        averaging_check(dom, sh, 0.5)


def test_averaging_sample_stable(dom):
    a = averaging_sample(dom, n_chord=20, n_random=90, seed=3)
    assert a.max_rel_error < 1e-6
    assert np.all(np.isfinite(a.ratios))
    assert set(a.sides) == {"Space", "VelPlus", "VelMinus"}


def test_zeta_beta_zero_sanity(dom):
    p = ZetaParams(beta=0.0, indicator=False, N=10_000, c=2.0)
    est, se = zeta_integral(dom, (1.5, 0, 0), (0, 0, 0), p)
    assert est == pytest.approx(2 * math.pi / 2.0, rel=1e-12)


def test_zeta_beta_out_of_range(dom):
    with pytest.raises(BetaOutOfRange):
        zeta_integral(dom, (1.5, 0, 0), (0, 0, 0), ZetaParams(weight_kind="cos_a_4beta", beta=0.25))
    with pytest.raises(BetaOutOfRange):
        zeta_integral(dom, (1.5, 0, 0), (0, 0, 0), ZetaParams(weight_kind="cos_b_2beta", beta=0.5))


def test_zeta_estimator_converges(dom):
    p = ZetaParams(weight_kind="cos_a_4beta", beta=0.2, N=200_000, seed=1)
    est, se = zeta_integral(dom, (1.5, 0, 0), (0, 0, 0), p)
    assert se / est < 0.05
    # two seeds agree within their combined error
    est2, se2 = zeta_integral(dom, (1.5, 0, 0), (0, 0, 0), ZetaParams(weight_kind="cos_a_4beta", beta=0.2,
                                                                      N=200_000, seed=2))
    assert abs(est - est2) < 5 * math.hypot(se, se2)


def test_growth_exponent_power_law():
    sp = np.array([0, 2, 4, 8.0])
    assert growth_exponent(sp, 3.0 * np.sqrt(1 + sp ** 2) ** 1.5) == pytest.approx(1.5, abs=1e-12)


def test_kernel_domination(dom):
    viol, excess = kernel_domination_check(n=20_000, seed=4)
    assert viol == 0 and excess <= 0


def test_disk_gradient(dom):
    x, v = np.array([0.0, 1.9, 0.0]), np.array([1.0, 0.0, 0.0])
    rows = disk_gradient_check(dom, 3.0, x, v)
    for r in rows:
        assert all(np.isfinite(list(r.norms.values())))
    # ratios stable under step refinement
    a, b = rows[0].ratios, rows[-1].ratios
    for k in a:
        assert b[k] == pytest.approx(a[k], rel=1e-2)
    ident = disk_gradient_check(dom, 2.0, x, v, N=1, s=2.0)[0]
    assert ident.norms["dX/dx"] == pytest.approx(1.0, rel=1e-6)
    with pytest.raises(GrazingTooClose):
        disk_gradient_check(dom, 1.0, np.array([1.5, 0, 0]), v)
