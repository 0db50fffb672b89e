"""
Numerical checks of the trajectory-difference bounds.

Every bound of the form ``|Delta X| <~ weight * |Delta input|^e`` is checked by
sampling admissible pairs, evaluating both sides and recording the quotient.
The implicit constants are never assumed: a bound is accepted when the
sampled supremum of lhs/rhs is finite and stable when the sample size grows
tenfold (see :func:`fit_constant`).

Only the geometric cores of the f-level estimates are measured, i.e. the
discrepancies ``|X - X'|`` and ``|V - V'|`` of the two characteristics against
the bracketed factors of each display. The velocity discrepancy is taken
modulo the specular identification: it is the smallest of the raw difference
and the differences after moving either trajectory one bounce forward or back
(V_{m+-1} against V'_n, V_m against V'_{n+-1}). Two paths straddling a bounce
carry velocities that differ by a reflection, which the flow identifies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .errors import (
    AnnulusError,
    BetaOutOfRange,
    EmptyInput,
    GrazingTooClose,
    PreconditionViolated,
    VerticalState,
)
from .geometry import AnnulusDomain, Case, classify_batch
from .shift import (
    SpaceShift,
    VelocityShift,
    arc_path_batch,
    make_space_shift,
    make_velocity_shift,
    space_shift_batch,
    velocity_shift_batch,
)
from .trajectory import closed_form_batch, flow_batch, flow_oracle_batch

SPACE_LEMMAS = ("3.5", "4.4", "5.1", "5.2", "6.2", "6.4", "6.5", "6.8")
VELOCITY_LEMMAS = ("3.6", "4.5", "4.6", "5.3", "5.4", "6.7", "6.9")
HOLDER_LEMMAS = ("6.2", "6.4", "6.5", "6.7", "6.8", "6.9")
WEIGHT_KINDS = ("S_sp", "T_sp1", "T_sp2", "T_vel", "H_sp", "H_vel")

# Gauss-Legendre order for the tau-integrals along shift paths
QUAD_ORDER = 32


# ---------------------------------------------------------------------------
# records and weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuotientRecord:
    """One sampled pair.

    ``lhs`` and ``rhs`` belong to ``component`` ("X", "V", "t" or "a"), the
    component whose quotient is largest for this pair; ``delta`` is
    ``|x - x_bar|`` or ``|v - v_bar|``.
    """

    lemma_id: str
    pair: tuple
    s: float
    t: float
    lhs: float
    rhs: float
    ratio: float
    delta: float
    component: str = "X"
    oracle_gap: float = 0.0


@dataclass
class ScanResult:
    """Records of one scan plus the count of rejected candidates."""

    lemma_id: str
    records: list
    skipped: int = 0
    max_oracle_gap: float = 0.0

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]


@dataclass(frozen=True)
class SingularWeight:
    kind: str
    value: float


def _inv_cos_terms(c):
    """(1/cos b on C1/C2, 1/cos a on C3) per row; grazing counts as cos b = 0."""
    case = c["case"]
    c12 = (case == Case.C1) | (case == Case.C2)
    c3 = case == Case.C3
    graz = case == Case.GRAZING
    with np.errstate(divide="ignore"):
        icb = np.where(c12, 1.0 / c["cos_b"], 0.0)
        ica = np.where(c3 | graz, 1.0 / c["cos_a"], 0.0)
    icb = np.where(graz, np.inf, icb)
    return icb, ica


def _weights_batch(domain, kind, a, b=None, w=None, w2=None):
    """Vectorised singular weights.

    Space kinds take positions ``a`` (x or x_bar), ``b`` (x_tilde) and the
    common velocity ``w``; velocity kinds take the position ``a`` and the two
    velocities ``w``, ``w2``.
    """
    if kind == "S_sp":
        icb, _ = _inv_cos_terms(classify_batch(domain, a, w))
        return icb
    if kind in ("T_sp1", "T_sp2", "H_sp"):
        c1 = classify_batch(domain, a, w)
        c2 = classify_batch(domain, b, w)
    elif kind in ("T_vel", "H_vel"):
        c1 = classify_batch(domain, a, w)
        c2 = classify_batch(domain, a, w2)
    else:
        raise ValueError(f"unknown weight kind {kind!r}")
    b1, a1 = _inv_cos_terms(c1)
    b2, a2 = _inv_cos_terms(c2)
    if kind in ("T_sp1", "T_vel"):
        return b1 + b2 + a1 + a2
    if kind == "T_sp2":
        return b1 + b2 + a1 ** 2 + a2 ** 2
    in1 = (c1["case"] == Case.C3) | (c1["case"] == Case.GRAZING)
    in2 = (c2["case"] == Case.C3) | (c2["case"] == Case.GRAZING)
    if kind == "H_sp":
        return np.minimum(np.where(in1, a1, 0.0), np.where(in2, a2, 0.0))
    return np.maximum(np.where(in1, np.sqrt(a1), 0.0), np.where(in2, np.sqrt(a2), 0.0))


def eval_singular_weight(domain: AnnulusDomain, kind: str, inputs: dict) -> SingularWeight:
    """Evaluate one of the singular weights at a single configuration.

    Parameters
    ----------
    kind : {"S_sp", "T_sp1", "T_sp2", "T_vel", "H_sp", "H_vel"}
    inputs : dict
        ``S_sp``: ``x_bar``, ``v``. ``T_sp1``, ``T_sp2``, ``H_sp``: ``x``,
        ``x_tilde``, ``v``. ``T_vel``, ``H_vel``: ``x_bar``, ``v``,
        ``v_tilde``. An optional ``zeta`` is added to every velocity.

    Raises
    ------
    VerticalState
        If a velocity has no planar part.
    """
    zeta = np.asarray(inputs.get("zeta", np.zeros(3)), dtype=float)
    v = np.asarray(inputs["v"], dtype=float) + zeta
    vels = [v]
    if kind in ("T_vel", "H_vel"):
        vels.append(np.asarray(inputs["v_tilde"], dtype=float) + zeta)
    for u in vels:
        if math.hypot(u[0], u[1]) == 0.0:
            raise VerticalState("planar velocity vanishes")
    row = lambda a: np.asarray(a, dtype=float)[None, :]  # noqa: E731
    if kind == "S_sp":
        val = _weights_batch(domain, kind, row(inputs["x_bar"]), w=row(v))
    elif kind in ("T_sp1", "T_sp2", "H_sp"):
        val = _weights_batch(domain, kind, row(inputs["x"]), row(inputs["x_tilde"]), w=row(v))
    elif kind in ("T_vel", "H_vel"):
        val = _weights_batch(domain, kind, row(inputs["x_bar"]), w=row(v), w2=row(vels[1]))
    else:
        raise ValueError(f"unknown weight kind {kind!r}")
    return SingularWeight(kind, float(val[0]))


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScanConfig:
    """Parameters of a quotient scan.

    ``mode`` is "lipschitz" or "holder"; None picks the lemma's own exponent.
    Pair separations are drawn log-uniformly in [delta / 10, delta]. A
    fraction ``near_critical`` of the base states is placed within
    [delta / 100, 10 delta] of a tangency line (impact parameter r or R),
    where the bounds are sharp; the rest are uniform. ``verbatim`` evaluates
    the 5.4 position bound without the T_vel factor (see the module notes).
    """

    lemma: str
    n_pairs: int = 1000
    t: float = 2.0
    s: float = 0.0
    delta: float = 1e-4
    mode: str | None = None
    seed: int = 0
    speed_range: tuple = (0.5, 2.0)
    max_batches: int = 200
    near_critical: float = 0.5
    verbatim: bool = False


def _unit3(rng, n):
    u = rng.normal(size=(n, 3))
    return u / np.linalg.norm(u, axis=1)[:, None]


def sample_annulus(rng, domain: AnnulusDomain, n: int) -> np.ndarray:
    """Points uniform in the planar annulus with x_3 uniform in [-1, 1]."""
    rho = np.sqrt(domain.r ** 2 + rng.random(n) * (domain.R ** 2 - domain.r ** 2))
    th = rng.random(n) * 2 * np.pi
    return np.column_stack([rho * np.cos(th), rho * np.sin(th), rng.uniform(-1, 1, n)])


def sample_velocity(rng, n: int, speed_range=(0.5, 2.0)) -> np.ndarray:
    """Planar speed log-uniform in ``speed_range``, uniform direction, v_3 in [-1, 1]."""
    lo, hi = speed_range
    sp = np.exp(rng.uniform(np.log(lo), np.log(hi), n))
    th = rng.random(n) * 2 * np.pi
    return np.column_stack([sp * np.cos(th), sp * np.sin(th), rng.uniform(-1, 1, n)])


def sample_near_critical(rng, domain: AnnulusDomain, w, delta: float) -> np.ndarray:
    """Positions whose impact parameter for velocity ``w`` is near r or R.

    The transverse coordinate y is r +- eps or R - eps (random sign), eps
    log-uniform in [delta / 100, 10 delta]; the coordinate along w_p is
    uniform over the part of the line inside the annulus.
    """
    n = w.shape[0]
    eps = delta * 10.0 ** rng.uniform(-2.0, 1.0, n)
    outer = rng.random(n) < 0.5
    side = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    d = np.where(outer, domain.R - eps, domain.r + side * eps)
    d = np.clip(d, 0.0, domain.R * (1 - 1e-15))
    y = d * np.where(rng.random(n) < 0.5, 1.0, -1.0)
    pR = np.sqrt(domain.R ** 2 - y * y)
    pr = np.sqrt(np.maximum(domain.r ** 2 - y * y, 0.0))
    p = pr + rng.random(n) * (pR - pr)
    p *= np.where(rng.random(n) < 0.5, 1.0, -1.0)
    L = _speed(w)
    uh = w[:, :2] / L[:, None]
    x = np.empty((n, 3))
    x[:, 0] = p * uh[:, 0] - y * uh[:, 1]
    x[:, 1] = p * uh[:, 1] + y * uh[:, 0]
    x[:, 2] = rng.uniform(-1, 1, n)
    return x


def _base_states(rng, domain, cfg, n):
    w = sample_velocity(rng, n, cfg.speed_range)
    x = sample_annulus(rng, domain, n)
    crit = rng.random(n) < cfg.near_critical
    if np.any(crit):
        x[crit] = sample_near_critical(rng, domain, w[crit], cfg.delta)
    keep = domain.contains(x, closed=False)
    return x[keep], w[keep]


def _separations(rng, n, delta):
    return delta * 10.0 ** rng.uniform(-1.0, 0.0, n)


def _speed(w):
    return np.hypot(w[:, 0], w[:, 1])


def _transverse(x, w):
    """Signed coordinate of x_p along the unit normal of w_p."""
    L = _speed(w)
    return (w[:, 0] * x[:, 1] - w[:, 1] * x[:, 0]) / L


def _along(x, w):
    return (w[:, 0] * x[:, 0] + w[:, 1] * x[:, 1]) / _speed(w)


def _regular(c):
    return (c["case"] == Case.C1) | (c["case"] == Case.C2) | (c["case"] == Case.C3)


# ---------------------------------------------------------------------------
# trajectory discrepancies
# ---------------------------------------------------------------------------

def _velocity_at(domain, x, w, k):
    """Backward velocity after k bounces, with k = 0 meaning w itself."""
    k = np.asarray(k)
    pos = k >= 1
    out = w.copy()
    if np.any(pos):
        _, Vk, _, _ = closed_form_batch(domain, x[pos], w[pos], k[pos])
        out[pos] = Vk
    return out


def pair_discrepancy(domain: AnnulusDomain, s, t, xa, wa, xb, wb):
    """(|Delta X|, |Delta V|, oracle gap) between two backward characteristics.

    Velocities are compared modulo the specular identification at the wall:
    |Delta V| is the smallest of the raw difference and the differences
    obtained by moving either trajectory one bounce forward or back in its
    own sequence. This removes the O(L) jumps on the short time windows
    where the two paths straddle a bounce. The oracle gap is the largest
    deviation of the closed-form flow from the event-driven flow over both
    trajectories.
    """
    Xa, Va, ma, _ = flow_batch(domain, s, t, xa, wa)
    Xb, Vb, mb, _ = flow_batch(domain, s, t, xb, wb)
    dX = np.linalg.norm(Xa - Xb, axis=1)
    dV = np.linalg.norm(Va - Vb, axis=1)
    for j in (-1, 1):
        ka, kb = ma + j, mb + j
        ok = ka >= 0
        if np.any(ok):
            Vj = _velocity_at(domain, xa[ok], wa[ok], ka[ok])
            dV[ok] = np.minimum(dV[ok], np.linalg.norm(Vj - Vb[ok], axis=1))
        ok = kb >= 0
        if np.any(ok):
            Vj = _velocity_at(domain, xb[ok], wb[ok], kb[ok])
            dV[ok] = np.minimum(dV[ok], np.linalg.norm(Va[ok] - Vj, axis=1))
    Oa, Wa, _ = flow_oracle_batch(domain, s, t, xa, wa)
    Ob, Wb, _ = flow_oracle_batch(domain, s, t, xb, wb)
    scale = 1.0 + np.maximum(_speed(wa), _speed(wb)) * np.abs(np.asarray(t) - np.asarray(s))
    gap = np.maximum.reduce([
        np.linalg.norm(Oa - Xa, axis=1), np.linalg.norm(Ob - Xb, axis=1),
        np.linalg.norm(Wa - Va, axis=1), np.linalg.norm(Wb - Vb, axis=1),
    ]) / scale
    return dX, dV, gap


def _gl_nodes(order=QUAD_ORDER):
    """Nodes and weights on [0, 1] after tau = (1 - cos(pi u)) / 2."""
    u, wu = np.polynomial.legendre.leggauss(order)
    u = 0.5 * (u + 1.0)
    wu = 0.5 * wu
    tau = 0.5 * (1.0 - np.cos(np.pi * u))
    return tau, wu * 0.5 * np.pi * np.sin(np.pi * u)


def _ratio(X, e, w):
    num = np.abs(X[..., 0] * e[..., 0] + X[..., 1] * e[..., 1])
    den = np.abs(X[..., 0] * w[..., 0] + X[..., 1] * w[..., 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        return num / den


def space_singular_integral(domain: AnnulusDomain, x, x_tilde, w, order=QUAD_ORDER):
    """Integral over [0, 1] of 1/S_sp along x(tau) = (1 - tau) x_tilde + tau x, per row."""
    tau, wq = _gl_nodes(order)
    n = x.shape[0]
    pts = (1.0 - tau)[None, :, None] * x_tilde[:, None, :] + tau[None, :, None] * x[:, None, :]
    ww = np.repeat(w[:, None, :], tau.size, axis=1)
    c = classify_batch(domain, pts.reshape(-1, 3), ww.reshape(-1, 3))
    e = x - x_tilde
    e[:, 2] = 0.0
    e /= np.linalg.norm(e, axis=1)[:, None]
    ee = np.repeat(e[:, None, :], tau.size, axis=1).reshape(-1, 3)
    wf = ww.reshape(-1, 3)
    val = _ratio(c["X0"], ee, wf) + _ratio(c["X1"], ee, wf)
    return (val.reshape(n, tau.size) * wq[None, :]).sum(axis=1)


def velocity_singular_integral(domain: AnnulusDomain, x, w_tilde, sweep, order=QUAD_ORDER):
    """Integral over [0, 1] of 1/S_vel along the arc from w_tilde by ``sweep``, per row."""
    tau, wq = _gl_nodes(order)
    n = x.shape[0]
    taus = np.broadcast_to(tau, (n, tau.size))
    vv = arc_path_batch(w_tilde, sweep, taus)
    sg = np.sign(sweep)[:, None]
    L = np.hypot(vv[..., 0], vv[..., 1])
    e = np.stack([-vv[..., 1] / L * sg, vv[..., 0] / L * sg, np.zeros_like(L)], axis=-1)
    xx = np.repeat(x[:, None, :], tau.size, axis=1)
    c = classify_batch(domain, xx.reshape(-1, 3), vv.reshape(-1, 3))
    ef = e.reshape(-1, 3)
    vf = vv.reshape(-1, 3)
    val = c["t_f"] * _ratio(c["X0"], ef, vf) + c["t_b"] * _ratio(c["X1"], ef, vf)
    return (val.reshape(n, tau.size) * wq[None, :]).sum(axis=1)


# ---------------------------------------------------------------------------
# lemma table
# ---------------------------------------------------------------------------

def _exponent(cfg: ScanConfig) -> float:
    mode = cfg.mode or ("holder" if cfg.lemma in HOLDER_LEMMAS else "lipschitz")
    if mode not in ("lipschitz", "holder"):
        raise ValueError(f"unknown mode {mode!r}")
    return 0.5 if mode == "holder" else 1.0


def _space_candidates(rng, domain, cfg, n):
    x, w = _base_states(rng, domain, cfg, n)
    n = x.shape[0]
    h = _separations(rng, n, cfg.delta)
    xb = x + h[:, None] * _unit3(rng, n)
    keep = domain.contains(xb, closed=False)
    x, w, xb = x[keep], w[keep], xb[keep]
    sh = space_shift_batch(domain, x, xb, w)
    ok = sh["ok"]
    return sh["x"][ok], sh["x_bar"][ok], sh["x_tilde"][ok], w[ok], n - int(ok.sum())


def _space_batch(domain, cfg, rng, n):
    """Evaluate one batch of space-lemma candidates.

    Returns (pair arrays, lhs dict, rhs dict, delta, keep mask, skipped).
    """
    lem = cfg.lemma
    x, xb, xt, w, skipped = _space_candidates(rng, domain, cfg, n)
    T = cfg.t - cfg.s
    L = _speed(w)
    delta = np.linalg.norm(x - xb, axis=1)
    e = _exponent(cfg)
    d = delta ** e
    cx = classify_batch(domain, x, w)
    ct = classify_batch(domain, xt, w)
    cb = classify_batch(domain, xb, w)
    keep = _regular(cx) & _regular(ct) & _regular(cb)
    y0, y1 = _transverse(xt, w), _transverse(x, w)
    r = domain.r - domain.eps_boundary
    if lem == "3.5":
        inside = (np.abs(y0) < r) & (np.abs(y1) < r)
        p = _along(x, w)
        keep &= inside & (((p > 0) & (cx["case"] == Case.C1) & (ct["case"] == Case.C1))
                          | ((p < 0) & (cx["case"] == Case.C2) & (ct["case"] == Case.C2)))
    elif lem in ("4.4", "6.4", "6.5"):
        rr = domain.r + domain.eps_boundary
        keep &= (np.sign(y0) == np.sign(y1)) & (np.abs(y0) > rr) & (np.abs(y1) > rr)
        keep &= (cx["case"] == Case.C3) & (ct["case"] == Case.C3)
    elif lem == "6.2":
        keep &= (cx["case"] == ct["case"]) & ((cx["case"] == Case.C1) | (cx["case"] == Case.C2))
    idx = np.nonzero(keep)[0]
    skipped += int((~keep).sum())
    x, xb, xt, w, L, delta, d = x[idx], xb[idx], xt[idx], w[idx], L[idx], delta[idx], d[idx]
    sub = lambda c: {k: (v[idx] if isinstance(v, np.ndarray) else v) for k, v in c.items() if k != "geo"}  # noqa: E731
    cx, ct = sub(cx), sub(ct)
    pair = (x, xb, w)
    lhs, rhs = {}, {}
    gap = np.zeros(idx.size)

    if lem in ("6.4",):
        lhs["t"] = L * np.maximum.reduce([np.abs(cx[k] - ct[k]) for k in ("t_b", "t_f", "t_star")])
        rhs["t"] = d
        lhs["a"] = np.abs(cx["a"] - ct["a"])
        rhs["a"] = d
        return pair, lhs, rhs, delta, gap, skipped

    if lem == "5.1":
        A, B = (xt, w), (xb, w)
    elif lem == "6.8":
        A, B = (x, w), (xb, w)
    else:
        A, B = (x, w), (xt, w)
    dX, dV, gap = pair_discrepancy(domain, cfg.s, cfg.t, A[0], A[1], B[0], B[1])
    lhs["X"], lhs["V"] = dX, dV
    grow = 1.0 + L * T
    if lem == "3.5":
        I = space_singular_integral(domain, x, xt, w)
        rx = (grow + L * grow * I) * d
        rhs["X"], rhs["V"] = rx, L * rx
    elif lem == "4.4":
        ia = np.maximum(1.0 / cx["cos_a"], 1.0 / ct["cos_a"])
        rhs["X"] = ia * grow * d
        rhs["V"] = ia ** 2 * L * grow * d
    elif lem == "5.1":
        S = _weights_batch(domain, "S_sp", xb, w=w)
        rx = grow * (1.0 + S) * d
        rhs["X"], rhs["V"] = rx, L * rx
    elif lem == "5.2":
        T1 = _weights_batch(domain, "T_sp1", x, xt, w=w)
        T2 = _weights_batch(domain, "T_sp2", x, xt, w=w)
        rhs["X"] = grow * (1.0 + T1) * d
        rhs["V"] = L * grow * (1.0 + T2) * d
    elif lem == "6.2":
        rhs["X"], rhs["V"] = grow * d, L * grow * d
    elif lem == "6.5":
        ia = np.minimum(1.0 / cx["cos_a"], 1.0 / ct["cos_a"])
        rx = grow * ia * d
        rhs["X"], rhs["V"] = rx, L * rx
    elif lem == "6.8":
        H = _weights_batch(domain, "H_sp", x, xt, w=w)
        rx = grow * (1.0 + H) * d
        rhs["X"], rhs["V"] = rx, L * rx
    else:
        raise ValueError(f"{lem!r} is not a space lemma; expected one of {SPACE_LEMMAS}")
    return pair, lhs, rhs, delta, gap, skipped


def _velocity_candidates(rng, domain, cfg, n):
    x, w = _base_states(rng, domain, cfg, n)
    n = x.shape[0]
    h = _separations(rng, n, cfg.delta)
    wb = w + h[:, None] * _unit3(rng, n)
    wt, sweep, ok = velocity_shift_batch(w, wb)
    return x[ok], w[ok], wb[ok], wt[ok], sweep[ok], n - int(ok.sum())


def _velocity_batch(domain, cfg, rng, n):
    lem = cfg.lemma
    x, w, wb, wt, sweep, skipped = _velocity_candidates(rng, domain, cfg, n)
    T = cfg.t - cfg.s
    L = _speed(w)
    delta = np.linalg.norm(w - wb, axis=1)
    e = _exponent(cfg)
    d = delta ** e
    cw = classify_batch(domain, x, w)
    ct = classify_batch(domain, x, wt)
    cb = classify_batch(domain, x, wb)
    keep = _regular(cw) & _regular(ct) & _regular(cb)
    if lem == "3.6":
        keep &= (cw["case"] == ct["case"]) & ((cw["case"] == Case.C1) | (cw["case"] == Case.C2))
    elif lem in ("4.6", "6.7"):
        # the two C3 direction arcs are separated by the sign of x_p x v_p
        same_arc = np.sign(_transverse(x, w)) == np.sign(_transverse(x, wt))
        keep &= (cw["case"] == Case.C3) & (ct["case"] == Case.C3) & same_arc
    elif lem == "4.5":
        same_sign = np.sign(_along(x, w)) == np.sign(_along(x, wt))
        keep &= (cw["case"] == Case.C3) & (ct["case"] == Case.C3) & same_sign
    idx = np.nonzero(keep)[0]
    skipped += int((~keep).sum())
    x, w, wb, wt, sweep, L, delta, d = (a[idx] for a in (x, w, wb, wt, sweep, L, delta, d))
    sub = lambda c: {k: (v[idx] if isinstance(v, np.ndarray) else v) for k, v in c.items() if k != "geo"}  # noqa: E731
    cw, ct = sub(cw), sub(ct)
    pair = (x, w, wb)
    lhs, rhs = {}, {}
    gap = np.zeros(idx.size)

    if lem == "4.5":
        lhs["t"] = L ** 2 * np.maximum.reduce([np.abs(cw[k] - ct[k]) for k in ("t_b", "t_f", "t_star")])
        rhs["t"] = d
        lhs["a"] = L * np.abs(cw["a"] - ct["a"])
        rhs["a"] = d
        return pair, lhs, rhs, delta, gap, skipped

    if lem == "5.3":
        A, B = (x, wt), (x, wb)
    else:
        A, B = (x, w), (x, wt)
    dX, dV, gap = pair_discrepancy(domain, cfg.s, cfg.t, A[0], A[1], B[0], B[1])
    lhs["X"], lhs["V"] = dX, dV
    grow = 1.0 + L * T
    if lem == "3.6":
        I = velocity_singular_integral(domain, x, wt, sweep)
        rx = (1.0 / L + T + L * grow * I) * d
        rhs["X"], rhs["V"] = rx, L * rx
    elif lem == "4.6":
        ia = np.maximum(1.0 / cw["cos_a"], 1.0 / ct["cos_a"])
        rhs["X"] = (1.0 / L + T) * d
        rhs["V"] = grow * ia * d
    elif lem == "5.3":
        Lb = _speed(wb)
        rhs["X"] = (T + np.maximum(1.0 / L, 1.0 / Lb)) * d
        rhs["V"] = (1.0 + T * np.maximum(L, Lb)) * d
    elif lem == "5.4":
        Tv = _weights_batch(domain, "T_vel", x, w=w, w2=wt)
        # the bracket of the underlying C1/C2 estimate weights both components
        rhs["X"] = (1.0 / L + T) * (1.0 if cfg.verbatim else 1.0 + Tv) * d
        rhs["V"] = grow * (1.0 + Tv) * d
    elif lem == "6.7":
        ia = np.maximum(1.0 / np.sqrt(cw["cos_a"]), 1.0 / np.sqrt(ct["cos_a"]))
        rhs["X"] = (1.0 / L + T) * d
        rhs["V"] = grow * ia * d
    elif lem == "6.9":
        H = _weights_batch(domain, "H_vel", x, w=w, w2=wt)
        rhs["X"] = (1.0 / L + T) * d
        rhs["V"] = grow * (1.0 + H) * d
    else:
        raise ValueError(f"{lem!r} is not a velocity lemma; expected one of {VELOCITY_LEMMAS}")
    return pair, lhs, rhs, delta, gap, skipped


def _run_scan(domain, cfg, batch_fn):
    if cfg.n_pairs <= 0:
        raise ValueError("n_pairs must be positive")
    if not 0 <= cfg.s <= cfg.t:
        raise ValueError("need 0 <= s <= t")
    if not 0 < cfg.delta <= 1:
        raise ValueError("need 0 < delta <= 1")
    rng = np.random.default_rng(cfg.seed)
    records = []
    skipped = 0
    max_gap = 0.0
    for _ in range(cfg.max_batches):
        need = cfg.n_pairs - len(records)
        if need <= 0:
            break
        pair, lhs, rhs, delta, gap, sk = batch_fn(domain, cfg, rng, max(2 * need, 64))
        skipped += sk
        comps = list(lhs)
        ratios = np.stack([lhs[k] / rhs[k] for k in comps], axis=1)
        nz = np.any(np.stack([lhs[k] for k in comps], axis=1) > 0, axis=1)
        skipped += int((~nz).sum())
        if gap.size:
            max_gap = max(max_gap, float(gap.max()))
        for i in np.nonzero(nz)[0]:
            if len(records) >= cfg.n_pairs:
                break
            j = int(np.argmax(ratios[i]))
            k = comps[j]
            records.append(QuotientRecord(
                cfg.lemma, tuple(a[i].copy() for a in pair), float(cfg.s), float(cfg.t),
                float(lhs[k][i]), float(rhs[k][i]), float(ratios[i, j]), float(delta[i]),
                k, float(gap[i]),
            ))
    return ScanResult(cfg.lemma, records, skipped, max_gap)


def quotient_scan_space(domain: AnnulusDomain, config: ScanConfig) -> ScanResult:
    """Sample position pairs for one lemma and record lhs/rhs quotients.

    Supported lemma ids are listed in ``SPACE_LEMMAS``. Inadmissible samples
    (outside the lemma's case hypotheses, grazing, or no shifted point) are
    skipped and counted.
    """
    if config.lemma not in SPACE_LEMMAS:
        raise ValueError(f"{config.lemma!r} is not a space lemma; expected one of {SPACE_LEMMAS}")
    return _run_scan(domain, config, _space_batch)


def quotient_scan_velocity(domain: AnnulusDomain, config: ScanConfig) -> ScanResult:
    """Velocity counterpart of :func:`quotient_scan_space` (``VELOCITY_LEMMAS``)."""
    if config.lemma not in VELOCITY_LEMMAS:
        raise ValueError(f"{config.lemma!r} is not a velocity lemma; expected one of {VELOCITY_LEMMAS}")
    return _run_scan(domain, config, _velocity_batch)


def quotient_scan(domain: AnnulusDomain, config: ScanConfig) -> ScanResult:
    """Dispatch to the space or velocity scan by lemma id."""
    if config.lemma in SPACE_LEMMAS:
        return quotient_scan_space(domain, config)
    return quotient_scan_velocity(domain, config)


# ---------------------------------------------------------------------------
# constants
# ---------------------------------------------------------------------------

def fit_constant(records) -> dict:
    """Empirical constant of a family of quotient records.

    Returns
    -------
    dict
        ``max_ratio``: sup of lhs/rhs. ``refinement_ratio``: that sup divided
        by the sup over the first tenth of the records (1 when fewer than ten).
        ``exponent_fit``: least-squares slope of log lhs against log delta,
        NaN when the deltas do not spread.
    """
    recs = list(records)
    if not recs:
        raise EmptyInput("no records")
    ratios = np.array([r.ratio for r in recs])
    mx = float(np.max(ratios))
    sub = ratios[: max(1, len(recs) // 10)]
    sub_max = float(np.max(sub))
    if sub_max > 0:
        refine = mx / sub_max
    else:
        refine = 1.0 if mx == 0 else math.inf
    lhs = np.array([r.lhs for r in recs])
    dl = np.array([r.delta for r in recs])
    ok = (lhs > 0) & (dl > 0)
    slope = math.nan
    if ok.sum() >= 2 and np.ptp(np.log(dl[ok])) > 0:
        slope = float(np.polyfit(np.log(dl[ok]), np.log(lhs[ok]), 1)[0])
    return {"max_ratio": mx, "refinement_ratio": float(refine), "exponent_fit": slope}


# ---------------------------------------------------------------------------
# grazing wedge
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GrazingSweep:
    deltas: np.ndarray
    dX: np.ndarray
    dV: np.ndarray
    holder_exponent: float
    lipschitz_slope: float


def grazing_sweep(domain: AnnulusDomain, deltas=None, t: float = 10.0, s: float = 0.0,
                  x1: float = -1.0, speed: float = 1.0) -> GrazingSweep:
    """Pairs straddling the inner tangency line.

    x = (x1, r + d, 0) and x_bar = (x1, r - d, 0) with v = (speed, 0, 0), traced
    by the event-driven oracle. ``holder_exponent`` is the fitted slope of
    log |Delta V| against log d; ``lipschitz_slope`` that of the quotient
    |Delta V| / d.
    """
    if deltas is None:
        deltas = np.logspace(-8, -3, 21)
    deltas = np.asarray(deltas, dtype=float)
    n = deltas.size
    x = np.column_stack([np.full(n, x1), domain.r + deltas, np.zeros(n)])
    xb = np.column_stack([np.full(n, x1), domain.r - deltas, np.zeros(n)])
    v = np.tile([speed, 0.0, 0.0], (n, 1))
    Xa, Va, _ = flow_oracle_batch(domain, s, t, x, v)
    Xb, Vb, _ = flow_oracle_batch(domain, s, t, xb, v)
    dX = np.linalg.norm(Xa - Xb, axis=1)
    dV = np.linalg.norm(Va - Vb, axis=1)
    ld = np.log(deltas)
    h = float(np.polyfit(ld, np.log(dV), 1)[0])
    lip = float(np.polyfit(ld, np.log(dV / deltas), 1)[0])
    return GrazingSweep(deltas, dX, dV, h, lip)


# ---------------------------------------------------------------------------
# averaging of the singular factor
# ---------------------------------------------------------------------------

def _space_terms(domain, shift: SpaceShift, taus):
    """(regular term, tangency term) of 1/S_sp at the given taus."""
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    pts = shift.points(taus)
    w = np.repeat(shift.v[None, :], taus.size, axis=0)
    c = classify_batch(domain, pts, w)
    e = shift.x_dot / np.hypot(*shift.x_dot[:2])
    ee = np.repeat(e[None, :], taus.size, axis=0)
    t_out = _ratio(c["X0"], ee, w)
    t_in = _ratio(c["X1"], ee, w)
    if shift.along() < 0:
        t_out, t_in = t_in, t_out
    return t_out, t_in


def _vel_terms(domain, x, shift: VelocityShift, taus):
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    w = shift.path(taus)
    e = shift.path_dot(taus)
    e = e / np.linalg.norm(e, axis=1)[:, None]
    xx = np.repeat(np.asarray(x, dtype=float)[None, :], taus.size, axis=0)
    c = classify_batch(domain, xx, w)
    t0 = c["t_f"] * _ratio(c["X0"], e, w)
    t1 = c["t_b"] * _ratio(c["X1"], e, w)
    # C1 directions hit the inner circle backward (X1); C2 forward (X0)
    inner_bwd = c["case"] == Case.C1
    return np.where(inner_bwd, t0, t1), np.where(inner_bwd, t1, t0)


def _velocity_phase(x, shift: VelocityShift):
    th_x = math.atan2(x[1], x[0])
    w0 = shift.path(0.0)[0]
    phi0 = math.atan2(w0[1], w0[0]) - th_x
    return phi0, shift.signed_sweep()


def averaging_check(domain: AnnulusDomain, shift, tau_star: float, side: str = "Space", x=None,
                    term: str = "total"):
    """Integral of 1/S over [tau_star, tau_critical] against its averaged bound.

    ``side`` is "Space" (``shift`` a :class:`SpaceShift`, critical point at the
    inner tangency along the path line), "VelPlus" or "VelMinus" (``shift`` a
    :class:`VelocityShift` at position ``x``; tangency on the C1 or C2 side).
    ``term="tangency"`` integrates only the inner-circle term, which carries
    the square-root singularity. The quadrature is adaptive after the
    substitution tau = tau_c -+ u^2, which removes the (tau_c - tau)^(-1/2)
    endpoint singularity.

    Returns
    -------
    (lhs, rhs, ratio)
        rhs is (1 + 1/cos b(tau_star)) |tau_c - tau_star| / |v|_p for space and
        the same over |v|_p^2 for velocity.

    Raises
    ------
    PreconditionViolated
        If tau_star does not lie between the head-on and tangency parameters.
    """
    if side == "Space":
        y0 = float(shift.transverse(0.0))
        y1 = float(shift.transverse(1.0))
        dy = y1 - y0
        ys = y0 + tau_star * dy
        sgn = 1.0 if ys >= 0 else -1.0
        tau_c = (sgn * domain.r - y0) / dy
        tau_0 = -y0 / dy
        L = float(np.hypot(shift.v[0], shift.v[1]))

        def terms(tau):
            return _space_terms(domain, shift, tau)

        pt = shift.points(tau_star)[0]
        cb = classify_batch(domain, pt, shift.v)
        scale = 1.0 / L
        rate = abs(dy)
    elif side in ("VelPlus", "VelMinus"):
        if x is None:
            raise ValueError("velocity averaging needs the position x")
        x = np.asarray(x, dtype=float)
        rho = float(np.hypot(x[0], x[1]))
        if rho <= domain.r:
            raise PreconditionViolated("no tangent direction from this position")
        alpha = math.asin(domain.r / rho)
        phi0, sweep = _velocity_phase(x, shift)
        phis = math.remainder(phi0 + tau_star * sweep, 2 * math.pi)
        if side == "VelPlus":
            target_c = alpha if phis >= 0 else -alpha
            target_0 = 0.0
        else:
            target_c = math.pi - alpha if phis >= 0 else -(math.pi - alpha)
            target_0 = math.pi if phis >= 0 else -math.pi
        base = phi0 + tau_star * sweep - phis
        tau_c = (base + target_c - phi0) / sweep
        tau_0 = (base + target_0 - phi0) / sweep
        L = shift.speed_p

        def terms(tau):
            return _vel_terms(domain, x, shift, tau)

        cb = classify_batch(domain, x, shift.path(tau_star)[0])
        scale = 1.0 / L ** 2
        rate = math.sqrt(rho * rho - domain.r ** 2) * abs(sweep)
    else:
        raise ValueError(f"unknown side {side!r}")

    lo, hi = min(tau_0, tau_c), max(tau_0, tau_c)
    tol = 1e-12 * max(1.0, abs(hi - lo))
    if not lo - tol <= tau_star <= hi + tol:
        raise PreconditionViolated(
            f"tau_star={tau_star:.6g} outside [{lo:.6g}, {hi:.6g}] between head-on and tangency")
    cos_b = float(cb["cos_b"][0])
    span = abs(tau_c - tau_star)
    rhs = (1.0 + 1.0 / cos_b) * span * scale if cos_b > 0 else math.inf
    if span == 0.0:
        return 0.0, rhs, 0.0

    def g(tau):
        a, b = terms(tau)
        val = b[0] if term == "tangency" else a[0] + b[0]
        return val * math.sqrt(abs(tau_c - tau))

    # tau = tau_c -+ u^2 turns the endpoint singularity into a smooth
    # integrand 2 g; within eta of tangency the classifier reports grazing,
    # so the last band is closed with g frozen at its edge (error O(eta^1.5))
    sgn_c = 1.0 if tau_c > tau_star else -1.0
    eta = min(1e3 * domain.eps_boundary / rate, 0.5 * span)
    u_hi = math.sqrt(span)
    u_lo = math.sqrt(eta)
    body, _ = integrate.quad(lambda u: 2.0 * g(tau_c - sgn_c * u * u), u_lo, u_hi,
                             epsabs=0.0, epsrel=1e-10, limit=200)
    lhs = body + 2.0 * u_lo * g(tau_c - sgn_c * eta)
    return float(lhs), float(rhs), float(lhs / rhs) if rhs > 0 else math.inf


def tangency_term_closed_form(domain: AnnulusDomain, shift: SpaceShift, tau_star: float) -> float:
    """r cos b(x(tau_star), v) / (|v|_p |Delta y|): exact integral of the tangency term."""
    y0 = float(shift.transverse(0.0))
    y1 = float(shift.transverse(1.0))
    ys = y0 + tau_star * (y1 - y0)
    L = float(np.hypot(shift.v[0], shift.v[1]))
    cos_b = math.sqrt(max(0.0, 1.0 - (ys / domain.r) ** 2))
    return domain.r * cos_b / (L * abs(y1 - y0))


@dataclass
class AveragingSample:
    """Vertical-chord comparisons and random averaging ratios.

    ``quad`` and ``closed`` are the tangency-term integrals on the chord
    family; ``ratios`` and ``sides`` come from random admissible shifts.
    """

    quad: np.ndarray
    closed: np.ndarray
    ratios: np.ndarray
    sides: np.ndarray

    @property
    def max_rel_error(self) -> float:
        return float(np.max(np.abs(self.quad - self.closed) / self.closed))


def averaging_sample(domain: AnnulusDomain, n_chord: int = 100, n_random: int = 1000, seed: int = 0,
                     max_tries: int = 50) -> AveragingSample:
    """Run ``averaging_check`` on the vertical-chord family and on random shifts.

    Chord family: v = (L, 0, 0) and x, x_bar on a common vertical line, so the
    shift path is the chord itself and the tangency term has a closed form.
    Random shifts cycle through the Space, VelPlus and VelMinus sides; draws
    whose tau_star is not admissible are redrawn.
    """
    rng = np.random.default_rng(seed)
    quad, closed = [], []
    while len(quad) < n_chord:
        x1 = rng.choice([-1.0, 1.0]) * rng.uniform(1.05, 1.9)
        L = rng.uniform(0.5, 2.0)
        y0, y1 = rng.uniform(-0.95, 0.95, 2)
        if abs(y1 - y0) < 1e-3 or abs(y1 - y0) >= domain.R - domain.r:
            continue
        ts = rng.uniform(0.0, 1.0)
        try:
            sh = make_space_shift(domain, np.array([x1, y0, 0.0]), np.array([x1, y1, 0.0]),
                                  np.array([L, 0.0, 0.0]))
            q, _, _ = averaging_check(domain, sh, ts, term="tangency")
        except AnnulusError:
            continue
        quad.append(q)
        closed.append(tangency_term_closed_form(domain, sh, ts))
    ratios, sides = [], []
    side_names = ("Space", "VelPlus", "VelMinus")
    i = 0
    while len(ratios) < n_random:
        side = side_names[i % 3]
        for _ in range(max_tries):
            x = sample_annulus(rng, domain, 1)[0]
            x[2] = 0.0
            v = sample_velocity(rng, 1)[0]
            try:
                if side == "Space":
                    xb = x + rng.uniform(0.01, 0.9) * _unit3(rng, 1)[0] * np.array([1.0, 1.0, 0.0])
                    sh = make_space_shift(domain, x, xb, v)
                    res = averaging_check(domain, sh, rng.uniform(0.0, 1.0))
                else:
                    vb = v + rng.uniform(0.05, 1.0) * _unit3(rng, 1)[0]
                    sh = make_velocity_shift(v, vb, np.zeros(3))
                    res = averaging_check(domain, sh, rng.uniform(0.0, 1.0), side=side, x=x)
            except AnnulusError:
                continue
            if np.isfinite(res[2]):
                ratios.append(res[2])
                sides.append(side)
                break
        i += 1
    return AveragingSample(np.array(quad), np.array(closed), np.array(ratios), np.array(sides))


# ---------------------------------------------------------------------------
# zeta integrals
# ---------------------------------------------------------------------------

ZETA_WEIGHTS = ("cos_b_2beta", "cos_b_2beta_over_speed", "cos_a_4beta", "cos_a_2beta_over_speed",
                "corollary_T")


@dataclass(frozen=True)
class ZetaParams:
    weight_kind: str = "cos_a_4beta"
    beta: float = 0.2
    r_exp: float = 0.0
    c: float = 1.0
    N: int = 100_000
    seed: int = 0
    indicator: bool = True
    x_bar: tuple | None = None


def _check_beta(kind, beta):
    if kind in ("cos_a_4beta", "corollary_T"):
        if not 0 <= beta < 0.25:
            raise BetaOutOfRange(f"beta={beta} outside [0, 1/4) for the 4 beta weight")
    elif not 0 <= beta < 0.5:
        raise BetaOutOfRange(f"beta={beta} outside [0, 1/2)")


def zeta_integrand(domain: AnnulusDomain, x, v, zeta, params: ZetaParams) -> np.ndarray:
    """Weight multiplying e^{-c|zeta|^2}/|zeta| (or k_c for the corollary) at each zeta row."""
    kind, beta = params.weight_kind, params.beta
    w = np.asarray(v, dtype=float)[None, :] + zeta
    xx = np.repeat(np.asarray(x, dtype=float)[None, :], zeta.shape[0], axis=0)
    bracket = np.sqrt(1.0 + np.sum(w * w, axis=1)) ** params.r_exp
    if not params.indicator:
        if beta != 0:
            raise ValueError("the indicator can only be dropped at beta = 0")
        return bracket
    c = classify_batch(domain, xx, w)
    case = c["case"]
    sp = _speed(w)
    c12 = (case == Case.C1) | (case == Case.C2)
    c3 = case == Case.C3
    with np.errstate(divide="ignore", invalid="ignore"):
        if kind == "cos_b_2beta":
            val = np.where(c12, c["cos_b"] ** (-2 * beta), 0.0)
        elif kind == "cos_b_2beta_over_speed":
            val = np.where(c12, c["cos_b"] ** (-2 * beta) * sp ** (-2 * beta), 0.0)
        elif kind == "cos_a_4beta":
            val = np.where(c3, c["cos_a"] ** (-4 * beta), 0.0)
        elif kind == "cos_a_2beta_over_speed":
            val = np.where(c3, c["cos_a"] ** (-2 * beta) * sp ** (-2 * beta), 0.0)
        elif kind == "corollary_T":
            xt = xx if params.x_bar is None else _corollary_tilde(domain, xx, params.x_bar, w)
            val = _weights_batch(domain, "T_sp2", xx, xt, w=w) ** (2 * beta)
        else:
            raise ValueError(f"unknown weight kind {kind!r}")
    return bracket * np.nan_to_num(val, nan=0.0, posinf=0.0)


def _corollary_tilde(domain, xx, x_bar, w):
    xb = np.repeat(np.asarray(x_bar, dtype=float)[None, :], xx.shape[0], axis=0)
    sh = space_shift_batch(domain, xx, xb, w)
    # rows without a shifted point fall back to x itself
    return np.where(sh["ok"][:, None], sh["x_tilde"], xx)


def zeta_integral(domain: AnnulusDomain, x, v, params: ZetaParams):
    """Monte Carlo estimate of a singular-weight zeta integral.

    zeta = rho * omega with omega uniform on the sphere and rho drawn from the
    density 2 c rho e^{-c rho^2}; this proposal absorbs e^{-c|zeta|^2}/|zeta|
    exactly, so the estimate is (2 pi / c) times the mean weight. For the
    corollary weight the kernel k_c replaces the Gaussian factor and enters as
    the ratio k_c |zeta| e^{c|zeta|^2} <= 1.

    Returns
    -------
    (estimate, stderr)

    Raises
    ------
    BetaOutOfRange
        Outside the exponent range where the integral is finite.
    """
    _check_beta(params.weight_kind, params.beta)
    if params.c <= 0:
        raise ValueError("c must be positive")
    if params.N < 2:
        raise ValueError("need N >= 2")
    rng = np.random.default_rng(params.seed)
    out_sum = 0.0
    out_sq = 0.0
    done = 0
    chunk = 200_000
    v = np.asarray(v, dtype=float)
    while done < params.N:
        m = min(chunk, params.N - done)
        rho = np.sqrt(-np.log1p(-rng.random(m)) / params.c)
        zeta = rho[:, None] * _unit3(rng, m)
        g = zeta_integrand(domain, x, v, zeta, params)
        if params.weight_kind == "corollary_T":
            from .kinetic import kernel_kc_batch

            g = g * kernel_kc_batch(params.c, v, zeta) * rho * np.exp(params.c * rho ** 2)
        out_sum += float(g.sum())
        out_sq += float((g * g).sum())
        done += m
    mean = out_sum / done
    var = max(out_sq / done - mean * mean, 0.0) * done / (done - 1)
    k = 2.0 * math.pi / params.c
    return k * mean, k * math.sqrt(var / done)


def growth_exponent(speeds, estimates) -> float:
    """Least-squares slope of log estimate against log <v>."""
    br = np.sqrt(1.0 + np.asarray(speeds, dtype=float) ** 2)
    return float(np.polyfit(np.log(br), np.log(np.asarray(estimates, dtype=float)), 1)[0])


# ---------------------------------------------------------------------------
# disk derivatives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradientRow:
    step: float
    norms: dict
    bounds: dict

    @property
    def ratios(self) -> dict:
        return {k: self.norms[k] / self.bounds[k] for k in self.norms}


def disk_gradient_check(domain: AnnulusDomain, t: float, x, v, N: int = 3, s: float = 0.0):
    """Central-difference Jacobians of the planar flow for outer-only states.

    Row j uses step 1e-7 cos^2 a / 4^j. Bounds with c = cos a and L = |v|_p:
    |grad_x X| ~ (1+Lt)/c, |grad_v X| ~ (1+Lt)/L, |grad_x V| ~ L(1+Lt)/c^2,
    |grad_v V| ~ (1+Lt)/c, with t the elapsed time t - s.

    Raises
    ------
    GrazingTooClose
        If cos a <= 1e-3, or the state is not outer-only.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    c = classify_batch(domain, x, v)
    if int(c["case"][0]) != Case.C3:
        raise GrazingTooClose("state is not outer-only")
    ca = float(c["cos_a"][0])
    if ca <= 1e-3:
        raise GrazingTooClose(f"cos a = {ca:.3g} <= 1e-3")
    L = float(np.hypot(v[0], v[1]))
    el = t - s
    grow = 1.0 + L * el
    bounds = {"dX/dx": grow / ca, "dX/dv": grow / L, "dV/dx": L * grow / ca ** 2, "dV/dv": grow / ca}
    rows = []
    for j in range(N):
        h = 1e-7 * ca ** 2 / 4 ** j
        xs, vs = [], []
        for i in range(2):
            e = np.zeros(3)
            e[i] = h
            xs += [x + e, x - e]
            vs += [v, v]
        for i in range(2):
            e = np.zeros(3)
            e[i] = h
            xs += [x, x]
            vs += [v + e, v - e]
        X, V, _, _ = flow_batch(domain, s, t, np.array(xs), np.array(vs))
        J = {}
        for name, Y in (("X", X), ("V", V)):
            Dx = np.column_stack([(Y[2 * i, :2] - Y[2 * i + 1, :2]) / (2 * h) for i in range(2)])
            Dv = np.column_stack([(Y[4 + 2 * i, :2] - Y[4 + 2 * i + 1, :2]) / (2 * h) for i in range(2)])
            J[f"d{name}/dx"] = float(np.linalg.norm(Dx, 2))
            J[f"d{name}/dv"] = float(np.linalg.norm(Dv, 2))
        rows.append(GradientRow(h, J, bounds))
    return rows


# ---------------------------------------------------------------------------
# kernel domination
# ---------------------------------------------------------------------------

def kernel_domination_check(c: float = 1.0, varpi: float = 1.0, n: int = 100_000, seed: int = 0,
                            v_scale: float = 3.0):
    """Count pointwise violations of the weighted kernel bound.

    For random (v, zeta, s) with |varpi s| < c checks
    e^{-varpi(1+|v|^2)s} e^{varpi(1+|v+zeta|^2)s} k_c(v, v+zeta) <= k_{c/2}(v, v+zeta),
    comparing logarithms to avoid overflow.

    Returns
    -------
    (violations, max log-excess)
    """
    from .kinetic import log_kernel_kc_batch

    rng = np.random.default_rng(seed)
    v = rng.normal(scale=v_scale, size=(n, 3))
    zeta = rng.normal(scale=v_scale, size=(n, 3))
    s = rng.uniform(-1.0, 1.0, n) * c / abs(varpi) * (1 - 1e-12)
    vz = v + zeta
    lhs = -varpi * s * (1.0 + np.sum(v * v, axis=1)) + varpi * s * (1.0 + np.sum(vz * vz, axis=1))
    lhs = lhs + log_kernel_kc_batch(c, v, zeta)
    rhs = log_kernel_kc_batch(c / 2.0, v, zeta)
    excess = lhs - rhs
    tol = 1e-12 * np.maximum(1.0, np.abs(rhs))
    return int(np.sum(excess > tol)), float(np.max(excess))
