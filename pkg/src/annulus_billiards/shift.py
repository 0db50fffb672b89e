"""
Shifted points, interpolating paths and the singular factors along them.

A space shift replaces the pair (x, x_bar) by (x, x_tilde) with x - x_tilde
perpendicular to v_p, so the straight path x(tau) = (1 - tau) x_tilde + tau x
is transverse to the motion. A velocity shift rotates (v_bar + zeta)_p onto
the speed of (v + zeta)_p and interpolates along the circular arc.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .errors import (
    DegenerateDirection,
    PathExitsDomain,
    TooFarApart,
    VerticalState,
    ZeroShift,
)
from .geometry import AnnulusDomain, Case, PhaseState, classify_batch

PARALLEL_TOL = 1e-12
DEFAULT_RESOLUTION = 64


class CriticalKind(enum.Enum):
    SpacePlus = "SpacePlus"
    SpaceZero = "SpaceZero"
    VelPlus = "VelPlus"
    VelZeroPlus = "VelZeroPlus"
    VelMinus = "VelMinus"
    VelZeroMinus = "VelZeroMinus"


def _planar_unit(w):
    w = np.asarray(w, dtype=float)
    s = float(np.hypot(w[0], w[1]))
    if s == 0.0:
        raise VerticalState("planar component vanishes")
    return np.array([w[0] / s, w[1] / s, 0.0]), s


def _perp(u):
    return np.array([-u[1], u[0], 0.0])


@dataclass(frozen=True)
class SpaceShift:
    """x_tilde = x_bar_p + ((x_p - x_bar_p) . v_hat) v_hat, vertical part of x.

    If the first candidate leaves the annulus the roles of x and x_bar are
    exchanged (``swapped``), so ``x`` and ``x_bar`` are stored post-swap.
    """

    x: np.ndarray
    x_bar: np.ndarray
    v: np.ndarray
    x_tilde: np.ndarray
    swapped: bool = False

    @property
    def x_dot(self) -> np.ndarray:
        d = self.x - self.x_tilde
        d[2] = 0.0
        return d

    @property
    def v_hat(self) -> np.ndarray:
        return _planar_unit(self.v)[0]

    def transverse(self, tau):
        """Signed coordinate of x(tau) along v_hat_perp; linear in tau."""
        u = _perp(self.v_hat)
        a = float(self.x_tilde @ u)
        b = float(self.x @ u)
        return (1.0 - np.asarray(tau)) * a + np.asarray(tau) * b

    def along(self) -> float:
        """x(tau) . v_hat, constant along the path."""
        return float(self.x @ self.v_hat)

    def points(self, tau) -> np.ndarray:
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        return (1.0 - tau)[:, None] * self.x_tilde[None, :] + tau[:, None] * self.x[None, :]


def _project(x, x_bar, vhat):
    xt = x_bar.copy()
    d = x[:2] - x_bar[:2]
    xt[:2] = x_bar[:2] + (d @ vhat[:2]) * vhat[:2]
    xt[2] = x[2]
    return xt


def make_space_shift(domain: AnnulusDomain, x, x_bar, v) -> SpaceShift:
    """Build the shifted position for the pair (x, x_bar) and velocity v.

    Raises
    ------
    TooFarApart
        If ``|x - x_bar| >= R - r``.
    DegenerateDirection
        If ``x_p - x_bar_p`` is zero, parallel or anti-parallel to ``v_p``.
    VerticalState
        If ``v_p = 0``.
    """
    x = np.asarray(x, dtype=float).copy()
    x_bar = np.asarray(x_bar, dtype=float).copy()
    v = np.asarray(v, dtype=float).copy()
    vhat, _ = _planar_unit(v)
    if np.linalg.norm(x - x_bar) >= domain.width:
        raise TooFarApart(f"|x - x_bar| = {np.linalg.norm(x - x_bar):.6g} >= R - r = {domain.width}")
    d = x[:2] - x_bar[:2]
    nd = float(np.hypot(d[0], d[1]))
    if nd == 0.0 or abs(abs(d @ vhat[:2]) - nd) <= PARALLEL_TOL * nd:
        raise DegenerateDirection("x_p - x_bar_p is parallel to v_p")
    xt = _project(x, x_bar, vhat)
    if domain.contains(xt, closed=False):
        return SpaceShift(x, x_bar, v, xt, False)
    xt2 = _project(x_bar, x, vhat)
    if domain.contains(xt2, closed=False):
        return SpaceShift(x_bar, x, v, xt2, True)
    raise PathExitsDomain("neither projected point lies in the annulus")


def path_position(shift: SpaceShift, tau: float, domain: AnnulusDomain | None = None) -> PhaseState:
    """x(tau) = (1 - tau) x_tilde + tau x with velocity v."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    p = shift.points(tau)[0]
    if domain is not None and not domain.contains(p, closed=True):
        raise PathExitsDomain(f"x({tau}) has |x|_p = {np.hypot(p[0], p[1]):.6g}")
    return PhaseState(p, shift.v)


def space_membership(domain: AnnulusDomain, shift: SpaceShift, lo: float = 0.0, hi: float = 1.0,
                     resolution: int = DEFAULT_RESOLUTION):
    """'A' if (x(tau), v) is C1 on [lo, hi], 'B' if C2 there, else None.

    Certified twice: the classifier on ``resolution`` sample points, and the
    exact test that x(tau) . v_hat is constant while the transverse
    coordinate is linear, so both endpoints inside |y| < r settle it.
    """
    taus = np.linspace(lo, hi, resolution)
    pts = shift.points(taus)
    vv = np.repeat(shift.v[None, :], taus.size, axis=0)
    case = classify_batch(domain, pts, vv)["case"]
    ok_domain = np.all(domain.contains(pts, closed=True))
    y = np.abs(shift.transverse(np.array([lo, hi])))
    inside = bool(np.all(y < domain.r - domain.eps_boundary))
    p = shift.along()
    if ok_domain and inside and p > 0 and np.all(case == Case.C1):
        return "A"
    if ok_domain and inside and p < 0 and np.all(case == Case.C2):
        return "B"
    return None


def _ratio_terms(X, e, w):
    """|X_p . e| / |X_p . w| for rows of X."""
    num = np.abs(X[:, 0] * e[..., 0] + X[:, 1] * e[..., 1])
    den = np.abs(X[:, 0] * w[..., 0] + X[:, 1] * w[..., 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        return num / den


def singular_factor_sp(domain: AnnulusDomain, shift: SpaceShift, tau, membership="auto",
                       resolution: int = DEFAULT_RESOLUTION):
    """(1/S1_sp, 1/S2_sp, 1/S_sp) at tau (scalar or array).

    ``membership`` is 'A', 'B', None, or 'auto' to certify over [0, 1].
    """
    xd = shift.x_dot
    nx = float(np.hypot(xd[0], xd[1]))
    if nx == 0.0:
        raise ZeroShift("x(tau) is constant")
    if np.hypot(shift.v[0], shift.v[1]) == 0.0:
        raise VerticalState("v_p = 0")
    if membership == "auto":
        membership = space_membership(domain, shift, resolution=resolution)
    tau_arr = np.atleast_1d(np.asarray(tau, dtype=float))
    zero = np.zeros(tau_arr.shape)
    if membership is None:
        out = (zero, zero.copy(), zero.copy())
    else:
        pts = shift.points(tau_arr)
        vv = np.repeat(shift.v[None, :], tau_arr.size, axis=0)
        c = classify_batch(domain, pts, vv)
        e = xd / nx
        t0 = _ratio_terms(c["X0"], e, shift.v)
        t1 = _ratio_terms(c["X1"], e, shift.v)
        if membership == "A":
            out = (t0, t1, t0 + t1)
        else:
            out = (t1, t0, t0 + t1)
    if np.ndim(tau) == 0:
        return tuple(float(o[0]) for o in out)
    return out


# ---------------------------------------------------------------------------
# velocity shift
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VelocityShift:
    """Arc interpolation between (v_tilde + zeta) and (v + zeta).

    ``rotation`` is the frame matrix mapping (cos T, sin T, 0) to the planar
    direction of v(tau) at T = tau * theta.
    """

    v: np.ndarray
    v_bar: np.ndarray
    zeta: np.ndarray
    v_tilde: np.ndarray
    theta: float
    rotation: np.ndarray

    @property
    def w(self) -> np.ndarray:
        return self.v + self.zeta

    @property
    def speed_p(self) -> float:
        return float(np.hypot(self.w[0], self.w[1]))

    def path(self, tau) -> np.ndarray:
        """v(tau) (this is the v + zeta type velocity), shape (n, 3)."""
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        T = tau * self.theta
        loc = np.stack([np.cos(T), np.sin(T), np.zeros_like(T)], axis=1)
        out = self.speed_p * loc @ self.rotation.T
        out[:, 2] = self.w[2]
        return out

    def path_dot(self, tau) -> np.ndarray:
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        T = tau * self.theta
        loc = np.stack([-np.sin(T), np.cos(T), np.zeros_like(T)], axis=1)
        out = self.speed_p * self.theta * loc @ self.rotation.T
        out[:, 2] = 0.0
        return out

    def signed_sweep(self) -> float:
        """Signed planar angle from (v_tilde + zeta)_p to (v + zeta)_p."""
        a = self.rotation[:, 0]
        b = self.w / self.speed_p
        return float(np.arctan2(a[0] * b[1] - a[1] * b[0], a[0] * b[0] + a[1] * b[1]))


def make_velocity_shift(v, v_bar, zeta) -> VelocityShift:
    """Shifted velocity and rotation frame for (v, v_bar, zeta).

    Raises
    ------
    DegenerateDirection
        If the planar parts of v + zeta and v_bar + zeta are parallel or
        anti-parallel, or either vanishes.
    """
    v = np.asarray(v, dtype=float).copy()
    v_bar = np.asarray(v_bar, dtype=float).copy()
    zeta = np.asarray(zeta, dtype=float).copy()
    w, wb = v + zeta, v_bar + zeta
    sw = float(np.hypot(w[0], w[1]))
    swb = float(np.hypot(wb[0], wb[1]))
    if sw == 0.0 or swb == 0.0:
        raise DegenerateDirection("a planar velocity vanishes")
    uw = np.array([w[0] / sw, w[1] / sw, 0.0])
    ub = np.array([wb[0] / swb, wb[1] / swb, 0.0])
    cos_t = float(uw @ ub)
    sin_t = float(abs(ub[0] * uw[1] - ub[1] * uw[0]))
    if sin_t <= PARALLEL_TOL:
        raise DegenerateDirection("(v+zeta)_p and (v_bar+zeta)_p are parallel")
    theta = float(np.arctan2(sin_t, cos_t))
    frame = np.column_stack([ub, uw, np.cross(ub, uw)])
    M = np.array([[1.0, cos_t, 0.0], [0.0, sin_t, 0.0], [0.0, 0.0, 1.0]])
    rot = frame @ np.linalg.inv(M)
    # the third column carries sin(theta) from the cross product; keep it unit
    rot[:, 2] = np.array([0.0, 0.0, 1.0])
    wt = np.array([sw * ub[0], sw * ub[1], w[2]])
    return VelocityShift(v, v_bar, zeta, wt - zeta, theta, rot)


def velocity_membership(domain: AnnulusDomain, x, shift: VelocityShift, lo: float = 0.0, hi: float = 1.0,
                        resolution: int = DEFAULT_RESOLUTION):
    """'D' if (x, v(tau)) is C1 on [lo, hi], 'E' if C2, else None.

    The C1 and C2 sets are arcs of direction narrower than pi, so the
    endpoint classification certifies the sub-arc; the sampled check guards
    against mislabeled endpoints.
    """
    taus = np.linspace(lo, hi, resolution)
    vv = shift.path(taus)
    xx = np.repeat(np.asarray(x, dtype=float)[None, :], taus.size, axis=0)
    case = classify_batch(domain, xx, vv)["case"]
    if np.all(case == Case.C1):
        return "D"
    if np.all(case == Case.C2):
        return "E"
    return None


def singular_factor_vel(domain: AnnulusDomain, x, shift: VelocityShift, tau, membership="auto",
                        resolution: int = DEFAULT_RESOLUTION):
    """(1/S1_vel, 1/S2_vel, 1/S_vel) at tau (scalar or array)."""
    if shift.theta == 0.0:
        raise ZeroShift("v(tau) is constant")
    if membership == "auto":
        membership = velocity_membership(domain, x, shift, resolution=resolution)
    tau_arr = np.atleast_1d(np.asarray(tau, dtype=float))
    zero = np.zeros(tau_arr.shape)
    if membership is None:
        out = (zero, zero.copy(), zero.copy())
    else:
        vv = shift.path(tau_arr)
        vd = shift.path_dot(tau_arr)
        e = vd / np.linalg.norm(vd, axis=1)[:, None]
        xx = np.repeat(np.asarray(x, dtype=float)[None, :], tau_arr.size, axis=0)
        c = classify_batch(domain, xx, vv)
        t0 = c["t_f"] * _ratio_terms(c["X0"], e, vv)
        t1 = c["t_b"] * _ratio_terms(c["X1"], e, vv)
        if membership == "D":
            out = (t0, t1, t0 + t1)
        else:
            out = (t1, t0, t0 + t1)
    if np.ndim(tau) == 0:
        return tuple(float(o[0]) for o in out)
    return out


# ---------------------------------------------------------------------------
# critical parameters
# ---------------------------------------------------------------------------

def _roots_of_linear(f, targets, tol):
    """Roots in [0, 1] of f(tau) = target for a monotone f, by bracketing."""
    f0, f1 = f(0.0), f(1.0)
    roots = []
    for g in targets:
        a, b = f0 - g, f1 - g
        if a == 0.0:
            roots.append(0.0)
        elif b == 0.0:
            roots.append(1.0)
        elif a * b < 0:
            roots.append(brentq(lambda s: f(s) - g, 0.0, 1.0, xtol=tol, rtol=4 * np.finfo(float).eps))
    return roots


def critical_tau(domain: AnnulusDomain, shift, which, x=None, tol: float = 1e-12):
    """Critical path parameter of the given kind, or None.

    Space kinds act on a :class:`SpaceShift` through the transverse
    coordinate y(tau): tangency to the inner circle is |y| = r, the head-on
    chord is y = 0. Velocity kinds act on a :class:`VelocityShift` (with
    position ``x``) through the direction angle phi(tau) of v(tau)_p relative
    to x_p: tangency is |sin phi| = r/|x|_p with cos phi > 0 (plus) or < 0
    (minus); the head-on directions are phi = 0 and phi = pi.
    When two crossings exist the one nearest tau = 1 is returned.
    """
    which = CriticalKind(which) if not isinstance(which, CriticalKind) else which
    if which in (CriticalKind.SpacePlus, CriticalKind.SpaceZero):
        f = lambda s: float(shift.transverse(s))  # noqa: E731
        targets = [domain.r, -domain.r] if which == CriticalKind.SpacePlus else [0.0]
        roots = _roots_of_linear(f, targets, tol)
    else:
        if x is None:
            raise ValueError("velocity critical parameters need the position x")
        x = np.asarray(x, dtype=float)
        rho = float(np.hypot(x[0], x[1]))
        th_x = float(np.arctan2(x[1], x[0]))
        w0 = shift.path(0.0)[0]
        phi0 = float(np.arctan2(w0[1], w0[0])) - th_x
        phi0 = (phi0 + np.pi) % (2 * np.pi) - np.pi
        sweep = shift.signed_sweep()
        f = lambda s: phi0 + s * sweep  # noqa: E731
        if which in (CriticalKind.VelPlus, CriticalKind.VelMinus):
            if rho <= domain.r:
                return None
            alpha = float(np.arcsin(domain.r / rho))
            base = [alpha, -alpha] if which == CriticalKind.VelPlus else [np.pi - alpha, np.pi + alpha]
        elif which == CriticalKind.VelZeroPlus:
            base = [0.0]
        else:
            base = [np.pi]
        targets = [b + 2 * np.pi * n for b in base for n in (-2, -1, 0, 1)]
        roots = _roots_of_linear(f, targets, tol)
    if not roots:
        return None
    return float(max(roots))


# ---------------------------------------------------------------------------
# batch versions used by the scans
# ---------------------------------------------------------------------------

def space_shift_batch(domain: AnnulusDomain, x, x_bar, v):
    """Row-wise :func:`make_space_shift`.

    Returns a dict with post-swap ``x``, ``x_bar``, the shifted ``x_tilde``,
    ``swapped`` and ``ok`` (False where the scalar version would raise).
    """
    x = np.array(x, dtype=float, ndmin=2)
    x_bar = np.array(x_bar, dtype=float, ndmin=2)
    v = np.array(v, dtype=float, ndmin=2)
    sp = np.hypot(v[:, 0], v[:, 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        vh = v[:, :2] / sp[:, None]
    d = x[:, :2] - x_bar[:, :2]
    nd = np.hypot(d[:, 0], d[:, 1])
    par = np.abs(np.abs(np.sum(d * vh, axis=1)) - nd) <= PARALLEL_TOL * nd
    ok = (sp > 0) & (nd > 0) & ~par & (np.linalg.norm(x - x_bar, axis=1) < domain.width)

    def proj(a, b):
        out = b.copy()
        out[:, :2] = b[:, :2] + np.sum((a[:, :2] - b[:, :2]) * vh, axis=1)[:, None] * vh
        out[:, 2] = a[:, 2]
        return out

    xt1 = proj(x, x_bar)
    xt2 = proj(x_bar, x)
    in1 = domain.contains(xt1, closed=False)
    in2 = domain.contains(xt2, closed=False)
    swapped = ~in1 & in2
    ok &= in1 | in2
    xo = np.where(swapped[:, None], x_bar, x)
    xbo = np.where(swapped[:, None], x, x_bar)
    xt = np.where(swapped[:, None], xt2, xt1)
    return {"x": xo, "x_bar": xbo, "x_tilde": xt, "swapped": swapped, "ok": ok}


def velocity_shift_batch(v, v_bar, zeta=None):
    """Row-wise :func:`make_velocity_shift`.

    Returns ``(v_tilde, sweep, ok)`` where ``sweep`` is the signed planar angle
    from (v_tilde + zeta)_p to (v + zeta)_p.
    """
    v = np.array(v, dtype=float, ndmin=2)
    v_bar = np.array(v_bar, dtype=float, ndmin=2)
    zeta = np.zeros_like(v) if zeta is None else np.broadcast_to(np.asarray(zeta, dtype=float), v.shape)
    w, wb = v + zeta, v_bar + zeta
    sw = np.hypot(w[:, 0], w[:, 1])
    swb = np.hypot(wb[:, 0], wb[:, 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        ub = wb[:, :2] / swb[:, None]
        uw = w[:, :2] / sw[:, None]
    cross = ub[:, 0] * uw[:, 1] - ub[:, 1] * uw[:, 0]
    dot = np.sum(ub * uw, axis=1)
    sweep = np.arctan2(cross, dot)
    ok = (sw > 0) & (swb > 0) & (np.abs(cross) > PARALLEL_TOL)
    wt = np.empty_like(w)
    wt[:, :2] = sw[:, None] * ub
    wt[:, 2] = w[:, 2]
    return wt - zeta, sweep, ok


def arc_path_batch(w_tilde, sweep, tau):
    """Points of the arc v(tau) for each row; ``tau`` has shape (n,) or (n, q).

    The planar part of ``w_tilde`` (already at the target speed) is rotated
    by ``tau * sweep``; the vertical part is kept.
    """
    w_tilde = np.array(w_tilde, dtype=float, ndmin=2)
    tau = np.asarray(tau, dtype=float)
    if tau.ndim == 1:
        tau = tau[:, None]
    ang = tau * np.asarray(sweep)[:, None]
    c, s = np.cos(ang), np.sin(ang)
    out = np.empty(tau.shape + (3,))
    out[..., 0] = c * w_tilde[:, 0, None] - s * w_tilde[:, 1, None]
    out[..., 1] = s * w_tilde[:, 0, None] + c * w_tilde[:, 1, None]
    out[..., 2] = w_tilde[:, 2, None]
    return out
