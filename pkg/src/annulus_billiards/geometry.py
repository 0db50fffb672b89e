"""
Geometry of the cylindrical annulus r < |x_p| < R (infinite in x3).

Everything that decides where a straight line meets the two boundary
circles lives here: normals, specular reflection, exit times, first hits,
the C1/C2/C3 case split, the incidence angles a and b, and the weight h.

Batch functions take arrays of shape (N, 3) and return arrays; the scalar
functions wrap them for single states and raise on undefined input.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import CaseMismatch, NotOnBoundary, VerticalState

# Radicand magnitude below which tangency is accepted as exact.
RADICAND_CLAMP = 1e-12
# Relative size of |v_p| below which the planar velocity counts as zero.
VERTICAL_REL_TOL = 1e-15


class Case(enum.IntEnum):
    C1 = 1
    C2 = 2
    C3 = 3
    GRAZING = 4
    VERTICAL = 5


class Orientation(enum.IntEnum):
    CLOCKWISE = 1
    COUNTER_CLOCKWISE = -1
    RADIAL = 0


class Shell(enum.IntEnum):
    INNER = 0
    OUTER = 1


@dataclass(frozen=True)
class AnnulusDomain:
    """Concentric cylindrical annulus with radii ``r < R``.

    Parameters
    ----------
    R, r : float
        Outer and inner radius.
    eps_boundary : float
        Tolerance (length) for boundary membership and tangency.
    eps_time : float
        Base tolerance for bounce-time ties; scaled by ``max(1, t)``.
    """

    R: float = 2.0
    r: float = 1.0
    eps_boundary: float = 1e-10
    eps_time: float = 1e-12

    def __post_init__(self):
        if not (self.r > 0 and self.R > 0):
            raise ValueError(f"radii must be positive, got R={self.R}, r={self.r}")
        if not self.r < self.R:
            raise ValueError(f"need r < R, got R={self.R}, r={self.r}")
        if not self.eps_boundary > 0:
            raise ValueError("eps_boundary must be positive")
        if not self.eps_boundary < (self.R - self.r) / 1e6:
            raise ValueError(
                f"eps_boundary={self.eps_boundary} must be below (R-r)/1e6 = {(self.R - self.r) / 1e6}"
            )
        if not self.eps_time > 0:
            raise ValueError("eps_time must be positive")

    @property
    def width(self) -> float:
        return self.R - self.r

    def radius_p(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.hypot(x[..., 0], x[..., 1])

    def on_outer(self, x) -> np.ndarray:
        return np.abs(self.radius_p(x) - self.R) <= self.eps_boundary

    def on_inner(self, x) -> np.ndarray:
        return np.abs(self.radius_p(x) - self.r) <= self.eps_boundary

    def on_boundary(self, x) -> np.ndarray:
        return self.on_outer(x) | self.on_inner(x)

    def contains(self, x, closed: bool = True) -> np.ndarray:
        """Membership in the annulus, with ``eps_boundary`` slack when ``closed``."""
        rho = self.radius_p(x)
        if closed:
            return (rho >= self.r - self.eps_boundary) & (rho <= self.R + self.eps_boundary)
        return (rho > self.r + self.eps_boundary) & (rho < self.R - self.eps_boundary)


@dataclass(frozen=True)
class PhaseState:
    """A point (x, v) with x in the annulus and v in R^3."""

    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=float).reshape(3)
        v = np.array(self.v, dtype=float).reshape(3)
        x.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)

    @property
    def x_p(self) -> np.ndarray:
        return self.x[:2]

    @property
    def v_p(self) -> np.ndarray:
        return self.v[:2]

    @property
    def speed_p(self) -> float:
        return float(np.hypot(self.v[0], self.v[1]))

    @property
    def v_hat_p(self) -> np.ndarray:
        s = self.speed_p
        return self.v_p / s if s > 0 else np.zeros(2)

    @property
    def bracket_v(self) -> float:
        return float(np.sqrt(1.0 + self.v @ self.v))

    @property
    def theta_x(self) -> float:
        return float(np.arctan2(self.x[1], self.x[0]))

    @property
    def theta_v(self) -> float:
        return float(np.arctan2(self.v[1], self.v[0]))


@dataclass(frozen=True)
class BounceDecomposition:
    """Exit times, first hits, case label and angles of a single state."""

    case: Case
    orientation: Orientation
    t_b: float
    t_f: float
    t_star: float
    chord_l: float
    X0: np.ndarray | None
    X1: np.ndarray | None
    a: float
    b: float | None
    cos_a: float = field(default=np.nan)
    cos_b: float | None = None


def wrap_angle(theta):
    """Map angles to (-pi, pi]."""
    w = np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return w if w.ndim else float(w)


# ---------------------------------------------------------------------------
# batch core
# ---------------------------------------------------------------------------

@dataclass
class LineGeometry:
    """Per-state quantities of the planar line through x with direction v_p.

    All arrays have shape (N,). ``p`` is the signed projection x_p . v_hat_p,
    ``d`` the impact parameter |x_p x v_hat_p|, ``cross`` the signed
    v_x x_y - v_y x_x (positive means clockwise motion).
    """

    speed: np.ndarray
    vhat: np.ndarray
    rho2: np.ndarray
    p: np.ndarray
    d: np.ndarray
    cross: np.ndarray
    vertical: np.ndarray
    grazing: np.ndarray
    hR: np.ndarray
    hr: np.ndarray
    inner_fwd: np.ndarray
    inner_bwd: np.ndarray


def _as_batch(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    return a


def line_geometry(domain: AnnulusDomain, x, v) -> LineGeometry:
    x = _as_batch(x)
    v = _as_batch(v)
    xp = x[:, :2]
    vp = v[:, :2]
    speed = np.hypot(vp[:, 0], vp[:, 1])
    full = np.sqrt(np.sum(v * v, axis=1))
    vertical = speed <= VERTICAL_REL_TOL * full
    vertical |= speed == 0.0
    safe = np.where(vertical, 1.0, speed)
    vhat = vp / safe[:, None]
    vhat[vertical] = 0.0
    rho2 = np.sum(xp * xp, axis=1)
    p = np.sum(xp * vhat, axis=1)
    cross = vhat[:, 0] * xp[:, 1] - vhat[:, 1] * xp[:, 0]
    d = np.abs(cross)
    R, r = domain.R, domain.r
    hR = np.sqrt(np.maximum(R * R - d * d, 0.0))
    hr2 = r * r - d * d
    grazing = (np.abs(d - r) <= domain.eps_boundary) | (np.abs(hr2) <= RADICAND_CLAMP * r * r)
    grazing &= ~vertical
    hr = np.sqrt(np.maximum(hr2, 0.0))
    hr = np.where(grazing, 0.0, hr)
    hits_inner_line = (hr2 > 0) & ~grazing & ~vertical
    inner_fwd = hits_inner_line & (p < 0)
    inner_bwd = hits_inner_line & (p > 0)
    return LineGeometry(speed, vhat, rho2, p, d, cross, vertical, grazing, hR, hr, inner_fwd, inner_bwd)


def exit_times_batch(domain: AnnulusDomain, x, v, geo: LineGeometry | None = None):
    """Backward and forward exit times for a batch of states.

    Returns ``(t_b, t_f, geo)``. Vertical states get ``inf`` for both.
    Grazing lines are treated as missing the inner circle.
    """
    g = line_geometry(domain, x, v) if geo is None else geo
    R2, r2 = domain.R ** 2, domain.r ** 2
    p, hR, hr, rho2 = g.p, g.hR, g.hr, g.rho2
    with np.errstate(divide="ignore", invalid="ignore"):
        # forward/backward distances to the outer circle, cancellation-free
        s_out_f = np.where(p <= 0, -p + hR, (R2 - rho2) / (p + hR))
        s_out_b = np.where(p >= 0, p + hR, (R2 - rho2) / (-p + hR))
        s_in_f = (rho2 - r2) / (-p + hr)
        s_in_b = (rho2 - r2) / (p + hr)
    s_f = np.where(g.inner_fwd, s_in_f, s_out_f)
    s_b = np.where(g.inner_bwd, s_in_b, s_out_b)
    s_f = np.maximum(s_f, 0.0)
    s_b = np.maximum(s_b, 0.0)
    safe = np.where(g.vertical, 1.0, g.speed)
    t_f = np.where(g.vertical, np.inf, s_f / safe)
    t_b = np.where(g.vertical, np.inf, s_b / safe)
    return t_b, t_f, g


def classify_batch(domain: AnnulusDomain, x, v):
    """Vectorised classification.

    Returns a dict of arrays: ``case`` (int codes of :class:`Case`),
    ``orientation``, ``t_b``, ``t_f``, ``t_star``, ``X0``, ``X1``, ``a``, ``b``,
    ``cos_a``, ``cos_b`` (``nan`` where undefined) and the :class:`LineGeometry`.
    """
    x = _as_batch(x)
    v = _as_batch(v)
    t_b, t_f, g = exit_times_batch(domain, x, v)
    n = x.shape[0]
    case = np.full(n, int(Case.C3), dtype=np.int64)
    case[g.inner_bwd] = int(Case.C1)
    case[g.inner_fwd] = int(Case.C2)
    case[g.grazing] = int(Case.GRAZING)
    case[g.vertical] = int(Case.VERTICAL)
    radial_tol = 1e-14 * np.sqrt(g.rho2)
    orient = np.where(g.cross > radial_tol, int(Orientation.CLOCKWISE),
                      np.where(g.cross < -radial_tol, int(Orientation.COUNTER_CLOCKWISE),
                               int(Orientation.RADIAL)))
    finite = ~g.vertical
    X0 = np.full_like(x, np.nan)
    X1 = np.full_like(x, np.nan)
    X0[finite] = x[finite] + t_f[finite, None] * v[finite]
    X1[finite] = x[finite] - t_b[finite, None] * v[finite]
    a = np.arctan2(g.d, g.hR)
    cos_a = g.hR / domain.R
    has_b = np.isin(case, (int(Case.C1), int(Case.C2), int(Case.GRAZING)))
    b = np.where(has_b, np.arctan2(g.d, g.hr), np.nan)
    cos_b = np.where(has_b, g.hr / domain.r, np.nan)
    a = np.where(g.vertical, np.nan, a)
    cos_a = np.where(g.vertical, np.nan, cos_a)
    return {
        "case": case,
        "orientation": orient,
        "t_b": t_b,
        "t_f": t_f,
        "t_star": t_b + t_f,
        "X0": X0,
        "X1": X1,
        "a": a,
        "b": b,
        "cos_a": cos_a,
        "cos_b": cos_b,
        "geo": g,
    }


def angles_inner_product_batch(domain: AnnulusDomain, x, v):
    """Angles a, b from the hit-point inner-product definitions.

    Uses ``atan2(|u x w|, u . w)`` for the angle between the planar unit
    vectors, which is the same angle as ``arccos(u . w)`` without its loss
    of precision near 0.
    """
    c = classify_batch(domain, x, v)
    g = c["geo"]
    vh = g.vhat

    def ang(P, sign):
        u = sign * P[:, :2]
        dot = u[:, 0] * vh[:, 0] + u[:, 1] * vh[:, 1]
        crs = u[:, 0] * vh[:, 1] - u[:, 1] * vh[:, 0]
        return np.arctan2(np.abs(crs), dot)

    case = c["case"]
    a = np.full(case.shape, np.nan)
    b = np.full(case.shape, np.nan)
    c1 = case == Case.C1
    c2 = case == Case.C2
    c3 = (case == Case.C3) | (case == Case.GRAZING)
    a_fwd = ang(c["X0"], 1.0)
    a_bwd = ang(c["X1"], -1.0)
    a[c1 | c3] = a_fwd[c1 | c3]
    a[c2] = a_bwd[c2]
    b1 = ang(c["X1"], 1.0)
    b2 = ang(c["X0"], -1.0)
    b[c1] = b1[c1]
    b[c2] = b2[c2]
    return a, b


def weight_h_batch(domain: AnnulusDomain, x_p, v_p) -> np.ndarray:
    """h(x_p, v_p) = sqrt(1 - |x|_p^2/R^2 + (x_p . v_hat_p)^2/R^2).

    With v_p = 0 the projection term is dropped.
    """
    x_p = np.asarray(x_p, dtype=float)[..., :2]
    v_p = np.asarray(v_p, dtype=float)[..., :2]
    speed = np.hypot(v_p[..., 0], v_p[..., 1])
    safe = np.where(speed > 0, speed, 1.0)
    proj = np.where(speed > 0, np.sum(x_p * v_p, axis=-1) / safe, 0.0)
    rho2 = np.sum(x_p * x_p, axis=-1)
    R2 = domain.R ** 2
    return np.sqrt(np.maximum(1.0 - rho2 / R2 + proj * proj / R2, 0.0))


def outward_normal_batch(domain: AnnulusDomain, x, shell) -> np.ndarray:
    """Outward unit normal for points on a known shell (no membership check)."""
    x = _as_batch(x)
    shell = np.broadcast_to(np.asarray(shell), (x.shape[0],))
    rho = np.hypot(x[:, 0], x[:, 1])
    n = np.zeros_like(x)
    n[:, 0] = x[:, 0] / rho
    n[:, 1] = x[:, 1] / rho
    n[shell == Shell.INNER] *= -1.0
    return n


def reflect_batch(n, v) -> np.ndarray:
    """Specular reflection v - 2 (n . v) n for unit normals n."""
    v = _as_batch(v)
    n = _as_batch(n)
    return v - 2.0 * np.sum(n * v, axis=1)[:, None] * n


# ---------------------------------------------------------------------------
# scalar API
# ---------------------------------------------------------------------------

def _state(state_or_x, v=None) -> PhaseState:
    if isinstance(state_or_x, PhaseState):
        return state_or_x
    return PhaseState(state_or_x, v)


def shell_of(domain: AnnulusDomain, x) -> Shell:
    x = np.asarray(x, dtype=float)
    if domain.on_outer(x):
        return Shell.OUTER
    if domain.on_inner(x):
        return Shell.INNER
    raise NotOnBoundary(f"|x_p| = {domain.radius_p(x):.17g} is on neither shell")


def outward_normal(domain: AnnulusDomain, x) -> np.ndarray:
    """Outward unit normal at a boundary point.

    Raises
    ------
    NotOnBoundary
        If ``|x_p|`` is neither ``R`` nor ``r`` within ``eps_boundary``.
    """
    shell = shell_of(domain, x)
    return outward_normal_batch(domain, x, shell)[0]


def reflect(domain: AnnulusDomain, x, v) -> np.ndarray:
    """Specular reflection R_x v at a boundary point x."""
    n = outward_normal(domain, x)
    return reflect_batch(n, v)[0]


def exit_times(domain: AnnulusDomain, state: PhaseState):
    """(t_b, t_f, t_star, l); all times are ``inf`` and l is ``nan`` for vertical states."""
    t_b, t_f, g = exit_times_batch(domain, state.x, state.v)
    tb, tf = float(t_b[0]), float(t_f[0])
    if g.vertical[0]:
        return np.inf, np.inf, np.inf, np.nan
    t_star = tb + tf
    return tb, tf, t_star, float(g.speed[0]) * t_star


def first_hits(domain: AnnulusDomain, state: PhaseState):
    """(X0, X1) = (x + t_f v, x - t_b v)."""
    c = classify_batch(domain, state.x, state.v)
    if c["case"][0] == Case.VERTICAL:
        raise VerticalState("v_p = 0: the trajectory never reaches the boundary")
    return c["X0"][0], c["X1"][0]


def classify(domain: AnnulusDomain, state: PhaseState) -> BounceDecomposition:
    c = classify_batch(domain, state.x, state.v)
    case = Case(int(c["case"][0]))
    if case == Case.VERTICAL:
        raise VerticalState("v_p = 0: no bounce decomposition")
    t_b = float(c["t_b"][0])
    t_f = float(c["t_f"][0])
    b = float(c["b"][0]) if np.isfinite(c["b"][0]) else None
    cos_b = float(c["cos_b"][0]) if np.isfinite(c["cos_b"][0]) else None
    return BounceDecomposition(
        case=case,
        orientation=Orientation(int(c["orientation"][0])),
        t_b=t_b,
        t_f=t_f,
        t_star=t_b + t_f,
        chord_l=float(c["geo"].speed[0]) * (t_b + t_f),
        X0=c["X0"][0],
        X1=c["X1"][0],
        a=float(c["a"][0]),
        b=b,
        cos_a=float(c["cos_a"][0]),
        cos_b=cos_b,
    )


def angle_a(domain: AnnulusDomain, state: PhaseState) -> float:
    """Incidence angle at the outer circle, in [0, pi/2)."""
    c = classify_batch(domain, state.x, state.v)
    if c["case"][0] == Case.VERTICAL:
        raise VerticalState("angle a is undefined for v_p = 0")
    return float(c["a"][0])


def angle_b(domain: AnnulusDomain, state: PhaseState) -> float:
    """Incidence angle at the inner circle, in [0, pi/2]; C1, C2 and grazing only."""
    c = classify_batch(domain, state.x, state.v)
    case = c["case"][0]
    if case == Case.VERTICAL:
        raise VerticalState("angle b is undefined for v_p = 0")
    if case == Case.C3:
        raise CaseMismatch("angle b is undefined for states that miss the inner circle")
    return float(c["b"][0])


def weight_h(domain: AnnulusDomain, x_p, v_p) -> float:
    return float(weight_h_batch(domain, x_p, v_p))
