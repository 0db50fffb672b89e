"""
Backward specular flow X(s; t, x, v), V(s; t, x, v) in the annulus.

Three independent evaluations are provided:

* ``bounce_sequence``: the reflection recursion, one quadratic solve per bounce.
* ``closed_form_bounce``: angular coordinates of the k-th bounce in O(1).
* ``flow_oracle``: event-driven ray tracing that never uses the chord period.

``flow`` itself uses the bounce count m(s; t, x, v) and the closed form.

Orientation convention
----------------------
The closed forms are evaluated in a canonical frame where theta_v = 0 and
theta_x lies in [0, pi] (a mirror in the planar x-axis is applied for
counter-clockwise states). In that frame the bounce angles increase with k,
i.e. the formulas hold with sign ``+1`` as written: the backward-in-time
bounce points advance counter-clockwise, which is the forward-in-time motion
read in reverse. The sign is re-derived at import time by
:func:`orientation_sign` against the recursion on a probe state.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BounceOverflow, CaseMismatch, VerticalState
from .geometry import (
    AnnulusDomain,
    Case,
    Orientation,
    PhaseState,
    Shell,
    _as_batch,
    classify_batch,
    wrap_angle,
)

MAX_ORACLE_BOUNCES = 10**6


@dataclass(frozen=True)
class BounceEntry:
    k: int
    X: np.ndarray
    V: np.ndarray
    t_bk: float


@dataclass(frozen=True)
class BounceSequence:
    entries: tuple
    source: str = "Recursion"

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, k):
        return self.entries[k]


@dataclass(frozen=True)
class FlowSample:
    """Characteristic evaluated at time s.

    ``t_k`` is the impact time of bounce k (``t`` itself when k = 0) and
    ``log`` holds ``(j, t_j, X_j, V_j)`` for the bounces j = 1..k when requested.
    """

    s: float
    k: int
    X: np.ndarray
    V: np.ndarray
    t_k: float
    log: tuple = field(default=())


def eps_time(domain: AnnulusDomain, t) -> np.ndarray:
    return domain.eps_time * np.maximum(1.0, np.abs(t))


# ---------------------------------------------------------------------------
# recursion
# ---------------------------------------------------------------------------

def shell_pattern(case) -> tuple[np.ndarray, np.ndarray]:
    """Shells of the even- and odd-indexed bounce points for each case code."""
    case = np.asarray(case)
    even = np.where(case == Case.C2, int(Shell.INNER), int(Shell.OUTER))
    odd = np.where(case == Case.C1, int(Shell.INNER), int(Shell.OUTER))
    return even, odd


def _next_hit_time(X, V, rho_target, same_shell):
    """Backward time from boundary point X along -V to the circle of radius rho_target.

    Solves |X_p - tau V_p|^2 = rho^2, i.e. A tau^2 - 2 B tau + C = 0, taking the
    larger root when leaving and re-hitting the same circle and the smaller
    positive root otherwise.
    """
    A = V[:, 0] ** 2 + V[:, 1] ** 2
    B = X[:, 0] * V[:, 0] + X[:, 1] * V[:, 1]
    C = X[:, 0] ** 2 + X[:, 1] ** 2 - rho_target ** 2
    S = np.sqrt(np.maximum(B * B - A * C, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        larger = np.where(B >= 0, (B + S) / A, C / (B - S))
        smaller = np.where(B > 0, C / (B + S), (B - S) / A)
    # leaving the inner circle outward: the smaller root is negative
    use_larger = same_shell | (C < 0)
    return np.where(use_larger, larger, smaller)


def _reflect_on_shell(X, V, shell):
    rho = np.hypot(X[:, 0], X[:, 1])
    n = np.zeros_like(X)
    n[:, 0] = X[:, 0] / rho
    n[:, 1] = X[:, 1] / rho
    n[shell == Shell.INNER] *= -1.0
    return V - 2.0 * np.sum(n * V, axis=1)[:, None] * n


def bounce_sequence_batch(domain: AnnulusDomain, x, v, k_max: int):
    """Reflection recursion for a batch of states.

    Returns ``(X, V, t_bk, case)`` with ``X, V`` of shape (k_max+1, N, 3) and
    ``t_bk`` of shape (k_max+1, N), where ``t_bk[k]`` is the backward time from
    X_k to X_{k+1} recomputed from the ray-circle quadratic at X_k.
    Vertical states are rejected.
    """
    x = _as_batch(x)
    v = _as_batch(v)
    c = classify_batch(domain, x, v)
    if np.any(c["case"] == Case.VERTICAL):
        raise VerticalState("bounce sequence requested for a state with v_p = 0")
    n = x.shape[0]
    even, odd = shell_pattern(c["case"])
    rad_even = np.where(even == Shell.OUTER, domain.R, domain.r)
    rad_odd = np.where(odd == Shell.OUTER, domain.R, domain.r)
    X = np.empty((k_max + 1, n, 3))
    V = np.empty((k_max + 1, n, 3))
    tb = np.empty((k_max + 1, n))
    X[0] = c["X0"]
    V[0] = v
    same = even == odd
    for k in range(k_max + 1):
        rad_next = rad_odd if k % 2 == 0 else rad_even
        tb[k] = _next_hit_time(X[k], V[k], rad_next, same)
        if k == k_max:
            break
        if k == 0:
            X[1] = c["X1"]
        else:
            X[k + 1] = X[k] - tb[k][:, None] * V[k]
        sh_next = odd if k % 2 == 0 else even
        V[k + 1] = _reflect_on_shell(X[k + 1], V[k], sh_next)
    return X, V, tb, c["case"]


def bounce_sequence(domain: AnnulusDomain, state: PhaseState, k_max: int) -> BounceSequence:
    """Bounce points X_0..X_{k_max} and velocities by the reflection recursion.

    X_0 = x + t_f v and X_1 = x - t_b v come from the exit times; every later
    point solves the ray-circle quadratic afresh from the previous one.
    """
    if k_max < 0:
        raise ValueError("k_max must be nonnegative")
    X, V, tb, _ = bounce_sequence_batch(domain, state.x, state.v, k_max)
    entries = tuple(
        BounceEntry(k, X[k, 0].copy(), V[k, 0].copy(), float(tb[k, 0])) for k in range(k_max + 1)
    )
    return BounceSequence(entries, "Recursion")


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------

def _canonical_angles(case, a, b, k):
    """Bounce angles relative to theta_v in the canonical (clockwise) frame."""
    k = np.asarray(k, dtype=float)
    j_even = np.floor(k / 2.0)
    odd = np.mod(k, 2.0) == 1.0
    b0 = np.where(np.isfinite(b), b, 0.0)
    c1 = case == Case.C1
    c2 = case == Case.C2
    phi_x = np.where(
        c1,
        k * b0 - (k - 1.0) * a,
        np.where(c2, np.pi + (k - 1.0) * b0 - k * a, k * np.pi + (1.0 - 2.0 * k) * a),
    )
    j = j_even
    v_even = 2.0 * j * (b0 - a)
    v_odd_c1 = np.pi + (2.0 * j + 2.0) * b0 - 2.0 * j * a
    v_odd_c2 = np.pi + 2.0 * j * b0 - (2.0 * j + 2.0) * a
    v_c12 = np.where(odd, np.where(c1, v_odd_c1, v_odd_c2), v_even)
    phi_v = np.where(c1 | c2, v_c12, k * np.pi - 2.0 * k * a)
    even_shell, odd_shell = shell_pattern(case)
    shell = np.where(odd, odd_shell, even_shell)
    return phi_x, phi_v, shell


def closed_form_batch(domain: AnnulusDomain, x, v, k, sigma: int | None = None, cls=None):
    """Closed-form X_k, V_k for a batch of states and bounce indices.

    Grazing states use the C3 representation. Returns ``(X_k, V_k, theta_X,
    theta_V)`` with angles wrapped to (-pi, pi].
    """
    x = _as_batch(x)
    v = _as_batch(v)
    c = classify_batch(domain, x, v) if cls is None else cls
    case = np.where(c["case"] == Case.GRAZING, int(Case.C3), c["case"])
    k = np.broadcast_to(np.asarray(k), case.shape)
    sig = orientation_sign() if sigma is None else sigma
    phi_x, phi_v, shell = _canonical_angles(case, c["a"], c["b"], k)
    mirror = np.where(c["orientation"] == Orientation.COUNTER_CLOCKWISE, -1.0, 1.0)
    theta_v = np.arctan2(v[:, 1], v[:, 0])
    th_x = wrap_angle(theta_v + sig * mirror * phi_x)
    th_v = wrap_angle(theta_v + sig * mirror * phi_v)
    rad = np.where(shell == Shell.OUTER, domain.R, domain.r)
    speed = c["geo"].speed
    Xk = np.empty_like(x)
    Xk[:, 0] = rad * np.cos(th_x)
    Xk[:, 1] = rad * np.sin(th_x)
    Xk[:, 2] = x[:, 2] - v[:, 2] * (c["t_b"] + (k - 1.0) * c["t_star"])
    Vk = np.empty_like(v)
    Vk[:, 0] = speed * np.cos(th_v)
    Vk[:, 1] = speed * np.sin(th_v)
    Vk[:, 2] = v[:, 2]
    return Xk, Vk, th_x, th_v


def closed_form_bounce(domain: AnnulusDomain, state: PhaseState, k: int):
    """Angular coordinates of the k-th bounce.

    Returns ``(theta_Xk, |X_k|_p, theta_Vk)``.

    Raises
    ------
    CaseMismatch
        For grazing states (use the C3 representation explicitly) and
    VerticalState
        for v_p = 0.
    """
    c = classify_batch(domain, state.x, state.v)
    case = c["case"][0]
    if case == Case.VERTICAL:
        raise VerticalState("no bounces for v_p = 0")
    if case == Case.GRAZING:
        raise CaseMismatch("closed forms are stated for C1, C2 and C3 only")
    Xk, _, th_x, th_v = closed_form_batch(domain, state.x, state.v, k, cls=c)
    return float(th_x[0]), float(np.hypot(Xk[0, 0], Xk[0, 1])), float(th_v[0])


@functools.lru_cache(maxsize=None)
def orientation_sign() -> int:
    """Sign of the closed-form increments, fixed against the recursion on a probe."""
    dom = AnnulusDomain(2.0, 1.0)
    probe = np.array([[0.3, 1.7, 0.0]]), np.array([[1.0, 0.2, 0.0]])
    X, _, _, _ = bounce_sequence_batch(dom, probe[0], probe[1], 3)
    for sig in (1, -1):
        Xc, _, _, _ = closed_form_batch(dom, probe[0], probe[1], 3, sigma=sig)
        if np.allclose(Xc[0], X[3, 0], atol=1e-9):
            return sig
    raise RuntimeError("closed form agrees with the recursion for neither sign")


# ---------------------------------------------------------------------------
# bounce count and flow
# ---------------------------------------------------------------------------

def _bounce_count_arrays(domain, s, t, t_b, t_star, vertical):
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    eps = eps_time(domain, t)
    ok = ~vertical & (t_star > 0)
    ts = np.where(ok, t_star, 1.0)
    q = (t - t_b - s) / ts
    m = np.floor(q) + 1.0
    m = np.maximum(m, 0.0)
    # s within eps of t_{m+1} belongs to index m+1 (the s <= t_k side)
    t_next = t - t_b - m * ts
    m = np.where(s - t_next <= eps, m + 1.0, m)
    m = np.where(np.abs(t - s) <= eps, 0.0, m)
    m = np.where(ok, m, 0.0)
    return m.astype(np.int64)


def bounce_count(domain: AnnulusDomain, s: float, t: float, state: PhaseState) -> int:
    """m(s; t, x, v) = floor((t - t_b - s)/t_star) + 1, clamped at 0.

    Vertical states never bounce and return 0.
    """
    if not 0 <= s <= t:
        raise ValueError(f"need 0 <= s <= t, got s={s}, t={t}")
    c = classify_batch(domain, state.x, state.v)
    m = _bounce_count_arrays(domain, s, t, c["t_b"], c["t_star"], c["geo"].vertical)
    return int(m[0])


def flow_batch(domain: AnnulusDomain, s, t, x, v):
    """Vectorised backward flow.

    Returns ``(X, V, k, t_k)``; ``s`` and ``t`` broadcast against the batch.
    """
    x = _as_batch(x)
    v = _as_batch(v)
    n = x.shape[0]
    s = np.broadcast_to(np.asarray(s, dtype=float), (n,))
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
    c = classify_batch(domain, x, v)
    vertical = c["geo"].vertical
    m = _bounce_count_arrays(domain, s, t, c["t_b"], c["t_star"], vertical)
    X = x - (t - s)[:, None] * v
    V = v.copy()
    tk = t.copy()
    moving = m > 0
    if np.any(moving):
        idx = np.nonzero(moving)[0]
        sub = {key: (val[idx] if isinstance(val, np.ndarray) else val) for key, val in c.items() if key != "geo"}
        sub["geo"] = _subset_geo(c["geo"], idx)
        Xk, Vk, _, _ = closed_form_batch(domain, x[idx], v[idx], m[idx], cls=sub)
        t_m = t[idx] - c["t_b"][idx] - (m[idx] - 1.0) * c["t_star"][idx]
        X[idx] = Xk - Vk * (t_m - s[idx])[:, None]
        V[idx] = Vk
        tk[idx] = t_m
    return X, V, m, tk


def _subset_geo(geo, idx):
    from .geometry import LineGeometry

    return LineGeometry(**{f: getattr(geo, f)[idx] for f in geo.__dataclass_fields__})


def flow(domain: AnnulusDomain, s: float, t: float, state: PhaseState, with_log: bool = False,
         max_log: int = 10_000) -> FlowSample:
    """X(s; t, x, v) and V(s; t, x, v) from the bounce count and the closed form."""
    if not 0 <= s <= t:
        raise ValueError(f"need 0 <= s <= t, got s={s}, t={t}")
    X, V, m, tk = flow_batch(domain, s, t, state.x, state.v)
    k = int(m[0])
    log = ()
    if with_log and k > 0:
        c = classify_batch(domain, state.x, state.v)
        js = np.arange(1, min(k, max_log) + 1)
        reps = np.repeat(state.x[None, :], js.size, axis=0)
        repv = np.repeat(state.v[None, :], js.size, axis=0)
        Xj, Vj, _, _ = closed_form_batch(domain, reps, repv, js)
        tj = t - c["t_b"][0] - (js - 1.0) * c["t_star"][0]
        log = tuple((int(j), float(tj_), Xj[i].copy(), Vj[i].copy()) for i, (j, tj_) in enumerate(zip(js, tj)))
    return FlowSample(float(s), k, X[0], V[0], float(tk[0]), log)


# ---------------------------------------------------------------------------
# event-driven oracle
# ---------------------------------------------------------------------------

def _oracle_hit(P, W, rho, exclude_zero):
    """Smallest positive tau with |P_p + tau W_p| = rho, or inf.

    When ``exclude_zero`` the point is on this circle and the root at 0 is
    replaced by the other root -2 (P . W) / |W|^2.
    """
    A = W[:, 0] ** 2 + W[:, 1] ** 2
    Bh = P[:, 0] * W[:, 0] + P[:, 1] * W[:, 1]
    C = P[:, 0] ** 2 + P[:, 1] ** 2 - rho * rho
    disc = Bh * Bh - A * C
    out = np.full(P.shape[0], np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.maximum(disc, 0.0))
        r1 = np.where(Bh < 0, C / (-Bh + sq), (-Bh - sq) / A)
        r2 = np.where(Bh < 0, (-Bh + sq) / A, C / (-Bh - sq))
        other = -2.0 * Bh / A
    real = (disc >= 0) & (A > 0)
    gen = np.where(r1 > 0, r1, np.where(r2 > 0, r2, np.inf))
    exc = np.where(other > 0, other, np.inf)
    out = np.where(real, np.where(exclude_zero, exc, gen), np.inf)
    return out


def flow_oracle_batch(domain: AnnulusDomain, s, t, x, v, max_bounces: int = MAX_ORACLE_BOUNCES):
    """Event-driven backward tracing; returns ``(X, V, bounces)``.

    Each step solves both ray-circle intersections from the current point,
    moves to the nearest one and reflects. A hit landing within the time
    tolerance of the remaining time is reflected, matching the s <= t_k side
    of the bounce-count convention.
    """
    x = _as_batch(x).copy()
    v = _as_batch(v).copy()
    n = x.shape[0]
    s = np.broadcast_to(np.asarray(s, dtype=float), (n,))
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
    rem = (t - s).astype(float).copy()
    eps = eps_time(domain, t)
    P = x.copy()
    W = -v.copy()  # backward direction
    rho = np.hypot(P[:, 0], P[:, 1])
    on_outer = np.abs(rho - domain.R) <= domain.eps_boundary
    on_inner = np.abs(rho - domain.r) <= domain.eps_boundary
    count = np.zeros(n, dtype=np.int64)
    radial = P[:, 0] * W[:, 0] + P[:, 1] * W[:, 1]
    # a boundary start whose backward ray leaves the domain hits at tau = 0
    imm = ((on_outer & (radial > 0)) | (on_inner & (radial < 0))) & (rem > eps)
    active = np.ones(n, dtype=bool)
    first = True
    while True:
        if first:
            h_out = _oracle_hit(P, W, domain.R, on_outer)
            h_in = _oracle_hit(P, W, domain.r, on_inner)
            h_out = np.where(imm & on_outer, 0.0, h_out)
            h_in = np.where(imm & on_inner, 0.0, h_in)
            first = False
        else:
            h_out = _oracle_hit(P, W, domain.R, on_outer)
            h_in = _oracle_hit(P, W, domain.r, on_inner)
        hit_inner = h_in < h_out
        h = np.minimum(h_in, h_out)
        bounce = active & (h <= rem + eps) & np.isfinite(h) & (np.abs(t - s) > eps)
        stream = active & ~bounce
        P[stream] += rem[stream, None] * W[stream]
        active &= ~stream
        if not np.any(bounce):
            break
        idx = np.nonzero(bounce)[0]
        P[idx] += h[idx, None] * W[idx]
        rem[idx] -= h[idx]
        rem[idx] = np.maximum(rem[idx], 0.0)
        nrm = np.zeros((idx.size, 3))
        rr = np.hypot(P[idx, 0], P[idx, 1])
        nrm[:, 0] = P[idx, 0] / rr
        nrm[:, 1] = P[idx, 1] / rr
        hi = hit_inner[idx]
        nrm[hi] *= -1.0
        W[idx] -= 2.0 * np.sum(nrm * W[idx], axis=1)[:, None] * nrm
        on_inner[idx] = hi
        on_outer[idx] = ~hi
        count[idx] += 1
        if count.max() > max_bounces:
            raise BounceOverflow(f"more than {max_bounces} bounces")
        # stop once the remaining time is exhausted by a boundary landing
        done = idx[rem[idx] <= 0.0]
        active[done] = False
    return P, -W, count


def flow_oracle(domain: AnnulusDomain, s: float, t: float, state: PhaseState,
                max_bounces: int = MAX_ORACLE_BOUNCES) -> FlowSample:
    """Independent event-driven evaluation of the backward flow."""
    if not 0 <= s <= t:
        raise ValueError(f"need 0 <= s <= t, got s={s}, t={t}")
    X, V, k = flow_oracle_batch(domain, s, t, state.x, state.v, max_bounces)
    return FlowSample(float(s), int(k[0]), X[0], V[0], math.nan)
