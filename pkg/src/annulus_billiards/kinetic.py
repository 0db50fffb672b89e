"""
Hard-sphere collision operators and the mild-solution iteration along the flow.

Densities live on a polar position grid (rho, theta) over the planar annulus
and a uniform Cartesian velocity box. Functions independent of x_3 stay
independent of x_3 under the flow, so x_3 is not gridded. Interpolation acts
on g = f / sqrt(mu), which keeps the equilibrium exactly representable.

A grid function may be rotation equivariant: f(Rot x, Rot v) = f(x, v) for
rotations about the cylinder axis. It is then stored as the single slice
theta = 0 and evaluated elsewhere by rotating v. The flow and both collision
operators commute with these rotations, so equivariance is preserved exactly.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

from .errors import ZeroZeta
from .geometry import AnnulusDomain, Case, classify_batch, weight_h_batch
from .trajectory import flow_batch

# degree-7 symmetric rule on S^2 (axes, edge midpoints, corners); weights sum to 4 pi
_SPHERE_WEIGHTS = (1.0 / 21.0, 4.0 / 105.0, 9.0 / 280.0)

# below this cos a an outer-wall state is treated as gliding along the wall
GLIDE_COS = 1e-7


# ---------------------------------------------------------------------------
# Maxwellian, weights and kernels
# ---------------------------------------------------------------------------

def maxwellian(v) -> np.ndarray:
    """mu(v) = exp(-|v|^2 / 2), row-wise for (n, 3) input."""
    v = np.asarray(v, dtype=float)
    return np.exp(-0.5 * np.sum(v * v, axis=-1))


def sqrt_maxwellian(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.exp(-0.25 * np.sum(v * v, axis=-1))


def weight_w(config: "KineticConfig", v) -> np.ndarray:
    """w(v) = exp(vartheta |v|^2)."""
    v = np.asarray(v, dtype=float)
    return np.exp(config.vartheta * np.sum(v * v, axis=-1))


def log_kernel_kc_batch(c: float, v, zeta) -> np.ndarray:
    """log k_c(v, v + zeta) row-wise."""
    v = np.asarray(v, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    z2 = np.sum(zeta * zeta, axis=-1)
    if np.any(z2 == 0.0):
        raise ZeroZeta("k_c is singular at zeta = 0")
    w = v + zeta
    diff = np.sum(v * v, axis=-1) - np.sum(w * w, axis=-1)
    return -0.5 * np.log(z2) - c * z2 - c * diff * diff / z2


def kernel_kc_batch(c: float, v, zeta) -> np.ndarray:
    """k_c(v, v + zeta) = exp(-c|zeta|^2 - c(|v|^2 - |v+zeta|^2)^2 / |zeta|^2) / |zeta|."""
    return np.exp(log_kernel_kc_batch(c, v, zeta))


def kernel_kc(c: float, v, v_plus_zeta) -> float:
    """Scalar k_c(v, v + zeta) given v and v + zeta.

    Raises
    ------
    ZeroZeta
        If the two velocities coincide.
    """
    v = np.asarray(v, dtype=float)
    zeta = np.asarray(v_plus_zeta, dtype=float) - v
    return float(kernel_kc_batch(c, v[None, :], zeta[None, :])[0])


def kernel_bold(c: float, v, v_bar, zeta) -> float:
    """Bold k_c(v, v_bar, zeta) = k_c(v, v + zeta) + k_c(v_bar, v_bar + zeta)."""
    v = np.asarray(v, dtype=float)
    v_bar = np.asarray(v_bar, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    return kernel_kc(c, v, v + zeta) + kernel_kc(c, v_bar, v_bar + zeta)


def sphere_rule():
    """26-point symmetric quadrature on the unit sphere.

    Returns ``(directions (26, 3), weights (26,))`` with weights summing to
    4 pi. Exact for polynomials of degree 7.
    """
    dirs, wts = [], []
    for i in range(3):
        for s in (1.0, -1.0):
            e = np.zeros(3)
            e[i] = s
            dirs.append(e)
            wts.append(_SPHERE_WEIGHTS[0])
    for i, j in ((0, 1), (0, 2), (1, 2)):
        for si in (1.0, -1.0):
            for sj in (1.0, -1.0):
                e = np.zeros(3)
                e[i], e[j] = si, sj
                dirs.append(e / math.sqrt(2.0))
                wts.append(_SPHERE_WEIGHTS[1])
    for s0 in (1.0, -1.0):
        for s1 in (1.0, -1.0):
            for s2 in (1.0, -1.0):
                dirs.append(np.array([s0, s1, s2]) / math.sqrt(3.0))
                wts.append(_SPHERE_WEIGHTS[2])
    return np.array(dirs), 4.0 * math.pi * np.array(wts)


def _half_sphere():
    # omega and -omega give the same post-collision pair
    d, w = sphere_rule()
    keep = []
    seen = set()
    for i, e in enumerate(d):
        key = tuple(np.round(-e, 12))
        if key in seen:
            continue
        seen.add(tuple(np.round(e, 12)))
        keep.append(i)
    keep = np.array(keep)
    return d[keep], 2.0 * w[keep]


# ---------------------------------------------------------------------------
# Configuration and grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KineticConfig:
    """Parameters of the kinetic layer.

    ``collisionless`` switches off nu and Gamma (pure transport);
    ``loss_rule`` picks the angular quadrature of nu inside the Picard step
    ("sphere" matches the gain term, "reduction" uses 2 pi |v - u|).
    """

    vartheta0: float = 0.2
    vartheta: float = 0.1
    varpi: float = 2.0
    c: float = 1.0
    beta: float = 0.2
    T: float = 0.05
    picard_iters: int = 2
    n_levels: int = 3
    n_sub: int = 32
    collisionless: bool = False
    loss_rule: str = "sphere"

    def __post_init__(self):
        if not 0 < self.vartheta < self.vartheta0 < 0.25:
            raise ValueError(f"need 0 < vartheta < vartheta0 < 1/4, got {self.vartheta}, {self.vartheta0}")
        if not 0 < self.beta < 0.25:
            raise ValueError(f"need 0 < beta < 1/4, got {self.beta}")
        if not (self.varpi > 0 and self.c > 0 and self.T > 0):
            raise ValueError("varpi, c and T must be positive")
        if self.varpi * self.T > 0.1 + 1e-12:
            raise ValueError(f"varpi * T = {self.varpi * self.T} exceeds 0.1")
        if self.picard_iters < 1 or self.n_levels < 2 or self.n_sub < 1:
            raise ValueError("picard_iters >= 1, n_levels >= 2 and n_sub >= 1 required")
        if self.loss_rule not in ("sphere", "reduction"):
            raise ValueError(f"unknown loss_rule {self.loss_rule!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class GridSpec:
    """Resolution of the phase grid: n_rho x n_theta positions, n_v^3 velocities on [-v_max, v_max]^3."""

    n_rho: int = 24
    n_theta: int = 48
    n_v: int = 9
    v_max: float = 4.5

    def __post_init__(self):
        if self.n_rho < 2 or self.n_theta < 1 or self.n_v < 2 or self.v_max <= 0:
            raise ValueError(f"invalid grid {self}")

    def axes(self, domain: AnnulusDomain):
        rho = np.linspace(domain.r, domain.R, self.n_rho)
        theta = 2.0 * np.pi * np.arange(self.n_theta) / self.n_theta
        vaxis = np.linspace(-self.v_max, self.v_max, self.n_v)
        return rho, theta, vaxis


def _rotate(v, ang):
    c, s = np.cos(ang), np.sin(ang)
    out = np.array(v, dtype=float, copy=True)
    out[..., 0] = c * v[..., 0] - s * v[..., 1]
    out[..., 1] = s * v[..., 0] + c * v[..., 1]
    return out


def _multilinear(axes, values, pts, clamp=None, periodic=None):
    """Multilinear interpolation on a tensor grid.

    ``clamp`` flags axes whose out-of-range points are moved to the edge;
    on the other axes they evaluate to 0. ``periodic`` flags axes with period
    equal to the spacing times the node count.
    """
    d = len(axes)
    clamp = clamp or [False] * d
    periodic = periodic or [False] * d
    n = pts.shape[0]
    lo_idx = np.empty((n, d), dtype=np.int64)
    frac = np.empty((n, d))
    inside = np.ones(n, dtype=bool)
    shape = values.shape[:d]
    for j, ax in enumerate(axes):
        p = pts[:, j]
        m = ax.size
        if m == 1:
            lo_idx[:, j] = 0
            frac[:, j] = 0.0
            continue
        h = ax[1] - ax[0]
        if periodic[j]:
            q = np.mod((p - ax[0]) / h, m)
            i0 = np.floor(q).astype(np.int64)
            lo_idx[:, j] = i0 % m
            frac[:, j] = q - i0
            continue
        q = (p - ax[0]) / h
        if clamp[j]:
            q = np.clip(q, 0.0, m - 1.0)
        else:
            tol = 1e-9
            inside &= (q >= -tol) & (q <= m - 1 + tol)
            q = np.clip(q, 0.0, m - 1.0)
        i0 = np.minimum(np.floor(q).astype(np.int64), m - 2)
        lo_idx[:, j] = i0
        frac[:, j] = q - i0
    tail = values.shape[d:]
    out = np.zeros((n,) + tail)
    for corner in range(1 << d):
        w = np.ones(n)
        idx = []
        for j in range(d):
            bit = (corner >> j) & 1
            m = shape[j]
            if m == 1:
                if bit:
                    w = w * 0.0
                idx.append(lo_idx[:, j])
                continue
            w = w * (frac[:, j] if bit else 1.0 - frac[:, j])
            i = lo_idx[:, j] + bit
            if periodic[j]:
                i = i % m
            idx.append(i)
        if not np.any(w):
            continue
        vals = values[tuple(idx)]
        out += vals * w.reshape((n,) + (1,) * len(tail))
    out[~inside] = 0.0
    return out


@dataclass
class PhaseGridFunction:
    """f sampled on rho x theta x v1 x v2 x v3, values in that (row-major) order.

    With ``equivariant`` the theta axis has length 1 and holds the slice
    theta = 0. Evaluation outside the velocity box returns 0; rho is clamped
    to [r, R].
    """

    rho: np.ndarray
    theta: np.ndarray
    vaxis: np.ndarray
    values: np.ndarray
    t: float = 0.0
    equivariant: bool = False
    _g: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        self.vaxis = np.asarray(self.vaxis, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        nv = self.vaxis.size
        want = (self.rho.size, self.theta.size, nv, nv, nv)
        if self.values.shape != want:
            raise ValueError(f"values shape {self.values.shape} != {want}")
        if self.equivariant and self.theta.size != 1:
            raise ValueError("an equivariant grid stores the single slice theta = 0")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")

    @property
    def g(self) -> np.ndarray:
        """Values divided by sqrt(mu) at the velocity nodes."""
        if self._g is None:
            self._g = self.values / sqrt_maxwellian(self.velocity_nodes()).reshape((1, 1) + (self.vaxis.size,) * 3)
        return self._g

    def velocity_nodes(self) -> np.ndarray:
        V1, V2, V3 = np.meshgrid(self.vaxis, self.vaxis, self.vaxis, indexing="ij")
        return np.column_stack([V1.ravel(), V2.ravel(), V3.ravel()])

    def position_nodes(self) -> np.ndarray:
        """Planar position nodes, rho-major, with x_3 = 0."""
        Rh, Th = np.meshgrid(self.rho, self.theta, indexing="ij")
        return np.column_stack([(Rh * np.cos(Th)).ravel(), (Rh * np.sin(Th)).ravel(), np.zeros(Rh.size)])

    def like(self, values, t=None) -> "PhaseGridFunction":
        return PhaseGridFunction(self.rho, self.theta, self.vaxis, values,
                                 self.t if t is None else t, self.equivariant)

    def __call__(self, x, v) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        v = np.atleast_2d(np.asarray(v, dtype=float))
        x, v = np.broadcast_arrays(x, v)
        g = _eval_nodal(self, self.g, x, v, clamp_v=False)
        return g * sqrt_maxwellian(v)

    def expand(self, theta=None) -> "PhaseGridFunction":
        """Full (rho, theta) grid from an equivariant slice, by interpolation in v."""
        if not self.equivariant:
            return self
        if theta is None:
            raise ValueError("theta grid required to expand an equivariant function")
        theta = np.asarray(theta, dtype=float)
        full = PhaseGridFunction(self.rho, theta, self.vaxis,
                                 np.zeros((self.rho.size, theta.size) + (self.vaxis.size,) * 3), self.t)
        x = full.position_nodes()
        vn = full.velocity_nodes()
        nx, nv = x.shape[0], vn.shape[0]
        vals = self(np.repeat(x, nv, axis=0), np.tile(vn, (nx, 1)))
        full.values = vals.reshape(full.values.shape)
        full._g = None
        return full


def _eval_nodal(fn: PhaseGridFunction, nodal, x, v, clamp_v, taxis=None, tq=None):
    """Interpolate a nodal array laid out like ``fn.values`` (optionally with a leading time axis)."""
    rho = np.clip(np.hypot(x[:, 0], x[:, 1]), fn.rho[0], fn.rho[-1])
    th = np.arctan2(x[:, 1], x[:, 0])
    cols, axes = [], []
    if taxis is not None:
        cols.append(np.clip(tq, taxis[0], taxis[-1]))
        axes.append(taxis)
    cols.append(rho)
    axes.append(fn.rho)
    if fn.equivariant:
        vv = _rotate(v, -th)
        data = nodal[..., 0, :, :, :] if taxis is None else nodal[:, :, 0]
    else:
        vv = v
        cols.append(np.mod(th, 2 * np.pi))
        axes.append(fn.theta)
        data = nodal
    cols += [vv[:, 0], vv[:, 1], vv[:, 2]]
    axes += [fn.vaxis] * 3
    d = len(axes)
    clamp = [True] * (d - 3) + [clamp_v] * 3
    periodic = [False] * d
    if not fn.equivariant:
        periodic[d - 4] = True
    return _multilinear(axes, data, np.column_stack(cols), clamp=clamp, periodic=periodic)


def project(domain: AnnulusDomain, grid: GridSpec, f: Callable, equivariant: bool = True,
            t: float = 0.0) -> PhaseGridFunction:
    """Sample a callable f(x, v) on the grid nodes."""
    rho, theta, vaxis = grid.axes(domain)
    if equivariant:
        theta = np.zeros(1)
    shell = PhaseGridFunction(rho, theta, vaxis, np.zeros((rho.size, theta.size) + (vaxis.size,) * 3), t,
                              equivariant)
    x = shell.position_nodes()
    vn = shell.velocity_nodes()
    nx, nv = x.shape[0], vn.shape[0]
    vals = np.asarray(f(np.repeat(x, nv, axis=0), np.tile(vn, (nx, 1))), dtype=float)
    return shell.like(vals.reshape(shell.values.shape), t)


# ---------------------------------------------------------------------------
# Initial data
# ---------------------------------------------------------------------------

def equilibrium_initial() -> Callable:
    """f0 = sqrt(mu)."""
    return lambda x, v: sqrt_maxwellian(v)


def bump_initial(domain: AnnulusDomain, eta: float = 0.5, amp: float = 0.5) -> Callable:
    """Smooth specular-compatible bump.

    f0 = phi(|x_p|) sqrt(mu(v)) (1 + eta q), with
    phi(rho) = 1 + amp exp(-((rho - rho_c) / width)^2), rho_c = (r + R) / 2,
    width = (R - r) / 3, and
    q = ((x_hat . v_p)^2 - (x_hat_perp . v_p)^2) / (1 + |v_p|^2).
    q is unchanged by the wall reflection and smooth at v_p = 0. phi has a
    nonzero radial slope at both walls, which is where grazing
    characteristics separate.
    """
    if not 0 <= eta < 1:
        raise ValueError("need 0 <= eta < 1 so that f0 stays positive")

    def f0(x, v):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        v = np.atleast_2d(np.asarray(v, dtype=float))
        rho = np.hypot(x[:, 0], x[:, 1])
        xh = x[:, :2] / rho[:, None]
        a = xh[:, 0] * v[:, 0] + xh[:, 1] * v[:, 1]
        b = -xh[:, 1] * v[:, 0] + xh[:, 0] * v[:, 1]
        q = (a * a - b * b) / (1.0 + a * a + b * b)
        rc, width = 0.5 * (domain.r + domain.R), (domain.R - domain.r) / 3.0
        phi = 1.0 + amp * np.exp(-(((rho - rc) / width) ** 2))
        return phi * sqrt_maxwellian(v) * (1.0 + eta * q)

    return f0


# ---------------------------------------------------------------------------
# Characteristics with the wall-gliding limit
# ---------------------------------------------------------------------------

def characteristics(domain: AnnulusDomain, s, t, x, v):
    """(X(s; t, x, v), V(s; t, x, v)) for a batch.

    Outer-tangent states with cos a below ``GLIDE_COS`` follow the limit of
    the bouncing polygon, uniform motion along the circle |x_p| = const.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    X, V, _, _ = flow_batch(domain, s, t, x, v)
    c = classify_batch(domain, x, v)
    glide = ((c["case"] == Case.C3) | (c["case"] == Case.GRAZING)) & (c["cos_a"] < GLIDE_COS)
    glide &= np.hypot(x[:, 0], x[:, 1]) > domain.R - 1e3 * domain.eps_boundary
    if np.any(glide):
        i = np.nonzero(glide)[0]
        tau = np.broadcast_to(np.asarray(t, dtype=float) - np.asarray(s, dtype=float), (x.shape[0],))[i]
        rho2 = x[i, 0] ** 2 + x[i, 1] ** 2
        omega = (x[i, 0] * v[i, 1] - x[i, 1] * v[i, 0]) / rho2
        ang = -omega * tau
        X[i] = _rotate(x[i], ang)
        X[i, 2] = x[i, 2] - tau * v[i, 2]
        V[i] = _rotate(v[i], ang)
    return X, V


def pullback(domain: AnnulusDomain, f0: Callable, t: float) -> Callable:
    """Collisionless solution f(t, x, v) = f0(X(0; t, x, v), V(0; t, x, v))."""

    def f(x, v):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        v = np.atleast_2d(np.asarray(v, dtype=float))
        X, V = characteristics(domain, 0.0, t, x, v)
        return f0(X, V)

    return f


# ---------------------------------------------------------------------------
# Collision frequency and gain term
# ---------------------------------------------------------------------------

def _g_at(f, x, u):
    """g = f / sqrt(mu) at position x (one row) and velocities u."""
    xx = np.broadcast_to(np.asarray(x, dtype=float).reshape(1, 3), u.shape)
    if isinstance(f, PhaseGridFunction):
        return _eval_nodal(f, f.g, xx, u, clamp_v=False)
    return np.asarray(f(xx, u), dtype=float) / sqrt_maxwellian(u)


def _quad_nodes(f, quadrature):
    """Velocity nodes and cell volume used for the u-integral."""
    if quadrature is None:
        if isinstance(f, PhaseGridFunction):
            axis = f.vaxis
        else:
            axis = np.linspace(-4.5, 4.5, 9)
    else:
        axis = np.linspace(-quadrature[1], quadrature[1], quadrature[0])
    h = axis[1] - axis[0]
    U1, U2, U3 = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.column_stack([U1.ravel(), U2.ravel(), U3.ravel()]), h ** 3


def nu_of_f(config: KineticConfig, f, t: float, x, v, quadrature=None, rule: str = "reduction") -> float:
    """nu(f)(t, x, v) = int int |(v - u) . omega| sqrt(mu(u)) f(t, x, u) d omega du.

    ``f`` is a PhaseGridFunction (taken at time t) or a callable f(x, u).
    The u-integral is the midpoint sum over the velocity nodes, or over an
    ``(n, v_max)`` box given as ``quadrature``. ``rule`` "reduction" uses
    int_{S^2} |w . omega| d omega = 2 pi |w|; "sphere" uses the 26-point rule.
    """
    u, dU = _quad_nodes(f, quadrature)
    v = np.asarray(v, dtype=float)
    g = _g_at(f, x, u)
    if rule == "reduction":
        K = 2.0 * math.pi * np.linalg.norm(v[None, :] - u, axis=1)
    else:
        dirs, wts = sphere_rule()
        K = np.abs((v[None, :] - u) @ dirs.T) @ wts
    return float(dU * np.sum(K * maxwellian(u) * g))


def gamma_gain(config: KineticConfig, f1, f2, t: float, x, v, quadrature=None) -> float:
    """Gamma_gain(f1, f2)(t, x, v) by direct quadrature over u nodes x sphere rule.

    Uses mu(u') mu(v') = mu(u) mu(v), so the summand is
    |(v - u) . omega| mu(u) g1(u') g2(v') sqrt(mu(v)) with g = f / sqrt(mu).
    """
    u, dU = _quad_nodes(f1, quadrature)
    v = np.asarray(v, dtype=float)
    dirs, wts = sphere_rule()
    rel = v[None, :] - u
    proj = rel @ dirs.T
    up = (u[:, None, :] + proj[:, :, None] * dirs[None, :, :]).reshape(-1, 3)
    vp = (v[None, None, :] - proj[:, :, None] * dirs[None, :, :]).reshape(-1, 3)
    g1 = _g_at(f1, x, up).reshape(proj.shape)
    g2 = _g_at(f2, x, vp).reshape(proj.shape)
    s = np.sum(np.abs(proj) * wts[None, :] * g1 * g2, axis=1)
    return float(dU * sqrt_maxwellian(v) * np.sum(maxwellian(u) * s))


def _stencil(vaxis, pts):
    """Sparse trilinear interpolation matrix from velocity nodes to ``pts``; zero rows outside the box."""
    nv = vaxis.size
    h = vaxis[1] - vaxis[0]
    q = (pts - vaxis[0]) / h
    inside = np.all((q >= -1e-9) & (q <= nv - 1 + 1e-9), axis=1)
    q = np.clip(q, 0.0, nv - 1.0)
    i0 = np.minimum(np.floor(q).astype(np.int64), nv - 2)
    fr = q - i0
    n = pts.shape[0]
    rows = np.repeat(np.arange(n), 8)
    cols = np.empty((n, 8), dtype=np.int64)
    wts = np.empty((n, 8))
    for corner in range(8):
        b = [(corner >> j) & 1 for j in range(3)]
        idx = (i0[:, 0] + b[0]) * nv * nv + (i0[:, 1] + b[1]) * nv + (i0[:, 2] + b[2])
        w = np.ones(n)
        for j in range(3):
            w *= fr[:, j] if b[j] else 1.0 - fr[:, j]
        cols[:, corner] = idx
        wts[:, corner] = w * inside
    return sparse.csr_matrix((wts.ravel(), (rows, cols.ravel())), shape=(n, nv ** 3))


def collision_grids(fns: Sequence[PhaseGridFunction], loss_rule: str = "sphere", chunk_entries: int = 20_000_000):
    """nu(f) and Gamma_gain(f, f) / sqrt(mu) at every node of each grid function.

    Returns ``(nu, gamma)`` with shape ``(len(fns),) + values.shape``.
    """
    ref = fns[0]
    vn = ref.velocity_nodes()
    nvv = vn.shape[0]
    G = np.stack([fn.g.reshape(-1, nvv) for fn in fns], axis=0)
    J, nP = G.shape[0], G.shape[1]
    Gc = G.reshape(J * nP, nvv).T  # (nvv, columns)
    h = ref.vaxis[1] - ref.vaxis[0]
    dU = h ** 3
    mu_u = maxwellian(vn)
    dirs_full, w_full = sphere_rule()
    if loss_rule == "reduction":
        K = 2.0 * math.pi * np.linalg.norm(vn[:, None, :] - vn[None, :, :], axis=2)
    else:
        K = np.abs(np.einsum("vud,kd->vuk", vn[:, None, :] - vn[None, :, :], dirs_full)) @ w_full
    nu = ((K * (dU * mu_u)[None, :]) @ Gc).T.reshape((J,) + ref.values.shape)

    dirs, wts = _half_sphere()
    nd = dirs.shape[0]
    gamma = np.zeros((nvv, J * nP))
    per_v = nvv * nd
    cv = max(1, chunk_entries // (per_v * Gc.shape[1]))
    for a in range(0, nvv, cv):
        vb = vn[a:a + cv]
        rel = vb[:, None, :] - vn[None, :, :]
        proj = rel @ dirs.T  # (cv, nu, nd)
        up = vn[None, :, None, :] + proj[..., None] * dirs[None, None, :, :]
        vp = vb[:, None, None, :] - proj[..., None] * dirs[None, None, :, :]
        coef = (dU * np.abs(proj) * wts[None, None, :] * mu_u[None, :, None]).reshape(-1)
        Pu = _stencil(ref.vaxis, up.reshape(-1, 3))
        Pv = _stencil(ref.vaxis, vp.reshape(-1, 3))
        prod = (Pu @ Gc) * (Pv @ Gc) * coef[:, None]
        gamma[a:a + vb.shape[0]] = prod.reshape(vb.shape[0], -1, Gc.shape[1]).sum(axis=1)
    gamma = gamma.T.reshape((J,) + ref.values.shape)
    return nu, gamma


# ---------------------------------------------------------------------------
# Mild solution
# ---------------------------------------------------------------------------

def _node_states(fn: PhaseGridFunction):
    x = fn.position_nodes()
    vn = fn.velocity_nodes()
    return np.repeat(x, vn.shape[0], axis=0), np.tile(vn, (x.shape[0], 1))


def _eval_f0(f0, x, v):
    if isinstance(f0, PhaseGridFunction):
        return f0(x, v)
    return np.asarray(f0(x, v), dtype=float)


def _segment_times(domain, t, x, v, n_sub):
    """Sample times in [0, t], descending, split at bounce times; shape (n, n_seg * (n_sub + 1))."""
    c = classify_batch(domain, x, v)
    tb, ts = c["t_b"], c["t_star"]
    moving = (c["case"] != Case.VERTICAL) & np.isfinite(tb) & np.isfinite(ts) & (ts > 0)
    glide = ((c["case"] == Case.C3) | (c["case"] == Case.GRAZING)) & (c["cos_a"] < GLIDE_COS)
    moving &= ~glide
    nb = np.zeros(x.shape[0], dtype=np.int64)
    with np.errstate(invalid="ignore", divide="ignore"):
        cnt = np.where(moving & (tb < t), np.floor((t - tb) / np.where(ts > 0, ts, 1.0)) + 1, 0)
    nb[:] = np.minimum(cnt, 10_000).astype(np.int64)
    n_seg = int(nb.max()) + 1
    k = np.arange(n_seg + 1)
    # boundaries b_0 = t > b_1 = t - t_b > ... clipped to [0, t]
    with np.errstate(invalid="ignore"):
        bnd = np.where(k[None, :] == 0, t, t - tb[:, None] - (k[None, :] - 1) * ts[:, None])
    bnd = np.where(k[None, :] <= nb[:, None], bnd, 0.0)
    bnd = np.clip(np.where(np.isfinite(bnd), bnd, 0.0), 0.0, t)
    bnd[:, -1] = 0.0
    frac = np.linspace(0.0, 1.0, n_sub + 1)
    hi, lo = bnd[:, :-1], bnd[:, 1:]
    taus = hi[:, :, None] + (lo - hi)[:, :, None] * frac[None, None, :]
    return taus.reshape(x.shape[0], -1)


def mild_picard_step(domain: AnnulusDomain, config: KineticConfig, f_prev: Sequence[PhaseGridFunction],
                     f0, t: float, collision=None) -> PhaseGridFunction:
    """One Picard update of the mild form at time t on the nodes of ``f_prev``.

    ``f_prev`` holds the previous iterate at increasing times covering
    [0, t]; it is interpolated linearly in time. ``f0`` is a grid function or
    a callable. ``collision`` may pass precomputed ``collision_grids`` output.
    """
    ref = f_prev[0]
    x, v = _node_states(ref)
    if t == 0 or config.collisionless:
        X0, V0 = characteristics(domain, 0.0, t, x, v) if t > 0 else (x, v)
        return ref.like(_eval_f0(f0, X0, V0).reshape(ref.values.shape), t)
    times = np.array([fn.t for fn in f_prev])
    if times[0] > 0 or times[-1] < t - 1e-14:
        raise ValueError("f_prev must cover [0, t]")
    nu, gam = collision if collision is not None else collision_grids(f_prev, config.loss_rule)
    taus = _segment_times(domain, t, x, v, config.n_sub)
    n, q = taus.shape
    xr = np.repeat(x, q, axis=0)
    vr = np.repeat(v, q, axis=0)
    X, V = characteristics(domain, taus.ravel(), t, xr, vr)
    tq = taus.ravel()
    nu_s = _eval_nodal(ref, nu, X, V, clamp_v=True, taxis=times, tq=tq).reshape(n, q)
    ga_s = _eval_nodal(ref, gam, X, V, clamp_v=True, taxis=times, tq=tq).reshape(n, q)
    dtau = taus[:, :-1] - taus[:, 1:]
    A = np.concatenate([np.zeros((n, 1)), np.cumsum(0.5 * dtau * (nu_s[:, :-1] + nu_s[:, 1:]), axis=1)], axis=1)
    damp = np.exp(-A)
    integrand = damp * ga_s
    gain = np.sum(0.5 * dtau * (integrand[:, :-1] + integrand[:, 1:]), axis=1) * sqrt_maxwellian(v)
    X0, V0 = X.reshape(n, q, 3)[:, -1], V.reshape(n, q, 3)[:, -1]
    vals = damp[:, -1] * _eval_f0(f0, X0, V0) + gain
    return ref.like(vals.reshape(ref.values.shape), t)


def picard_solve(domain: AnnulusDomain, config: KineticConfig, f0, grid: GridSpec, equivariant: bool = True):
    """Run ``config.picard_iters`` Picard sweeps on ``n_levels`` uniform times in [0, T].

    Returns the list of grid functions of the last iterate, one per time level.
    The zeroth iterate is f0 at every level.
    """
    times = np.linspace(0.0, config.T, config.n_levels)
    base = f0 if isinstance(f0, PhaseGridFunction) else project(domain, grid, f0, equivariant)
    cur = [base.like(base.values, float(tj)) for tj in times]
    for _ in range(config.picard_iters):
        coll = None if config.collisionless else collision_grids(cur, config.loss_rule)
        cur = [mild_picard_step(domain, config, cur, f0, float(tj), collision=coll) for tj in times]
    return cur


def equilibrium_drift(fn: PhaseGridFunction) -> float:
    """sup |f - sqrt(mu)| / sup sqrt(mu) over the grid nodes."""
    ref = sqrt_maxwellian(fn.velocity_nodes()).reshape((1, 1) + (fn.vaxis.size,) * 3)
    return float(np.max(np.abs(fn.values - ref)) / np.max(ref))


def specular_defect(fn: PhaseGridFunction) -> float:
    """max |f(x, v) - f(x, R_x v)| over the wall nodes at theta = 0, relative to sup |f|.

    At theta = 0 the normal is e_1, so R_x flips v_1 and maps the grid to itself.
    """
    it = 0
    wall = fn.values[[0, -1], it]
    flipped = wall[:, ::-1, :, :]
    scale = max(float(np.max(np.abs(fn.values))), 1e-300)
    return float(np.max(np.abs(wall - flipped)) / scale)


# ---------------------------------------------------------------------------
# Seminorms and the weighted functional
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleSpec:
    """Pair sampler for the seminorm suprema.

    Separations are log-uniform in ``sep_range``. A fraction ``grazing`` of
    the space pairs sits within eps of outer tangency (eps log-uniform in
    ``eps_range``) and is placed so that the backward path reaches the
    tangency before time 0.
    """

    n_pairs: int = 256
    sep_range: tuple = (1e-6, 1.0)
    n_zeta: int = 128
    grazing: float = 0.5
    eps_range: tuple = (1e-8, 1e-3)
    speed_range: tuple = (0.2, 3.0)
    seed: int = 0


@dataclass
class PairSample:
    x: np.ndarray
    x_bar: np.ndarray
    v: np.ndarray
    v_bar: np.ndarray
    sep_x: np.ndarray
    sep_v: np.ndarray
    grazing: np.ndarray


def sample_pairs(domain: AnnulusDomain, spec: SampleSpec, t: float = 0.0) -> PairSample:
    """Draw (x, x_bar, v) and (x, v, v_bar) pairs; the same x, v are shared."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_pairs
    lo, hi = spec.speed_range
    sp = np.exp(rng.uniform(np.log(lo), np.log(hi), n))
    phi = rng.random(n) * 2 * np.pi
    v = np.column_stack([sp * np.cos(phi), sp * np.sin(phi), rng.uniform(-1, 1, n)])
    rho = np.sqrt(domain.r ** 2 + rng.random(n) * (domain.R ** 2 - domain.r ** 2))
    th = rng.random(n) * 2 * np.pi
    x = np.column_stack([rho * np.cos(th), rho * np.sin(th), np.zeros(n)])
    graz = rng.random(n) < spec.grazing
    if np.any(graz):
        i = np.nonzero(graz)[0]
        eps = np.exp(rng.uniform(*np.log(spec.eps_range), i.size))
        y = (domain.R - eps) * np.where(rng.random(i.size) < 0.5, 1.0, -1.0)
        L = sp[i]
        uh = v[i, :2] / L[:, None]
        # backward hit of the outer circle after time tau = (p + p_R) / L
        pR = np.sqrt(domain.R ** 2 - y * y)
        tau = rng.random(i.size) * max(t, 0.0)
        p = np.clip(L * tau - pR, -pR, pR)
        x[i, 0] = p * uh[:, 0] - y * uh[:, 1]
        x[i, 1] = p * uh[:, 1] + y * uh[:, 0]
    sx = np.exp(rng.uniform(*np.log(spec.sep_range), n))
    sv = np.exp(rng.uniform(*np.log(spec.sep_range), n))
    x_bar = np.empty_like(x)
    todo = np.arange(n)
    for _ in range(200):
        d = rng.normal(size=(todo.size, 3))
        d[:, 2] = 0.0
        d /= np.linalg.norm(d, axis=1)[:, None]
        cand = x[todo] + sx[todo, None] * d
        r_c = np.hypot(cand[:, 0], cand[:, 1])
        ok = (r_c > domain.r) & (r_c < domain.R)
        x_bar[todo[ok]] = cand[ok]
        todo = todo[~ok]
        if todo.size == 0:
            break
    if todo.size:
        raise RuntimeError("could not place x_bar inside the annulus")
    dv = rng.normal(size=(n, 3))
    dv /= np.linalg.norm(dv, axis=1)[:, None]
    v_bar = v + sv[:, None] * dv
    return PairSample(x, x_bar, v, v_bar, sx, sv, graz)


def _as_callable(f):
    if isinstance(f, PhaseGridFunction):
        return f
    return lambda x, v: np.asarray(f(x, v), dtype=float)


def _bracket(v):
    return np.sqrt(1.0 + np.sum(np.asarray(v) ** 2, axis=-1))


@dataclass
class HolderSeminorms:
    """Sampled seminorms at one time with the ingredients of the X, V functionals.

    Iterates as ``(H_sp, H_vel)``.
    """

    H_sp: float
    H_vel: float
    argmax_sp: int
    argmax_vel: int
    Q_sp: float
    Q_vel: float
    wf_norm: float
    s: float
    config: KineticConfig

    def __iter__(self):
        return iter((self.H_sp, self.H_vel))

    def calX(self, v, zeta) -> float:
        w = np.asarray(v, dtype=float) + np.asarray(zeta, dtype=float)
        b = float(_bracket(w))
        return (math.exp(self.config.varpi * b * b * self.s) / b * self.Q_sp
                + self.wf_norm / float(weight_w(self.config, w)))

    def calV(self, v, zeta) -> float:
        w = np.asarray(v, dtype=float) + np.asarray(zeta, dtype=float)
        b = float(_bracket(w))
        return (math.exp(self.config.varpi * b * b * self.s) / b ** 2 * self.Q_vel
                + self.wf_norm / float(weight_w(self.config, w)))


def holder_seminorms(domain: AnnulusDomain, config: KineticConfig, f, s: float, sample_spec: SampleSpec,
                     pairs: PairSample | None = None) -> HolderSeminorms:
    """Sampled H_sp and H_vel at time s.

    The zeta-integral uses the proposal |zeta| ~ 2 c rho exp(-c rho^2) with
    uniform direction, under which k_c(v, v + zeta) / density equals
    (2 pi / c) exp(-c (|v|^2 - |v + zeta|^2)^2 / |zeta|^2). The same zeta
    draws are used for every pair. ``Q_sp``, ``Q_vel`` are the sampled
    suprema inside X and V (exponent 2 beta), ``wf_norm`` is sup |w f| over
    the sampled states.
    """
    fc = _as_callable(f)
    pr = pairs if pairs is not None else sample_pairs(domain, sample_spec, s)
    rng = np.random.default_rng(sample_spec.seed + 1)
    nz = sample_spec.n_zeta
    rr = np.sqrt(-np.log1p(-rng.random(nz)) / config.c)
    om = rng.normal(size=(nz, 3))
    om /= np.linalg.norm(om, axis=1)[:, None]
    zeta = rr[:, None] * om
    n = pr.x.shape[0]
    k2b = 2.0 * config.beta
    pref = 2.0 * math.pi / config.c

    def kfac(v):
        w = v[:, None, :] + zeta[None, :, :]
        diff = np.sum(v * v, axis=1)[:, None] - np.sum(w * w, axis=2)
        return np.exp(-config.c * diff * diff / (rr * rr)[None, :])

    def ev(x, v):
        return fc(np.repeat(x, nz, axis=0), (v[:, None, :] + zeta[None, :, :]).reshape(-1, 3)).reshape(n, nz)

    damp = np.exp(-config.varpi * _bracket(pr.v) ** 2 * s)
    dsp = np.abs(ev(pr.x, pr.v) - ev(pr.x_bar, pr.v))
    hs = damp * pref * np.mean(kfac(pr.v) * dsp, axis=1) / pr.sep_x ** k2b
    dvl = np.abs(ev(pr.x, pr.v) - ev(pr.x, pr.v_bar))
    hv = damp * pref * np.mean((kfac(pr.v) + kfac(pr.v_bar)) * dvl, axis=1) / pr.sep_v ** k2b

    fx, fxb, fvb = fc(pr.x, pr.v), fc(pr.x_bar, pr.v), fc(pr.x, pr.v_bar)
    b = _bracket(pr.v)
    qs = damp * b * np.abs(fx - fxb) / pr.sep_x ** k2b
    qv = damp * b * b * np.abs(fx - fvb) / pr.sep_v ** k2b
    wf = float(np.max(np.abs(weight_w(config, pr.v) * fx)))
    return HolderSeminorms(float(hs.max()), float(hv.max()), int(hs.argmax()), int(hv.argmax()),
                           float(qs.max()), float(qv.max()), wf, s, config)


@dataclass
class TheoremQuotients:
    """Per-pair weighted quotients of the Hoelder functional and the unweighted space quotient."""

    space: np.ndarray
    velocity: np.ndarray
    space_unweighted: np.ndarray
    grazing: np.ndarray


def theorem_quotients(domain: AnnulusDomain, config: KineticConfig, f, t: float, sample_spec: SampleSpec,
                      pairs: PairSample | None = None) -> TheoremQuotients:
    """Weighted space and velocity quotients at time t, one entry per pair.

    Space: max{h^{2b}(x_p, v_p), h^{2b}(x_bar_p, v_p)} <v_p>^{-4b} e^{-varpi <v>^2 t} |df| / |x - x_bar|^b.
    Velocity: min{h^b(x_p, v_p), h^b(x_p, v_bar_p)} |v|_p^{2b} <v_p>^{-2b} e^{-varpi <v>^2 t} |df| / |v - v_bar|^b.
    The unweighted quotient is |df| / |x - x_bar|^{2b}.
    """
    fc = _as_callable(f)
    pr = pairs if pairs is not None else sample_pairs(domain, sample_spec, t)
    b = config.beta
    damp = np.exp(-config.varpi * _bracket(pr.v) ** 2 * t)
    vp = pr.v.copy()
    vp[:, 2] = 0.0
    bp = _bracket(vp)
    hx = weight_h_batch(domain, pr.x, pr.v)
    hxb = weight_h_batch(domain, pr.x_bar, pr.v)
    hvb = weight_h_batch(domain, pr.x, pr.v_bar)
    fx = fc(pr.x, pr.v)
    dsp = np.abs(fx - fc(pr.x_bar, pr.v))
    dvl = np.abs(fx - fc(pr.x, pr.v_bar))
    space = np.maximum(hx, hxb) ** (2 * b) * bp ** (-4 * b) * damp * dsp / pr.sep_x ** b
    speed_p = np.hypot(pr.v[:, 0], pr.v[:, 1])
    vel = np.minimum(hx, hvb) ** b * speed_p ** (2 * b) * bp ** (-2 * b) * damp * dvl / pr.sep_v ** b
    unw = dsp / pr.sep_x ** (2 * b)
    return TheoremQuotients(space, vel, unw, pr.grazing)


def theorem_functional(domain: AnnulusDomain, config: KineticConfig, f, t: float, sample_spec: SampleSpec,
                       pairs: PairSample | None = None):
    """Sampled suprema ``(space_term, velocity_term)`` of the weighted Hoelder functional at time t."""
    q = theorem_quotients(domain, config, f, t, sample_spec, pairs)
    return float(q.space.max()), float(q.velocity.max())


# ---------------------------------------------------------------------------
# Snapshot I/O
# ---------------------------------------------------------------------------

_MAGIC = b"ANNULUS-GRID 1\n"


def save_snapshot(path, fn: PhaseGridFunction, meta: dict | None = None) -> None:
    """Write a grid function.

    Layout: the magic line, one JSON header line (sizes, t, equivariant,
    meta), then little-endian float64 arrays rho, theta, vaxis and values
    (row-major, axes rho, theta, v1, v2, v3).
    """
    header = {
        "n_rho": int(fn.rho.size), "n_theta": int(fn.theta.size), "n_v": int(fn.vaxis.size),
        "t": float(fn.t), "equivariant": bool(fn.equivariant), "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for arr in (fn.rho, fn.theta, fn.vaxis, fn.values):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_snapshot(path):
    """Read a file written by ``save_snapshot``; returns ``(fn, meta)``."""
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise ValueError(f"{path} is not a grid snapshot")
        header = json.loads(fh.readline().decode("utf-8"))
        nr, nt, nv = header["n_rho"], header["n_theta"], header["n_v"]
        data = np.frombuffer(fh.read(), dtype="<f8")
    sizes = [nr, nt, nv, nr * nt * nv ** 3]
    if data.size != sum(sizes):
        raise ValueError("truncated snapshot")
    parts = np.split(data, np.cumsum(sizes)[:-1])
    fn = PhaseGridFunction(parts[0], parts[1], parts[2], parts[3].reshape(nr, nt, nv, nv, nv),
                           header["t"], header["equivariant"])
    return fn, header["meta"]
