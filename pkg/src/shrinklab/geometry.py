"""Closed self-shrinker bases, normal graphs, and tubular-coordinate geometry.

Conventions used throughout: n is the outward unit normal, H = div(n) (so H
is n/R on the round n-sphere of radius R) and the fixed-point equation of the
rescaled flow is H = <x,n>/2.  Two kinds of base are supported:

* ``planar_curve`` -- a closed curve in R^2 (round circle, Abresch-Langer
  style immersed curves), discretized on a uniform arclength grid with
  trigonometric differentiation.

* ``rot_surface`` -- a rotationally symmetric surface in R^3 given by a
  closed profile curve in the (r, z) plane.  The torus profile stays in
  r > 0; the round sphere is carried as a doubly covered great circle with
  signed r so that it, too, lives on a uniform periodic grid.  Scalar fields
  on a rot_surface are stored as angular Fourier stacks up to mode M.

Profile curves are parametrized clockwise so that rotating the unit tangent
by +90 degrees gives the outward normal.
"""

import dataclasses
import hashlib
import math

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

try:
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None

from .errors import (
    GeometryError,
    InadmissibleGraphError,
    ReexpressionError,
    ShootingError,
)
from .spectral import TrigInterp1D, TrigInterp2D, deriv_values, diff_matrix

GEOM_MAGIC = "shrinklab-geom v1"


def rotation_2d(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def rotation_3d(axis, angle):
    """Rotation matrix about a (not necessarily unit) axis vector."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


class BaseShrinker:
    """Discretized closed shrinker with its tubular-coordinate geometry.

    Immutable after construction; all fields are plain numpy arrays so a
    record can be shared freely between threads.
    """

    def __init__(self, kind, family, profile, period, *, doubled=False,
                 modes=None, line_weight=None, exact_area=None,
                 exact_tangent=None, exact_kappa=None):
        if kind not in ("planar_curve", "rot_surface"):
            raise GeometryError(f"unknown base kind {kind!r}")
        self.kind = kind
        self.family = family
        self.dim = 1 if kind == "planar_curve" else 2
        profile = np.ascontiguousarray(profile, dtype=float)
        if profile.ndim != 2 or profile.shape[1] != 2:
            raise GeometryError("profile must be an (N, 2) array")
        self.N = profile.shape[0]
        self.profile = profile
        self.period = float(period)
        self.h = self.period / self.N
        self.s = self.h * np.arange(self.N)
        self.doubled = bool(doubled)

        self.D1 = diff_matrix(self.N, self.period, order=1)
        self.D2 = diff_matrix(self.N, self.period, order=2)

        tangent = self.D1 @ profile
        speed = np.linalg.norm(tangent, axis=1)
        if abs(speed - 1.0).max() > 1e-6:
            raise GeometryError("profile nodes are not uniform in arclength")
        tangent /= speed[:, None]
        if exact_tangent is not None:
            # closed-form sampling for analytic bases; spectral route kept
            # as a consistency check (it carries ~N*eps differentiation noise)
            if np.abs(exact_tangent - tangent).max() > 1e-9:
                raise GeometryError("exact tangent disagrees with spectral one")
            tangent = np.ascontiguousarray(exact_tangent, dtype=float)
        self.tangent = tangent
        # +90 degree rotation of the tangent; outward for clockwise profiles
        self.normal2d = np.column_stack([-tangent[:, 1], tangent[:, 0]])

        kap_profile = np.einsum("ij,ij->i", self.D1 @ self.normal2d, tangent)
        if exact_kappa is not None:
            if np.abs(exact_kappa - kap_profile).max() > 1e-9:
                raise GeometryError("exact curvature disagrees with spectral one")
            kap_profile = np.asarray(exact_kappa, dtype=float)
        r = profile[:, 0]
        z = profile[:, 1]
        if kind == "planar_curve":
            self.kappas = kap_profile[:, None]
            self.pos_tangent = np.einsum("ij,ij->i", profile, tangent)[:, None]
            if line_weight is None:
                line_weight = np.full(self.N, self.h)
            self.area_weight = line_weight
            self.M = None
            self.n_theta = None
        else:
            if self.doubled:
                if np.abs(r).min() < 1e-12:
                    raise GeometryError("profile node on the rotation axis")
            elif r.min() <= 0.0:
                raise GeometryError("rot_surface profile requires r > 0")
            kap_parallel = -tangent[:, 1] / r
            self.kappas = np.column_stack([kap_profile, kap_parallel])
            self.pos_tangent = np.column_stack(
                [np.einsum("ij,ij->i", profile, tangent), np.zeros(self.N)])
            if modes is None:
                raise GeometryError("rot_surface needs an angular mode count")
            self.M = int(modes)
            self.n_theta = 2 * (self.M + 1)
            self.theta = 2.0 * np.pi * np.arange(self.n_theta) / self.n_theta
            if line_weight is None:
                line_weight = self.h * r  # exact for single-cover profiles
            fold = 0.5 if self.doubled else 1.0
            self.area_weight = 2.0 * np.pi * fold * line_weight
            self.drds_over_r = tangent[:, 0] / r

        if self.area_weight.min() <= 0.0:
            raise GeometryError("non-positive quadrature weight")

        self.H = self.kappas.sum(axis=1)
        self.A2 = (self.kappas ** 2).sum(axis=1)
        self.pos_normal = np.einsum("ij,ij->i", profile, self.normal2d)
        self.gauss_weight = np.exp(-(r ** 2 + z ** 2) / 4.0)
        self.residual = float(np.abs(self.H - 0.5 * self.pos_normal).max())
        self.reach = 0.9 / np.abs(self.kappas).max()
        self.delta0 = 0.5 * self.reach

        if exact_area is not None:
            total = self.area_weight.sum()
            if abs(total - exact_area) > 1e-10 * abs(exact_area):
                raise GeometryError(
                    f"quadrature weights sum to {total!r}, expected {exact_area!r}")

        if kind == "rot_surface":
            ct, st = np.cos(self.theta), np.sin(self.theta)
            self.x3d = np.empty((self.n_theta, self.N, 3))
            self.x3d[..., 0] = ct[:, None] * r[None, :]
            self.x3d[..., 1] = st[:, None] * r[None, :]
            self.x3d[..., 2] = z[None, :]
            nr, nz = self.normal2d[:, 0], self.normal2d[:, 1]
            self.n3d = np.empty_like(self.x3d)
            self.n3d[..., 0] = ct[:, None] * nr[None, :]
            self.n3d[..., 1] = st[:, None] * nr[None, :]
            self.n3d[..., 2] = nz[None, :]

    # -- field shapes ------------------------------------------------------

    @property
    def ambient_dim(self):
        return self.dim + 1

    def values_shape(self):
        if self.kind == "planar_curve":
            return (self.N,)
        return (self.n_theta, self.N)

    def grid_weights(self):
        """Quadrature weights matching values_shape (sum = total length/area)."""
        if self.kind == "planar_curve":
            return self.area_weight
        return np.broadcast_to(self.area_weight[None, :] / self.n_theta,
                               (self.n_theta, self.N))

    def field_ds(self, values, order=1):
        return deriv_values(values, self.period, order=order, axis=-1)

    def field_dtheta(self, values, order=1, axis=0):
        return deriv_values(values, 2.0 * np.pi, order=order, axis=axis)

    def check_admissible(self, u, what="graph"):
        sup = np.abs(u.values).max()
        if sup >= self.reach:
            raise InadmissibleGraphError(
                f"{what} height {sup:.3e} exceeds tubular reach {self.reach:.3e}")

    # -- doubled-cover bookkeeping ----------------------------------------

    def cover_involution_values(self, values):
        """Pull values through the deck transformation of a doubled cover."""
        if not self.doubled:
            return values
        out = values[:, ::-1]
        return np.roll(out, self.n_theta // 2, axis=0)

    def symmetrize_cover(self, values):
        if not self.doubled:
            return values
        return 0.5 * (values + self.cover_involution_values(values))


# ---------------------------------------------------------------------------
# graph functions
# ---------------------------------------------------------------------------


class GraphFunction:
    """Scalar field u on a base, representing the hypersurface {p + u(p) n(p)}.

    Planar-curve data is the (N,) array of node values.  On a rot_surface the
    field is stored as angular rfft stacks of shape (M+2, N) whose last
    (Nyquist) row is kept at zero, i.e. Fourier coefficients up to mode M.
    """

    __slots__ = ("base", "data", "meta", "_values")

    def __init__(self, base, data, meta=None):
        self.base = base
        if base.kind == "planar_curve":
            self.data = np.asarray(data, dtype=float)
        else:
            self.data = np.asarray(data, dtype=complex)
            self.data[base.M + 1, :] = 0.0
        self.meta = meta or {}
        self._values = None

    @classmethod
    def from_values(cls, base, values, meta=None):
        values = np.asarray(values, dtype=float)
        if values.shape != base.values_shape():
            raise GeometryError("values shape does not match base grid")
        if base.kind == "planar_curve":
            return cls(base, values, meta)
        return cls(base, np.fft.rfft(values, axis=0), meta)

    @classmethod
    def zero(cls, base):
        return cls.constant(base, 0.0)

    @classmethod
    def constant(cls, base, c):
        return cls.from_values(base, np.full(base.values_shape(), float(c)))

    @property
    def values(self):
        if self._values is None:
            if self.base.kind == "planar_curve":
                self._values = self.data
            else:
                self._values = np.fft.irfft(self.data, n=self.base.n_theta,
                                            axis=0)
        return self._values

    def grad_frame(self):
        """Gradient components in the orthonormal frame of the base."""
        return grad_frame_values(self.base, self.values)

    def hess_frame(self):
        base = self.base
        v = self.values
        u_ss = base.field_ds(v, order=2)
        if base.kind == "planar_curve":
            return (u_ss,)
        r = base.profile[:, 0][None, :]
        rp = base.tangent[:, 0][None, :]
        u_s = base.field_ds(v)
        u_t = base.field_dtheta(v)
        u_st = base.field_ds(u_t)
        u_tt = base.field_dtheta(v, order=2)
        h_st = (u_st - (rp / r) * u_t) / r
        h_tt = (u_tt + r * rp * u_s) / r ** 2
        return (u_ss, h_st, h_tt)

    def sup(self):
        return float(np.abs(self.values).max())

    def sup_grad(self):
        g = self.grad_frame()
        return float(np.sqrt(sum(c ** 2 for c in g)).max())

    def sup_hess(self):
        return float(max(np.abs(c).max() for c in self.hess_frame()))

    def e_norm(self):
        """Discrete stand-in for the C^2 norm: sup|u| + sup|Du| + sup|Hess u|."""
        return self.sup() + self.sup_grad() + self.sup_hess()

    def c1_norm(self):
        return self.sup() + self.sup_grad()

    def copy(self):
        return GraphFunction(self.base, self.data.copy(), dict(self.meta))

    def __add__(self, other):
        self._check_same_base(other)
        return GraphFunction(self.base, self.data + other.data)

    def __sub__(self, other):
        self._check_same_base(other)
        return GraphFunction(self.base, self.data - other.data)

    def __mul__(self, a):
        return GraphFunction(self.base, self.data * float(a))

    __rmul__ = __mul__

    def __neg__(self):
        return GraphFunction(self.base, -self.data)

    def _check_same_base(self, other):
        if other.base is not self.base:
            raise GeometryError("graph functions live on different bases")


# ---------------------------------------------------------------------------
# round shrinkers
# ---------------------------------------------------------------------------


def build_round(kind, N=256):
    """Round shrinker: circle of radius sqrt(2) or sphere of radius 2.

    N must be a power of two >= 64.  The sphere profile is the doubly covered
    great circle; its quadrature weights fold the exact Fourier series of
    |r| so that smooth integrands keep spectral accuracy across the poles.
    """
    if N < 64 or (N & (N - 1)) != 0:
        raise GeometryError("node count must be a power of two >= 64")
    if kind == "circle":
        R = math.sqrt(2.0)
        period = 2.0 * np.pi * R
        s = period * np.arange(N) / N
        th = s / R
        nodes = R * np.column_stack([np.cos(th), -np.sin(th)])  # clockwise
        tang = np.column_stack([-np.sin(th), -np.cos(th)])
        return BaseShrinker("planar_curve", "circle", nodes, period,
                            exact_area=period, exact_tangent=tang,
                            exact_kappa=np.full(N, 1.0 / R))
    if kind == "sphere":
        R = 2.0
        period = 2.0 * np.pi * R  # doubled cover of the half great circle
        h = period / N
        s = h * (np.arange(N) + 0.5)  # offset grid keeps nodes off the poles
        sig = s / R
        profile = R * np.column_stack([np.sin(sig), np.cos(sig)])
        tang = np.column_stack([np.cos(sig), -np.sin(sig)])
        lw = _abs_sin_line_weight(N, h, sig)
        return BaseShrinker("rot_surface", "sphere", profile, period,
                            doubled=True, modes=12, line_weight=lw,
                            exact_area=16.0 * np.pi, exact_tangent=tang,
                            exact_kappa=np.full(N, 1.0 / R))
    raise GeometryError(f"unsupported round shrinker kind {kind!r}")


def _abs_sin_line_weight(N, h, sig):
    """Line weights w_i with sum_i f_i w_i = integral of I_N(f) * |2 sin(sigma)|.

    Uses the closed-form Fourier series of |sin); the Nyquist-adjacent term
    gets the usual half weight so the identity is exact for the interpolant.
    """
    J = N // 4
    T = np.full_like(sig, 4.0 / np.pi)
    for j in range(1, J + 1):
        beta = 0.5 if 2 * j == N // 2 else 1.0
        T -= beta * (8.0 / np.pi) * np.cos(2.0 * j * sig) / (4.0 * j * j - 1.0)
    w = h * T
    if w.min() <= 0.0:
        raise GeometryError("doubled-cover weights lost positivity")
    return w


def build_sphere(N=256, modes=12):
    """Round sphere with a chosen angular mode count."""
    base = build_round("sphere", N)
    if modes == base.M:
        return base
    return BaseShrinker("rot_surface", "sphere", base.profile, base.period,
                        doubled=True, modes=modes,
                        line_weight=base.area_weight / np.pi,
                        exact_area=16.0 * np.pi, exact_tangent=base.tangent,
                        exact_kappa=base.kappas[:, 0])


# ---------------------------------------------------------------------------
# profile shooting
# ---------------------------------------------------------------------------

_IVP_OPTS = dict(method="DOP853", rtol=1e-13, atol=1e-14, dense_output=True)


def _torus_rhs(s, y):
    r, z, al = y
    return [math.cos(al), math.sin(al),
            0.5 * (r * math.sin(al) - z * math.cos(al)) - math.sin(al) / r]


def _torus_half(a, s_max=20.0):
    """Integrate the torus profile from the inner equator until z returns to 0."""

    def hit_plane(s, y):
        return y[1]

    hit_plane.terminal = True
    hit_plane.direction = -1

    def hit_axis(s, y):
        return y[0] - 1e-6

    hit_axis.terminal = True
    hit_axis.direction = -1

    sol = solve_ivp(_torus_rhs, (0.0, s_max), [a, 0.0, 0.5 * np.pi],
                    events=[hit_plane, hit_axis], **_IVP_OPTS)
    if sol.t_events[1].size:
        raise ShootingError("profile touched the rotation axis")
    if not sol.t_events[0].size:
        raise ShootingError("profile did not return to the z = 0 plane")
    return sol


def _torus_miss(a):
    sol = _torus_half(a)
    return sol.y_events[0][0][2] + 0.5 * np.pi


_shoot_cache = {}


def shoot_shrinker_profile(family, params=None, N=256, tol=1e-10, modes=16):
    """Construct a non-round shrinker by ODE shooting.

    family is ``angenent_torus`` (params ignored) or ``abresch_langer`` with
    params = (m, k): an immersed closed curve with m-fold symmetry and
    rotation index k, admissible when 1/2 < k/m < 1/sqrt(2).  The pair
    (2, 1) sits on the boundary of that range and is returned as the round
    circle, the degenerate member of the family.
    """
    if tol <= 0:
        raise ShootingError("tol must be positive")
    if family == "angenent_torus":
        key = ("angenent", round(math.log10(tol), 3))
        if key not in _shoot_cache:
            _shoot_cache[key] = _solve_angenent(tol)
        sol, a_star, half_len = _shoot_cache[key]
        return _sample_torus(sol, half_len, N, modes)
    if family == "abresch_langer":
        if params is None or len(params) != 2:
            raise ShootingError("abresch_langer needs an (m, k) index pair")
        m, k = int(params[0]), int(params[1])
        if m <= 0 or k <= 0:
            raise ShootingError("abresch_langer indices must be positive")
        ratio = k / m
        if abs(ratio - 0.5) < 1e-12:
            base = build_round("circle", N)
            return BaseShrinker("planar_curve", f"abresch_langer_{m}_{k}",
                                base.profile, base.period)
        if not (0.5 < ratio < 1.0 / math.sqrt(2.0)):
            raise ShootingError(
                f"index pair ({m}, {k}) outside the admissible range")
        key = ("al", m, k, round(math.log10(tol), 3))
        if key not in _shoot_cache:
            _shoot_cache[key] = _solve_abresch_langer(m, k)
        sol, seg_len, dtheta = _shoot_cache[key]
        return _sample_al(sol, seg_len, m, k, N)
    raise ShootingError(f"unknown shrinker family {family!r}")


def _solve_angenent(tol):
    grid = np.linspace(0.25, 1.30, 22)
    miss = []
    for a in grid:
        try:
            miss.append(_torus_miss(a))
        except ShootingError:
            miss.append(np.nan)
    miss = np.array(miss)
    bracket = None
    for i in range(len(grid) - 1):
        if np.isfinite(miss[i]) and np.isfinite(miss[i + 1]) \
                and miss[i] * miss[i + 1] < 0:
            bracket = (grid[i], grid[i + 1])
            break
    if bracket is None:
        raise ShootingError("failed to bracket a closed torus profile")
    a_star = brentq(_torus_miss, *bracket, xtol=1e-15, rtol=8.9e-16)
    sol = _torus_half(a_star)
    half_len = sol.t_events[0][0]
    if abs(_torus_miss(a_star)) > tol:
        raise ShootingError("shooting residual above requested tolerance")
    # re-integrate with a capped step so the dense output used for node
    # sampling is interpolation-noise free (spectral curvature amplifies
    # any inter-step wiggle by k^2)
    fine = solve_ivp(_torus_rhs, (0.0, half_len), [a_star, 0.0, 0.5 * np.pi],
                     max_step=0.01, **_IVP_OPTS)
    return fine, a_star, half_len


def _sample_torus(sol, half_len, N, modes):
    L = 2.0 * half_len
    s = L * np.arange(N) / N
    upper = s <= half_len
    rz = np.empty((N, 2))
    y_up = sol.sol(np.minimum(s, half_len))
    rz[upper, 0] = y_up[0, upper]
    rz[upper, 1] = y_up[1, upper]
    mirr = ~upper
    y_lo = sol.sol(L - s[mirr])
    rz[mirr, 0] = y_lo[0]
    rz[mirr, 1] = -y_lo[1]
    # independent area reference from a fine midpoint sum on the half profile
    sf = half_len * (np.arange(4096) + 0.5) / 4096
    area = 2.0 * 2.0 * np.pi * np.sum(sol.sol(sf)[0]) * (half_len / 4096)
    base = BaseShrinker("rot_surface", "angenent_torus", rz, L, modes=modes)
    if abs(base.area_weight.sum() - area) > 1e-8 * area:
        raise ShootingError("resampled torus area deviates from the ODE area")
    return base


def _al_rhs(s, y):
    x, yy, al, th = y
    ka = 0.5 * (x * math.sin(al) - yy * math.cos(al))
    r2 = x * x + yy * yy
    return [math.cos(al), math.sin(al), ka,
            (x * math.sin(al) - yy * math.cos(al)) / r2]


def _al_segment(a, s_max=40.0):
    """Locate one lobe, apex to apex, of a candidate shrinking curve.

    <x,t> vanishes at the start, so the apex-to-apex leg is split at the
    radius minimum in between; otherwise the terminal event would fire at
    s = 0.  Returns (lobe length, state at the far apex).
    """

    def radial(s, y):
        return y[0] * math.cos(y[2]) + y[1] * math.sin(y[2])

    y0 = [a, 0.0, -0.5 * np.pi, 0.0]
    radial.terminal = True
    radial.direction = 1
    leg1 = solve_ivp(_al_rhs, (0.0, s_max), y0, events=[radial], **_IVP_OPTS)
    if not leg1.t_events[0].size:
        raise ShootingError("curve segment did not reach a radius minimum")
    s_min = leg1.t_events[0][0]
    y_min = leg1.y_events[0][0]
    radial.direction = -1
    leg2 = solve_ivp(_al_rhs, (s_min, s_min + s_max), y_min, events=[radial],
                     **_IVP_OPTS)
    if not leg2.t_events[0].size:
        raise ShootingError("curve segment did not reach the next apex")
    return leg2.t_events[0][0], leg2.y_events[0][0]


def _solve_abresch_langer(m, k):
    target = -2.0 * np.pi * k / m  # clockwise polar advance per lobe

    def miss(a):
        _, y_end = _al_segment(a)
        return y_end[3] - target

    grid = np.sqrt(2.0) + np.linspace(0.02, 1.8, 24)
    vals = []
    for a in grid:
        try:
            vals.append(miss(a))
        except ShootingError:
            vals.append(np.nan)
    vals = np.array(vals)
    bracket = None
    for i in range(len(grid) - 1):
        if np.isfinite(vals[i]) and np.isfinite(vals[i + 1]) \
                and vals[i] * vals[i + 1] < 0:
            bracket = (grid[i], grid[i + 1])
            break
    if bracket is None:
        raise ShootingError(
            f"failed to bracket the ({m}, {k}) Abresch-Langer curve")
    a_star = brentq(miss, *bracket, xtol=1e-15, rtol=8.9e-16)
    seg_len, y_end = _al_segment(a_star)
    # noise-free dense pass over the located lobe for node sampling
    sol = solve_ivp(_al_rhs, (0.0, seg_len), [a_star, 0.0, -0.5 * np.pi, 0.0],
                    max_step=0.01, **_IVP_OPTS)
    return sol, seg_len, y_end[3]


def _sample_al(sol, seg_len, m, k, N):
    L = m * seg_len
    s = L * np.arange(N) / N
    j = np.minimum((s // seg_len).astype(int), m - 1)
    loc = s - j * seg_len
    pts = sol.sol(loc)[:2].T
    nodes = np.empty((N, 2))
    ang = -2.0 * np.pi * k / m  # exact symmetry rotation per lobe
    for jj in range(m):
        Rj = rotation_2d(jj * ang)
        sel = j == jj
        nodes[sel] = pts[sel] @ Rj.T
    return BaseShrinker("planar_curve", f"abresch_langer_{m}_{k}", nodes, L)


# ---------------------------------------------------------------------------
# tubular-coordinate quantities
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class TubularQuantities:
    """Offset geometry of the base at tubular coordinates (p, s, y)."""

    nu: float
    w: float
    eta: float
    dnu_ds: float
    dnu_dy: np.ndarray


def _tubular_fields(kappas, pos_tangent, pos_normal, s, y):
    """Exact offset-geometry fields, vectorized over leading axes.

    kappas, pos_tangent carry the principal-frame components in the trailing
    axis; s is scalar-shaped, y frame-shaped.  Returns a dict of arrays.
    Reductions over the (size <= 2) frame axis are unrolled; this sits on
    the hot path of the flow.
    """
    G = 1.0 + s[..., None] * kappas
    b = y / G
    kG = kappas / G
    if kappas.shape[-1] == 1:
        b2 = b[..., 0] ** 2
        detG = G[..., 0]
        pt_b = pos_tangent[..., 0] * b[..., 0]
        kG_sum = kG[..., 0]
        b2kG = b2 * kG[..., 0]
    else:
        b2 = b[..., 0] ** 2 + b[..., 1] ** 2
        detG = G[..., 0] * G[..., 1]
        pt_b = pos_tangent[..., 0] * b[..., 0] + pos_tangent[..., 1] * b[..., 1]
        kG_sum = kG[..., 0] + kG[..., 1]
        b2kG = b[..., 0] ** 2 * kG[..., 0] + b[..., 1] ** 2 * kG[..., 1]
    w = np.sqrt(1.0 + b2)
    nu = detG * w
    eta = (pos_normal + s - pt_b) / w
    dnu_ds = detG * (w * kG_sum - b2kG / w)
    dnu_dy = detG[..., None] * b / (G * w[..., None])
    return {"G": G, "b": b, "w": w, "detG": detG, "nu": nu, "eta": eta,
            "dnu_ds": dnu_ds, "dnu_dy": dnu_dy}


def tubular_quantities(base, node, s, y):
    """Relative area element, speed and support function at (p_node, s, y)."""
    if abs(s) >= base.reach:
        raise InadmissibleGraphError(
            f"offset {s!r} outside tubular reach {base.reach:.3e}")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.shape != (base.dim,):
        raise GeometryError(f"tangent vector must have {base.dim} components")
    f = _tubular_fields(base.kappas[node], base.pos_tangent[node],
                        base.pos_normal[node], np.asarray(float(s)), y)
    return TubularQuantities(nu=float(f["nu"]), w=float(f["w"]),
                             eta=float(f["eta"]), dnu_ds=float(f["dnu_ds"]),
                             dnu_dy=np.array(f["dnu_dy"], dtype=float))


def _broadcast_profile(base, arr):
    """Lift a per-profile-node array onto the values grid."""
    if base.kind == "planar_curve":
        return arr
    return np.broadcast_to(arr if arr.ndim == 1 else arr,
                           (base.n_theta,) + arr.shape)


def grad_frame_values(base, V):
    """Frame gradient components of values with arbitrary leading batch axes."""
    u_s = base.field_ds(V)
    if base.kind == "planar_curve":
        return (u_s,)
    u_t = base.field_dtheta(V, axis=-2) / base.profile[:, 0]
    return (u_s, u_t)


if njit is not None:

    @njit(cache=True)
    def _tubular_kernel_2(kap, pt, pn, s, y, w, nu, eta, dnu_ds, dnu_dy, b):
        """Fused offset-geometry evaluation; flat points, profile period N."""
        N = kap.shape[0]
        for i in range(s.size):
            j = i % N
            g0 = 1.0 + s[i] * kap[j, 0]
            g1 = 1.0 + s[i] * kap[j, 1]
            b0 = y[i, 0] / g0
            b1 = y[i, 1] / g1
            det = g0 * g1
            ww = math.sqrt(1.0 + b0 * b0 + b1 * b1)
            kg0 = kap[j, 0] / g0
            kg1 = kap[j, 1] / g1
            w[i] = ww
            nu[i] = det * ww
            eta[i] = (pn[j] + s[i] - pt[j, 0] * b0 - pt[j, 1] * b1) / ww
            dnu_ds[i] = det * (ww * (kg0 + kg1)
                               - (b0 * b0 * kg0 + b1 * b1 * kg1) / ww)
            dnu_dy[i, 0] = det * b0 / (g0 * ww)
            dnu_dy[i, 1] = det * b1 / (g1 * ww)
            b[i, 0] = b0
            b[i, 1] = b1

    @njit(cache=True)
    def _tubular_kernel_1(kap, pt, pn, s, y, w, nu, eta, dnu_ds, dnu_dy, b):
        N = kap.shape[0]
        for i in range(s.size):
            j = i % N
            g0 = 1.0 + s[i] * kap[j, 0]
            b0 = y[i, 0] / g0
            ww = math.sqrt(1.0 + b0 * b0)
            kg0 = kap[j, 0] / g0
            w[i] = ww
            nu[i] = g0 * ww
            eta[i] = (pn[j] + s[i] - pt[j, 0] * b0) / ww
            dnu_ds[i] = g0 * (ww * kg0 - b0 * b0 * kg0 / ww)
            dnu_dy[i, 0] = g0 * b0 / (g0 * ww)
            b[i, 0] = b0


def _tubular_fields_fast(base, V, y):
    """Numba-fused version of _tubular_fields on base grids (hot path)."""
    shape = V.shape
    n = base.dim
    sf = np.ascontiguousarray(V, dtype=float).ravel()
    yf = np.ascontiguousarray(y, dtype=float).reshape(-1, n)
    w = np.empty_like(sf)
    nu = np.empty_like(sf)
    eta = np.empty_like(sf)
    dnu_ds = np.empty_like(sf)
    dnu_dy = np.empty((sf.size, n))
    b = np.empty((sf.size, n))
    kernel = _tubular_kernel_2 if n == 2 else _tubular_kernel_1
    kernel(base.kappas, base.pos_tangent, base.pos_normal, sf, yf,
           w, nu, eta, dnu_ds, dnu_dy, b)
    return {"w": w.reshape(shape), "nu": nu.reshape(shape),
            "eta": eta.reshape(shape), "dnu_ds": dnu_ds.reshape(shape),
            "dnu_dy": dnu_dy.reshape(shape + (n,)),
            "b": b.reshape(shape + (n,)), "grad": y}


def graph_pointwise_values(base, V):
    """Tubular fields of the graph of V at (p, V, grad V); batch-friendly."""
    y = np.stack(grad_frame_values(base, V), axis=-1)
    if njit is not None:
        return _tubular_fields_fast(base, V, y)
    kap = _broadcast_profile(base, base.kappas)
    pt = _broadcast_profile(base, base.pos_tangent)
    pn = _broadcast_profile(base, base.pos_normal)
    f = _tubular_fields(kap, pt, pn, V, y)
    f["grad"] = y
    return f


def graph_pointwise(base, u):
    """Tubular fields of Sigma_u evaluated at (p, u(p), grad u(p)) per node."""
    base.check_admissible(u)
    return graph_pointwise_values(base, u.values)


def _div_frame(base, comp):
    """Divergence on the base of a tangent field given in frame components."""
    if base.kind == "planar_curve":
        return base.field_ds(comp[..., 0])
    r = base.profile[:, 0]
    d = base.field_ds(comp[..., 0]) + base.drds_over_r * comp[..., 0]
    d = d + base.field_dtheta(comp[..., 1], axis=-2) / r
    return d


def graph_mean_curvature_values(base, V, fields=None):
    f = fields if fields is not None else graph_pointwise_values(base, V)
    return (f["w"] / f["nu"]) * (f["dnu_ds"] - _div_frame(base, f["dnu_dy"]))


def graph_mean_curvature(base, u, fields=None):
    """Mean curvature of Sigma_u as a field on the base grid."""
    base.check_admissible(u)
    return graph_mean_curvature_values(base, u.values, fields)


def embed_graph(base, u):
    """Embedded point cloud of Sigma_u on the parameter grid."""
    if base.kind == "planar_curve":
        return base.profile + u.values[:, None] * base.normal2d
    return base.x3d + u.values[..., None] * base.n3d


def gaussian_quadrature(base, u, x0=None, t0=1.0):
    """Normalized Gaussian area of Sigma_u with center x0 and scale t0."""
    f = graph_pointwise(base, u)
    x = embed_graph(base, u)
    if x0 is None:
        x0 = np.zeros(base.ambient_dim)
    d2 = ((x - x0) ** 2).sum(axis=-1)
    w = base.grid_weights()
    pref = (4.0 * np.pi * t0) ** (-base.dim / 2.0)
    return pref * float((w * f["nu"] * np.exp(-d2 / (4.0 * t0))).sum())


def embed_normal_offset(base, u, heights):
    """Point cloud of the surface at normal distance `heights` above Sigma_u."""
    f = graph_pointwise(base, u)
    x = embed_graph(base, u)
    if base.kind == "planar_curve":
        nu_hat = (base.normal2d - f["b"][:, 0][:, None] * base.tangent) \
            / f["w"][:, None]
        return x + np.asarray(heights)[:, None] * nu_hat
    ct, st = np.cos(base.theta), np.sin(base.theta)
    e1 = np.empty_like(x)
    e1[..., 0] = ct[:, None] * base.tangent[:, 0][None, :]
    e1[..., 1] = st[:, None] * base.tangent[:, 0][None, :]
    e1[..., 2] = base.tangent[:, 1][None, :]
    e2 = np.zeros_like(x)
    e2[..., 0] = -st[:, None]
    e2[..., 1] = ct[:, None]
    nu_hat = (base.n3d - f["b"][..., 0:1] * e1 - f["b"][..., 1:2] * e2) \
        / f["w"][..., None]
    return x + np.asarray(heights)[..., None] * nu_hat


def graph_second_fundamental_sq(base, u):
    """|A|^2 of the graph surface, from spectral derivatives of the embedding."""
    x = embed_graph(base, u)
    if base.kind == "planar_curve":
        xp = base.field_ds(x.T).T
        xpp = base.field_ds(x.T, order=2).T
        sp2 = (xp ** 2).sum(axis=1)
        ka = (xp[:, 0] * xpp[:, 1] - xp[:, 1] * xpp[:, 0]) / sp2 ** 1.5
        return ka ** 2
    xc = np.moveaxis(x, -1, 0)  # components leading, grid axes (theta, sigma)
    xs = base.field_ds(xc)
    xt = base.field_dtheta(xc, axis=-2)
    xss = base.field_ds(xc, order=2)
    xst = base.field_ds(base.field_dtheta(xc, axis=-2))
    xtt = base.field_dtheta(xc, order=2, axis=-2)
    nrm = np.cross(np.moveaxis(xs, 0, -1), np.moveaxis(xt, 0, -1))
    nrm /= np.linalg.norm(nrm, axis=-1, keepdims=True)
    nrm = np.moveaxis(nrm, -1, 0)
    E = (xs * xs).sum(axis=0)
    F = (xs * xt).sum(axis=0)
    G = (xt * xt).sum(axis=0)
    e = (xss * nrm).sum(axis=0)
    ff = (xst * nrm).sum(axis=0)
    g = (xtt * nrm).sum(axis=0)
    det = E * G - F * F
    s11 = (e * G - ff * F) / det
    s12 = (ff * G - g * F) / det
    s21 = (ff * E - e * F) / det
    s22 = (g * E - ff * F) / det
    return s11 ** 2 + 2.0 * s12 * s21 + s22 ** 2


# ---------------------------------------------------------------------------
# normal-graph re-expression and the rotation action
# ---------------------------------------------------------------------------


def _target_interp(base, cloud):
    comps = np.moveaxis(cloud, -1, 0)
    if base.kind == "planar_curve":
        return TrigInterp1D(comps, base.period)
    return TrigInterp2D(comps, 2.0 * np.pi, base.period)


def _reexpress_cloud(base, u, cloud, max_iter=60, tol=1e-13):
    """Heights of a closed target cloud over the graph of u, along its normal.

    Solves, per grid node p, for the parameter point q and offset t with
    X_target(q) = p + u(p) n(p) + t V(p), where V = n - (I + u S)^{-1} grad u
    is normal to the graph of u.  Returns the geometric normal heights t |V|.
    """
    interp = _target_interp(base, cloud)
    f = graph_pointwise(base, u)
    uv = u.values
    if base.kind == "planar_curve":
        foot = base.profile + uv[:, None] * base.normal2d
        V = base.normal2d - f["b"][:, 0][:, None] * base.tangent
        q = base.s.copy()
        t = np.zeros(base.N)
        scale = 1.0 + np.abs(cloud).max()
        for _ in range(max_iter):
            Xq = interp(q).T
            R = Xq - foot - t[:, None] * V
            if np.abs(R).max() < tol * scale:
                break
            dX = interp(q, order=1).T
            # 2x2 solve of [dX, -V] [dq, dt]^T = -R per node
            a11, a12 = dX[:, 0], -V[:, 0]
            a21, a22 = dX[:, 1], -V[:, 1]
            det = a11 * a22 - a12 * a21
            dq = (-R[:, 0] * a22 + a12 * R[:, 1]) / det
            dt = (-a11 * R[:, 1] + R[:, 0] * a21) / det
            if np.abs(dq).max() > base.period:
                raise ReexpressionError("re-expression Newton diverged")
            q = q + dq
            t = t + dt
        else:
            raise ReexpressionError("re-expression Newton did not converge")
        return t * f["w"]  # |V| = w, so t|V| is the unit-normal height
    # rot_surface: unknowns (theta_q, sigma_q, t) per grid node
    foot = base.x3d + uv[..., None] * base.n3d
    e1 = np.broadcast_to(
        np.stack([np.cos(base.theta)[:, None] * base.tangent[:, 0][None, :],
                  np.sin(base.theta)[:, None] * base.tangent[:, 0][None, :],
                  np.broadcast_to(base.tangent[:, 1][None, :],
                                  (base.n_theta, base.N))], axis=-1),
        foot.shape)
    e2 = np.zeros_like(foot)
    e2[..., 0] = -np.sin(base.theta)[:, None]
    e2[..., 1] = np.cos(base.theta)[:, None]
    V = base.n3d - f["b"][..., 0:1] * e1 - f["b"][..., 1:2] * e2
    th = np.broadcast_to(base.theta[:, None], (base.n_theta, base.N)).copy()
    sg = np.broadcast_to(base.s[None, :], (base.n_theta, base.N)).copy()
    t = np.zeros((base.n_theta, base.N))
    scale = 1.0 + np.abs(cloud).max()
    thq, sgq, tq = th.ravel(), sg.ravel(), t.ravel()
    footq = foot.reshape(-1, 3)
    Vq = V.reshape(-1, 3)
    for _ in range(max_iter):
        X, Jth, Jsg = (m.T for m in interp.with_derivs(thq, sgq))
        R = X - footq - tq[:, None] * Vq
        if np.abs(R).max() < tol * scale:
            break
        J = np.stack([Jth, Jsg, -Vq], axis=-1)
        # Tikhonov-damped normal equations: doubled covers have polar chart
        # points where the theta direction degenerates
        JT = np.swapaxes(J, -1, -2)
        JTJ = JT @ J
        lam = 1e-13 * np.trace(JTJ, axis1=-2, axis2=-1)
        JTJ = JTJ + lam[:, None, None] * np.eye(3)
        try:
            d = np.linalg.solve(JTJ, -(JT @ R[..., None]))[..., 0]
        except np.linalg.LinAlgError as exc:
            raise ReexpressionError("singular re-expression Jacobian") from exc
        if np.abs(d[:, :2]).max() > base.period:
            raise ReexpressionError("re-expression Newton diverged")
        thq = thq + d[:, 0]
        sgq = sgq + d[:, 1]
        tq = tq + d[:, 2]
    else:
        raise ReexpressionError("re-expression Newton did not converge")
    heights = (tq * np.sqrt((Vq ** 2).sum(axis=1))).reshape(base.n_theta,
                                                            base.N)
    return heights


def normal_graph_reexpress(base, u, v):
    """Write Sigma_v as a normal graph over Sigma_u; returns heights on u.

    The result carries the measured constant of the closeness estimate
    |w - (v - u)| <= C delta^2 |v - u| in meta["closeness_constant"].
    """
    for g, name in ((u, "u"), (v, "v")):
        if g.sup() > base.delta0:
            raise InadmissibleGraphError(
                f"graph {name} above the re-expression threshold delta0")
    cloud = embed_graph(base, v)
    heights = _reexpress_cloud(base, u, cloud)
    diff = v.values - u.values
    delta = max(u.c1_norm(), v.c1_norm())
    mask = np.abs(diff) > 1e-14 * (1.0 + np.abs(diff).max())
    C = 0.0
    if delta > 0 and mask.any():
        C = float((np.abs(heights - diff)[mask]
                   / (delta ** 2 * np.abs(diff)[mask])).max())
    return GraphFunction.from_values(base, heights,
                                     meta={"closeness_constant": C})


def rotate_graph(base, g, u):
    """Rotate the embedded graph of u and re-express it over the base."""
    g = np.asarray(g, dtype=float)
    if g.shape != (base.ambient_dim,) * 2:
        raise GeometryError("rotation matrix has the wrong shape")
    if np.abs(g @ g.T - np.eye(base.ambient_dim)).max() > 1e-12:
        raise GeometryError("rotation matrix is not orthogonal")
    base.check_admissible(u)
    cloud = embed_graph(base, u) @ g.T
    heights = _reexpress_cloud(base, GraphFunction.zero(base), cloud)
    if np.abs(heights).max() >= base.reach:
        raise ReexpressionError(
            "rotated surface leaves the graph neighborhood")
    return GraphFunction.from_values(base, heights)


# ---------------------------------------------------------------------------
# cache files
# ---------------------------------------------------------------------------


def save_geometry(base, path):
    """Versioned text cache: header plus one full-precision node per line."""
    lines = []
    header = f"{GEOM_MAGIC} {base.kind} {base.N} {base.residual:.17g}"
    if base.kind == "rot_surface":
        header += f" {base.M} {int(base.doubled)} {base.family}"
    else:
        header += f" {base.family}"
    lines.append(header)
    lines.append(f"period {base.period:.17g}")
    lw = base.area_weight
    for i in range(base.N):
        p = base.profile[i]
        n = base.normal2d[i]
        lines.append(" ".join(f"{v:.17g}" for v in
                              (p[0], p[1], n[0], n[1], base.H[i], base.A2[i],
                               lw[i])))
    data = "\n".join(lines) + "\n"
    with open(path, "w") as fh:
        fh.write(data)


def load_geometry(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    head = lines[0].split()
    if " ".join(head[:2]) != GEOM_MAGIC:
        raise GeometryError(f"not a geometry cache: {path}")
    kind = head[2]
    N = int(head[3])
    if kind == "rot_surface":
        modes, doubled, family = int(head[5]), bool(int(head[6])), head[7]
    else:
        modes, doubled, family = None, False, head[5]
    period = float(lines[1].split()[1])
    rows = np.array([[float(v) for v in ln.split()] for ln in lines[2:2 + N]])
    profile = rows[:, :2]
    if kind == "planar_curve":
        base = BaseShrinker(kind, family, profile, period,
                            line_weight=rows[:, 6])
    else:
        fold = 0.5 if doubled else 1.0
        base = BaseShrinker(kind, family, profile, period, doubled=doubled,
                            modes=modes,
                            line_weight=rows[:, 6] / (2.0 * np.pi * fold))
    if np.abs(base.H - rows[:, 4]).max() > 1e-9:
        raise GeometryError("cached curvature disagrees with rebuilt geometry")
    return base


def file_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
