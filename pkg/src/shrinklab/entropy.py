"""Gaussian areas over centers and scales, entropy, and the balancing map.

F_{x0,t0}(M) = (4 pi t0)^{-n/2} int_M exp(-|x-x0|^2 / 4 t0) is maximized
over (x0, t0) to give the entropy; a hypersurface is balanced when the
maximum sits at center 0, scale 1.  The balancing map translates and
dilates a nearby graph to its entropy-optimal frame: with rho(u) = (x0, t0)
the surface is replaced by (Sigma_u - x0) / sqrt(t0) and re-expressed as a
graph.  Group elements g_{y,h} act by scaling with h first, then
translating by y.
"""

import dataclasses
import json

import numpy as np

from .errors import BalanceError
from .geometry import (
    GraphFunction,
    _reexpress_cloud,
    embed_graph,
    graph_pointwise,
)
from .flow import time_one_map


@dataclasses.dataclass(frozen=True)
class CenterScale:
    x0: np.ndarray
    t0: float

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))
        if self.t0 <= 0:
            raise BalanceError("scale t0 must be positive")

    def distance(self, other):
        """|x0 - y0| + |log t0 - log s0|, the natural center-scale metric."""
        return float(np.linalg.norm(self.x0 - other.x0)
                     + abs(np.log(self.t0) - np.log(other.t0)))

    @classmethod
    def origin(cls, dim_ambient):
        return cls(np.zeros(dim_ambient), 1.0)


@dataclasses.dataclass
class EntropySearch:
    box_radius: float = 2.0        # search box for centers
    log_scale_range: float = 1.5   # |log t0| bound
    grid_points: int = 5           # coarse grid per axis (fallback)
    newton_tol: float = 1e-13
    max_iter: int = 60


def _gauss_weighted(base, u, x0, t0):
    f = graph_pointwise(base, u)
    x = embed_graph(base, u)
    d2 = ((x - x0) ** 2).sum(axis=-1)
    pref = (4.0 * np.pi * t0) ** (-base.dim / 2.0)
    mass = base.grid_weights() * f["nu"] * np.exp(-d2 / (4.0 * t0)) * pref
    return mass, x, d2


def gaussian_area(base, u, cs):
    """Normalized Gaussian area of Sigma_u at center cs.x0, scale cs.t0."""
    mass, _, _ = _gauss_weighted(base, u, cs.x0, cs.t0)
    return float(mass.sum())


def bar_F(base, u, cs):
    """Gradient of (x0, t0) -> F_{x0,t0}(Sigma_u); layout [d/dx0..., d/dt0]."""
    x0, t0 = cs.x0, cs.t0
    mass, x, d2 = _gauss_weighted(base, u, x0, t0)
    n = base.dim
    out = np.empty(base.ambient_dim + 1)
    for j in range(base.ambient_dim):
        out[j] = (mass * (x[..., j] - x0[j])).sum() / (2.0 * t0)
    out[-1] = (mass * (d2 - 2.0 * n * t0)).sum() / (4.0 * t0 ** 2)
    return out


def _bar_F_xt(base, u, xi):
    """bar_F in Newton variables xi = (x0, log t0)."""
    cs = CenterScale(xi[:-1], float(np.exp(xi[-1])))
    g = bar_F(base, u, cs)
    g[-1] *= cs.t0  # chain rule d/d(log t0)
    return g


def _newton_center_scale(base, u, xi0, cfg):
    xi = np.asarray(xi0, dtype=float).copy()
    scale = gaussian_area(base, u, CenterScale(xi[:-1], np.exp(xi[-1])))
    for _ in range(cfg.max_iter):
        g = _bar_F_xt(base, u, xi)
        if np.abs(g).max() <= cfg.newton_tol * max(scale, 1e-3):
            return xi, True
        J = np.empty((xi.size, xi.size))
        h = 1e-6
        for j in range(xi.size):
            step = np.zeros_like(xi)
            step[j] = h
            J[:, j] = (_bar_F_xt(base, u, xi + step)
                       - _bar_F_xt(base, u, xi - step)) / (2.0 * h)
        try:
            d = np.linalg.solve(J, -g)
        except np.linalg.LinAlgError:
            return xi, False
        if np.abs(d).max() > 1.0:
            d *= 1.0 / np.abs(d).max()
        xi = xi + d
        if np.abs(xi[:-1]).max() > cfg.box_radius \
                or abs(xi[-1]) > cfg.log_scale_range:
            return xi, False
    return xi, False


def center_scale_hessian(base, u, cs, h=1e-5):
    """Second-difference Hessian of G(x0, t0) at cs, in raw variables."""
    m = base.ambient_dim + 1

    def grad(vec):
        return bar_F(base, u, CenterScale(vec[:-1], vec[-1]))

    v0 = np.concatenate([cs.x0, [cs.t0]])
    H = np.empty((m, m))
    for j in range(m):
        step = np.zeros(m)
        step[j] = h
        H[:, j] = (grad(v0 + step) - grad(v0 - step)) / (2.0 * h)
    return 0.5 * (H + H.T)


def entropy(base, u, cfg=None):
    """Entropy of Sigma_u: the supremum of Gaussian areas, with its argmax.

    Newton ascent seeded at (0, 1); if it leaves the search box, the best
    point of a coarse grid reseeds it, and failing that the coarse value is
    returned with the report flag set.
    """
    cfg = cfg or EntropySearch()
    m = base.ambient_dim
    xi, ok = _newton_center_scale(base, u, np.zeros(m + 1), cfg)
    fallback_used = False
    if not ok:
        fallback_used = True
        best, best_val = None, -np.inf
        axes = [np.linspace(-cfg.box_radius, cfg.box_radius,
                            cfg.grid_points)] * m
        taus = np.linspace(-cfg.log_scale_range, cfg.log_scale_range,
                           cfg.grid_points)
        for centre in np.stack(np.meshgrid(*axes), axis=-1).reshape(-1, m):
            for tau in taus:
                val = gaussian_area(base, u,
                                    CenterScale(centre, np.exp(tau)))
                if val > best_val:
                    best_val, best = val, np.concatenate([centre, [tau]])
        xi, ok = _newton_center_scale(base, u, best, cfg)
        if not ok:
            cs = CenterScale(best[:-1], float(np.exp(best[-1])))
            return best_val, cs, {"converged": False, "fallback": True}
    cs = CenterScale(xi[:-1], float(np.exp(xi[-1])))
    return gaussian_area(base, u, cs), cs, {"converged": True,
                                            "fallback": fallback_used}


def rho(base, u, cfg=None, certify=True):
    """Entropy-optimal center and scale of Sigma_u (Newton on bar_F = 0)."""
    cfg = cfg or EntropySearch()
    xi, ok = _newton_center_scale(base, u, np.zeros(base.ambient_dim + 1),
                                  cfg)
    if not ok:
        raise BalanceError("center-scale Newton did not converge")
    cs = CenterScale(xi[:-1], float(np.exp(xi[-1])))
    if certify:
        H = center_scale_hessian(base, u, cs)
        if np.linalg.eigvalsh(H).max() >= 0:
            raise BalanceError(
                "Gaussian-area Hessian is not negative definite at the root")
    return cs


def balance(base, u, cfg=None, return_element=False):
    """The balancing map: normalize Sigma_u to center 0 and scale 1."""
    cs = rho(base, u, cfg, certify=False)
    cloud = (embed_graph(base, u) - cs.x0) / np.sqrt(cs.t0)
    heights = _reexpress_cloud(base, GraphFunction.zero(base), cloud)
    out = GraphFunction.from_values(base, heights)
    if return_element:
        return out, cs
    return out


def balanced_time_one(base, u, settings=None, cfg=None,
                      return_element=False):
    """One step of the balanced dynamics: balance after the time-one map."""
    psi = time_one_map(base, u, settings)
    return balance(base, psi, cfg, return_element=return_element)


# ---------------------------------------------------------------------------
# the translation/dilation algebra and its Q-orthogonal complement
# ---------------------------------------------------------------------------


def group_fields(base):
    """Normal parts of the translation and dilation generators."""
    fields = []
    if base.kind == "planar_curve":
        for j in range(2):
            fields.append(GraphFunction.from_values(
                base, base.normal2d[:, j].copy()))
    else:
        for j in range(3):
            fields.append(GraphFunction.from_values(
                base, base.n3d[..., j].copy()))
    dil = 2.0 * base.H
    fields.append(GraphFunction.from_values(
        base, dil if base.kind == "planar_curve"
        else np.broadcast_to(dil[None, :],
                             (base.n_theta, base.N)).copy()))
    return fields


class GroupProjector:
    """Q-orthogonal projection onto the complement of the group algebra."""

    def __init__(self, qform):
        self.qform = qform
        raw = group_fields(qform.base)
        basis = []
        for g in raw:
            for b in basis:
                g = g - qform.inner(g, b) * b
            nrm = qform.norm(g)
            if nrm > 1e-10:
                basis.append((1.0 / nrm) * g)
        self.basis = basis

    def project_algebra(self, u):
        out = 0.0 * u
        for b in self.basis:
            out = out + self.qform.inner(u, b) * b
        return out

    def project_complement(self, u):
        return u - self.project_algebra(u)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class BalanceReport:
    rho_x0: tuple
    rho_t0: float
    entropy: float
    f_01: float
    balanced: bool
    hessian_eigs: tuple
    balance_tol: float

    def to_json(self):
        d = dataclasses.asdict(self)
        return json.dumps(d, sort_keys=True,
                          default=lambda v: float(v))


def balance_report(base, u, tol=1e-8, cfg=None):
    lam, argmax, info = entropy(base, u, cfg)
    f01 = gaussian_area(base, u, CenterScale.origin(base.ambient_dim))
    H = center_scale_hessian(base, u, argmax)
    eigs = np.linalg.eigvalsh(H)
    return BalanceReport(
        rho_x0=tuple(float(v) for v in argmax.x0),
        rho_t0=float(argmax.t0),
        entropy=float(lam),
        f_01=float(f01),
        balanced=bool(abs(f01 - lam) <= tol * max(1.0, abs(lam))),
        hessian_eigs=tuple(float(v) for v in eigs),
        balance_tol=tol)
