"""Graphical rescaled mean curvature flow and its time-one map.

The evolution is du/dt = M u with M u = w(p,u,Du) (eta(p,u,Du)/2 - H_u),
the gradient flow of the Gaussian area.  Time stepping is semi-implicit:
the linearization L (the stability operator) is treated implicitly through
a Crank-Nicolson-type midpoint stage, the nonlinear remainder
Q(u) = M u - L u explicitly, second order overall.  Step sizes live on a
dyadic ladder controlled by step-doubling so that LU factors of the
implicit matrices can be cached per level and runs are deterministic
functions of the initial state.
"""

import dataclasses

import numpy as np
import scipy.linalg

from .errors import FlowError, FlowEscape, InadmissibleGraphError
from .geometry import (
    GraphFunction,
    _div_frame,
    embed_graph,
    grad_frame_values,
    graph_mean_curvature_values,
    graph_pointwise_values,
    graph_second_fundamental_sq,
)
from .spectrum import assemble_L

# ---------------------------------------------------------------------------
# right-hand side and nonlinearity
# ---------------------------------------------------------------------------


def rhs_values(base, V, fields=None):
    """M applied to graph values (arbitrary leading batch axes)."""
    f = fields if fields is not None else graph_pointwise_values(base, V)
    H = graph_mean_curvature_values(base, V, f)
    return f["w"] * (0.5 * f["eta"] - H)


def rhs_M(base, u):
    """Graphical rescaled-flow velocity M u as a field on the base grid."""
    base.check_admissible(u)
    return rhs_values(base, u.values)


def nonlinearity_values(base, V, op=None):
    op = op or assemble_L(base)
    return rhs_values(base, V) - op.apply_values(V)


# ---------------------------------------------------------------------------
# settings, trace, monitors
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class FlowSettings:
    dt_max: float = 0.05
    dt_min: float = 1e-9
    tol_local: float = 1e-10      # step-doubling target, sup norm
    store_every: int = 40         # trace keeps every k-th state
    a2_every: int = 5             # curvature monitor cadence
    delta1: float = 0.1           # local-existence ball for |u| + |Du|


@dataclasses.dataclass
class FlowTrace:
    base: object
    times: list = dataclasses.field(default_factory=list)
    sup_u: list = dataclasses.field(default_factory=list)
    sup_grad: list = dataclasses.field(default_factory=list)
    sup_hess: list = dataclasses.field(default_factory=list)
    sup_a2: list = dataclasses.field(default_factory=list)
    f_value: list = dataclasses.field(default_factory=list)
    dt: list = dataclasses.field(default_factory=list)
    nonlin_norm: list = dataclasses.field(default_factory=list)
    states: list = dataclasses.field(default_factory=list)
    termination: str = "reached t_end"

    def rows(self):
        return zip(self.times, self.sup_u, self.sup_grad, self.sup_hess,
                   self.sup_a2, self.f_value, self.dt, self.nonlin_norm)

    def write_csv(self, path):
        lines = ["t,sup_u,sup_grad_u,sup_hess_u,sup_A2,F,dt,nonlin_norm"]
        for row in self.rows():
            lines.append(",".join(f"{v:.17g}" for v in row))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def gaussian_area_values(base, V, fields=None):
    """Normalized Gaussian area of the graph of V; batched."""
    f = fields if fields is not None else graph_pointwise_values(base, V)
    if base.kind == "planar_curve":
        x = base.profile + V[..., None] * base.normal2d
    else:
        x = base.x3d + V[..., None] * base.n3d
    d2 = (x ** 2).sum(axis=-1)
    w = base.grid_weights()
    pref = (4.0 * np.pi) ** (-base.dim / 2.0)
    integrand = w * f["nu"] * np.exp(-d2 / 4.0)
    if base.kind == "planar_curve":
        return pref * integrand.sum(axis=-1)
    return pref * integrand.sum(axis=(-2, -1))


def dissipation_values(base, V, fields=None):
    """-dF/dt along the flow: Gaussian integral of the squared normal speed."""
    f = fields if fields is not None else graph_pointwise_values(base, V)
    speed = rhs_values(base, V, f) / f["w"]
    if base.kind == "planar_curve":
        x = base.profile + V[..., None] * base.normal2d
    else:
        x = base.x3d + V[..., None] * base.n3d
    d2 = (x ** 2).sum(axis=-1)
    w = base.grid_weights()
    pref = (4.0 * np.pi) ** (-base.dim / 2.0)
    integrand = w * f["nu"] * np.exp(-d2 / 4.0) * speed ** 2
    if base.kind == "planar_curve":
        return pref * integrand.sum(axis=-1)
    return pref * integrand.sum(axis=(-2, -1))


# ---------------------------------------------------------------------------
# the stepper
# ---------------------------------------------------------------------------


class Stepper:
    """IMEX midpoint engine with a per-(mode, dt) LU cache.

    Operates on batched value arrays; all members of a batch advance with a
    synchronized dyadic step size (the error estimate is the batch maximum),
    so results are deterministic for a fixed batch composition.
    """

    def __init__(self, base, settings=None):
        self.base = base
        self.settings = settings or FlowSettings()
        self.op = assemble_L(base)
        self._lu = {}

    def _factors(self, dt):
        key = dt
        if key not in self._lu:
            blocks = []
            n = self.base.N
            for blk in self.op.blocks:
                blocks.append(scipy.linalg.lu_factor(np.eye(n) - 0.5 * dt * blk))
            self._lu[key] = blocks
        return self._lu[key]

    def _solve(self, dt, RHS):
        """(I - dt/2 L)^{-1} RHS for batched values."""
        base = self.base
        lus = self._factors(dt)
        if base.kind == "planar_curve":
            flat = RHS.reshape(-1, base.N)
            out = scipy.linalg.lu_solve(lus[0], flat.T).T
            return out.reshape(RHS.shape)
        stack = np.fft.rfft(RHS, axis=-2)
        flat = stack.reshape(-1, stack.shape[-2], base.N)
        out = np.empty_like(flat)
        for m in range(stack.shape[-2]):
            rhs = flat[:, m, :].T
            both = np.concatenate([rhs.real, rhs.imag], axis=1)
            sol = scipy.linalg.lu_solve(lus[m], both)
            k = rhs.shape[1]
            out[:, m, :] = (sol[:, :k] + 1j * sol[:, k:]).T
        out = out.reshape(stack.shape)
        return np.fft.irfft(out, n=base.n_theta, axis=-2)

    def substep(self, V, dt, q0=None):
        """One IMEX midpoint step: CN for L, explicit midpoint for Q."""
        if q0 is None:
            q0 = nonlinearity_values(self.base, V, self.op)
        star = self._solve(dt, V + 0.5 * dt * q0)
        return V + 2.0 * (star - V) - dt * q0 \
            + dt * nonlinearity_values(self.base, star, self.op)

    def advance(self, V, t_total, trace=None, escape="raise"):
        """Flow the batch V for time t_total with dyadic step doubling.

        escape="raise" raises FlowEscape when any member leaves the tubular
        neighborhood; escape="freeze" stops updating that member and records
        its exit time in the returned array (nan = completed).
        """
        base = self.base
        st = self.settings
        V = np.array(V, dtype=float)
        batched = V.ndim > base.dim
        nb = V.shape[0] if batched else 1
        escape_time = np.full(nb, np.nan)
        active = np.ones(nb, dtype=bool)

        # dyadic schedule: remaining time = units * dt exactly
        dt = min(st.dt_max, t_total)
        units = int(round(t_total / dt))
        while abs(units * dt - t_total) > 1e-14 * t_total:
            dt *= 0.5
            units *= 2
        t = 0.0
        if trace is not None:
            self._record(trace, t, V, dt)
        while units > 0:
            work = V[active] if batched else V
            q0 = nonlinearity_values(self.base, work, self.op)
            coarse = self.substep(work, dt, q0)
            half = self.substep(work, 0.5 * dt, q0)
            fine = self.substep(half, 0.5 * dt)
            err = np.abs(fine - coarse).max() / 3.0
            if not np.isfinite(err) or err > st.tol_local:
                if dt * 0.5 < st.dt_min:
                    raise FlowError(
                        f"step rejection cascade below dt_min at t = {t}")
                dt *= 0.5
                units *= 2
                continue
            fine = fine + (fine - coarse) / 3.0  # local extrapolation
            if batched:
                V[active] = fine
            else:
                V = fine
            t += dt
            units -= 1
            sup = np.abs(fine).max()
            if sup >= base.reach:
                if escape == "raise":
                    raise FlowEscape("flow left the tubular neighborhood",
                                     state=V.copy(), time=t, trace=trace)
                if batched:
                    member_sup = np.abs(
                        fine.reshape(fine.shape[0], -1)).max(axis=1)
                    idx = np.where(active)[0]
                    gone = idx[member_sup >= base.reach]
                    escape_time[gone] = t
                    active[gone] = False
                    if not active.any():
                        break
                else:
                    escape_time[0] = t
                    break
            if trace is not None:
                self._record(trace, t, V, dt)
            if units % 2 == 0 and err < st.tol_local / 16.0 \
                    and 2.0 * dt <= st.dt_max:
                dt *= 2.0
                units //= 2
        return V, t, escape_time

    def _record(self, trace, t, V, dt):
        base = self.base
        st = self.settings
        fields = graph_pointwise_values(base, V)
        g = grad_frame_values(base, V)
        u = GraphFunction.from_values(base, V)
        trace.times.append(t)
        trace.sup_u.append(float(np.abs(V).max()))
        trace.sup_grad.append(float(np.sqrt(sum(c ** 2 for c in g)).max()))
        trace.sup_hess.append(u.sup_hess())
        k = len(trace.times) - 1
        if k % st.a2_every == 0:
            trace.sup_a2.append(float(
                graph_second_fundamental_sq(base, u).max()))
        else:
            trace.sup_a2.append(trace.sup_a2[-1])
        trace.f_value.append(float(gaussian_area_values(base, V, fields)))
        trace.dt.append(dt)
        qn = nonlinearity_values(base, V, self.op)
        w = base.grid_weights() * base.gauss_weight \
            if base.kind == "planar_curve" \
            else base.grid_weights() * base.gauss_weight[None, :]
        trace.nonlin_norm.append(float(np.sqrt((w * qn ** 2).sum())))
        if k % st.store_every == 0:
            trace.states.append((t, u))


def get_stepper(base, settings=None):
    """Stepper for this base, cached on the base so LU factors persist."""
    cache = getattr(base, "_steppers", None)
    if cache is None:
        cache = {}
        object.__setattr__(base, "_steppers", cache)
    key = tuple(dataclasses.astuple(settings)) if settings else None
    if key not in cache:
        cache[key] = Stepper(base, settings)
    return cache[key]


# ---------------------------------------------------------------------------
# public stepping API
# ---------------------------------------------------------------------------


def step(base, u, dt, settings=None):
    """Advance the graph by exactly dt with internal adaptive substeps."""
    settings = settings or FlowSettings()
    if dt > settings.dt_max:
        raise FlowError(f"dt = {dt} exceeds dt_max = {settings.dt_max}")
    base.check_admissible(u)
    stepper = get_stepper(base, settings)
    V, _, _ = stepper.advance(u.values, dt)
    return GraphFunction.from_values(base, V)


def time_one_map(base, u, settings=None, return_trace=False, t_end=1.0):
    """The time-one rescaled-flow map Psi (time t_end in general).

    Raises FlowEscape if the graph leaves the tubular neighborhood first;
    dynamics experiments catch that as an exit outcome.
    """
    settings = settings or FlowSettings()
    base.check_admissible(u)
    if u.sup() + u.sup_grad() > settings.delta1 or u.sup_hess() > 1.0:
        raise InadmissibleGraphError(
            "initial graph outside the local-existence ball")
    stepper = get_stepper(base, settings)
    trace = FlowTrace(base) if return_trace else None
    try:
        V, _, _ = stepper.advance(u.values, t_end, trace=trace)
    except FlowEscape as esc:
        esc.trace = trace
        raise
    out = GraphFunction.from_values(base, V)
    if return_trace:
        trace.states.append((t_end, out))
        return out, trace
    return out


def flow_batch(base, V0, t_end, settings=None, escape="freeze"):
    """Advance a batch of value arrays; returns (values, escape times)."""
    stepper = get_stepper(base, settings)
    V, _, esc = stepper.advance(np.asarray(V0, dtype=float), t_end,
                                escape=escape)
    return V, esc


# ---------------------------------------------------------------------------
# monitors
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class MonitorReport:
    height_constant: float
    height_ok: bool
    a2_initial: float
    a2_doubling_ok: bool
    f_monotone: bool
    f_max_increase: float
    dissipation_max_mismatch: float

    @property
    def all_ok(self):
        return self.height_ok and self.a2_doubling_ok and self.f_monotone


def monitor_suite(trace, f_slack=1e-12, height_cap=None):
    """Height bound, curvature doubling and Gaussian-area monotonicity.

    The curvature check converts rescaled time t to unrescaled time
    1 - exp(-t) and requires sup |A|^2 <= 2 sup |A(0)|^2 (in unrescaled
    scaling) while the unrescaled clock is below 1/(4 sup |A(0)|^2).
    """
    if not trace.times:
        raise FlowError("empty trace")
    sup0 = trace.sup_u[0]
    sup_all = max(trace.sup_u)
    height_constant = sup_all / sup0 if sup0 > 0 else 1.0
    height_ok = True if height_cap is None else height_constant <= height_cap
    ts = np.asarray(trace.times)
    a2 = np.asarray(trace.sup_a2)
    C = a2[0]
    t_mcf = 1.0 - np.exp(-ts)
    window = t_mcf <= 1.0 / (4.0 * C)
    a2_mcf = a2 / (1.0 - t_mcf)  # curvature of the unrescaled track
    a2_ok = bool((a2_mcf[window] <= 2.0 * C + 1e-9).all()) \
        if window.any() else True
    f = np.asarray(trace.f_value)
    df = np.diff(f)
    f_max_increase = float(df.max()) if df.size else 0.0
    f_monotone = bool((df <= f_slack).all())
    return MonitorReport(height_constant=float(height_constant),
                         height_ok=height_ok,
                         a2_initial=float(C),
                         a2_doubling_ok=a2_ok,
                         f_monotone=f_monotone,
                         f_max_increase=f_max_increase,
                         dissipation_max_mismatch=float("nan"))


# ---------------------------------------------------------------------------
# nonlinearity structure
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class NonlinearityReport:
    r_ladder: tuple
    q_norms: tuple               # Gaussian L2 norms of Q(r u)
    quadratic_constants: tuple   # ||Q(r u)|| / r^2 along the ladder
    ladder_spread: float         # max/min of the quadratic constants
    p_defects: dict              # finite-difference (P1)-(P4) checks


def _gauss_l2(base, values):
    w = base.grid_weights() * (base.gauss_weight if base.kind == "planar_curve"
                               else base.gauss_weight[None, :])
    return float(np.sqrt((w * values ** 2).sum()))


def linearization_check(base, u, r_ladder=(1e-2, 5e-3, 1e-3)):
    """Confirm M(ru) = r L u + O(r^2) with a stable quadratic constant."""
    c1 = u.c1_norm()
    if abs(c1 - 1.0) > 1e-8:
        u = (1.0 / c1) * u
    op = assemble_L(base)
    norms = []
    consts = []
    for r in r_ladder:
        q = nonlinearity_values(base, r * u.values, op)
        n = _gauss_l2(base, q)
        norms.append(n)
        consts.append(n / r ** 2)
    spread = max(consts) / min(consts)
    if spread > 10.0:
        raise FlowError("nonlinearity is not quadratically small in r")
    return NonlinearityReport(r_ladder=tuple(r_ladder), q_norms=tuple(norms),
                              quadratic_constants=tuple(consts),
                              ladder_spread=float(spread),
                              p_defects=structure_defects(base))


def _structure_at(base, node, s, y):
    """The nonlinearity building blocks (f, W, h, V) at tubular (p, s, y)."""
    from .geometry import _tubular_fields
    y = np.asarray(y, dtype=float)
    f = _tubular_fields(base.kappas[node], base.pos_tangent[node],
                        base.pos_normal[node], np.asarray(float(s)), y)
    w, nu, eta = f["w"], f["nu"], f["eta"]
    fbar = 0.5 * w * eta - w ** 2 * f["dnu_ds"] / nu \
        + 0.5 * (base.pos_tangent[node] * y).sum() \
        - base.A2[node] * s - 0.5 * s
    Wbar = (w ** 2 / nu) * f["dnu_dy"] - y
    hbar = 1.0 - w ** 2 / nu
    Vbar = f["dnu_dy"]
    return float(fbar), np.asarray(Wbar, float), float(hbar), \
        np.asarray(Vbar, float)


def structure_defects(base, nodes=None, h=1e-5):
    """Central-difference checks of the vanishing pattern at (p, 0, 0).

    f, W and their first (s, y)-derivatives vanish; h vanishes with
    d_s h = H(p) and zero y-derivative; V vanishes.  f(p,0,0) = 0 is the
    shrinker relation itself.
    """
    if nodes is None:
        nodes = range(0, base.N, max(1, base.N // 16))
    dim = base.dim
    worst = {k: 0.0 for k in
             ("f0", "f_s", "f_y", "W0", "W_s", "W_y", "h0", "h_s_minus_H",
              "h_y", "V0")}
    for node in nodes:
        zero = np.zeros(dim)
        f0, W0, h0, V0 = _structure_at(base, node, 0.0, zero)
        worst["f0"] = max(worst["f0"], abs(f0))
        worst["W0"] = max(worst["W0"], np.abs(W0).max())
        worst["h0"] = max(worst["h0"], abs(h0))
        worst["V0"] = max(worst["V0"], np.abs(V0).max())
        fp, Wp, hp, _ = _structure_at(base, node, h, zero)
        fm, Wm, hm, _ = _structure_at(base, node, -h, zero)
        worst["f_s"] = max(worst["f_s"], abs((fp - fm) / (2 * h)))
        worst["W_s"] = max(worst["W_s"], np.abs((Wp - Wm) / (2 * h)).max())
        worst["h_s_minus_H"] = max(worst["h_s_minus_H"],
                                   abs((hp - hm) / (2 * h) - base.H[node]))
        for a in range(dim):
            ya = np.zeros(dim)
            ya[a] = h
            fp, Wp, hp, _ = _structure_at(base, node, 0.0, ya)
            fm, Wm, hm, _ = _structure_at(base, node, 0.0, -ya)
            worst["f_y"] = max(worst["f_y"], abs((fp - fm) / (2 * h)))
            worst["W_y"] = max(worst["W_y"],
                               np.abs((Wp - Wm) / (2 * h)).max())
            worst["h_y"] = max(worst["h_y"], abs((hp - hm) / (2 * h)))
    return worst


@dataclasses.dataclass
class DecompositionReport:
    reassembly_error_u: float
    reassembly_error_v: float
    p_defects: dict
    diff_f_sup: float
    diff_W_sup: float
    diff_h_sup: float
    diff_V_sup: float


def _structure_fields(base, V):
    f = graph_pointwise_values(base, V)
    y = f["grad"]
    w, nu = f["w"], f["nu"]
    pt = _broadcast_pt(base)
    a2 = base.A2 if base.kind == "planar_curve" else base.A2[None, :]
    fbar = 0.5 * w * f["eta"] - w ** 2 * f["dnu_ds"] / nu \
        + 0.5 * (pt * y).sum(axis=-1) - a2 * V - 0.5 * V
    Wbar = (w ** 2 / nu)[..., None] * f["dnu_dy"] - y
    hbar = 1.0 - w ** 2 / nu
    Vbar = f["dnu_dy"]
    return fbar, Wbar, hbar, Vbar


def _broadcast_pt(base):
    if base.kind == "planar_curve":
        return base.pos_tangent
    return np.broadcast_to(base.pos_tangent, (base.n_theta,) + base.pos_tangent.shape)


def assemble_nonlinearity_from_structure(base, V):
    """Q(u) rebuilt as f + div W + <grad h, V> from the structure fields."""
    fbar, Wbar, hbar, Vbar = _structure_fields(base, V)
    grad_h = np.stack(grad_frame_values(base, hbar), axis=-1)
    return fbar + _div_frame(base, Wbar) + (grad_h * Vbar).sum(axis=-1)


def decompose_nonlinearity(base, u, v, tol=1e-8):
    """Structured difference report for the nonlinearity at u and v."""
    for g, name in ((u, "u"), (v, "v")):
        if g.c1_norm() > 0.2 * base.reach:
            raise InadmissibleGraphError(
                f"graph {name} too large for the structure decomposition")
    op = assemble_L(base)
    errs = []
    for g in (u, v):
        direct = nonlinearity_values(base, g.values, op)
        rebuilt = assemble_nonlinearity_from_structure(base, g.values)
        errs.append(float(np.abs(direct - rebuilt).max()))
    if max(errs) > tol:
        raise FlowError(
            f"nonlinearity reassembly mismatch {max(errs):.3e} exceeds {tol}")
    fu, Wu, hu, Vu = _structure_fields(base, u.values)
    fv, Wv, hv, Vv = _structure_fields(base, v.values)
    return DecompositionReport(
        reassembly_error_u=errs[0], reassembly_error_v=errs[1],
        p_defects=structure_defects(base),
        diff_f_sup=float(np.abs(fu - fv).max()),
        diff_W_sup=float(np.abs(Wu - Wv).max()),
        diff_h_sup=float(np.abs(hu - hv).max()),
        diff_V_sup=float(np.abs(Vu - Vv).max()))
