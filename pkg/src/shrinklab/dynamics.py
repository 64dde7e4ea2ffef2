"""Empirical hyperbolic-dynamics checks for the time-one maps.

Near a non-round shrinker the linearized time-one map T expands the block
E1 (eigenvalues mu < -1) by at least lambda = e^{-mu_j} > e and the rest by
at most e.  The experiments here measure how closely the nonlinear maps
(plain, and balanced through the entropy frame) follow T: the Q-Lipschitz
constant of Psi - T over small balls, preservation of the expanding cone,
the graph property of numerically trapped sets, the rotation-action
estimates, and the generic-escape phenomenology.

Every experiment consumes an explicit integer seed and a fixed
configuration, and is bit-reproducible; samples are drawn on the Q-unit
sphere of the resolved eigenbasis and scaled.
"""

import dataclasses

import numpy as np

from .entropy import balance
from .errors import BalanceError, FlowEscape, GeometryError, ReexpressionError
from .flow import FlowSettings, get_stepper
from .geometry import GraphFunction, rotate_graph, rotation_2d, rotation_3d
from .spectrum import geometric_candidates


# ---------------------------------------------------------------------------
# sampling and map application
# ---------------------------------------------------------------------------


def sample_states(splitting, rng, count, radius, zero_unstable=False,
                  pure_unstable=False):
    """Random states on (the boundary of) the Q-ball of the resolved span."""
    modes = splitting.spectrum.modes
    out = []
    for _ in range(count):
        c = rng.standard_normal(len(modes))
        if zero_unstable:
            for i in splitting.index_unstable:
                c[i] = 0.0
        if pure_unstable:
            keep = np.zeros_like(c)
            for i in splitting.index_unstable:
                keep[i] = c[i]
            c = keep
        u = splitting.from_coefficients(c)
        nrm = splitting.qform.norm(u)
        out.append((radius / nrm) * u)
    return out


class MapRunner:
    """Applies the nonlinear time-one map (optionally balanced) to batches."""

    def __init__(self, base, splitting, kind="psi", settings=None):
        if kind not in ("psi", "psi_gamma", "T"):
            raise GeometryError(f"unknown map kind {kind!r}")
        self.base = base
        self.splitting = splitting
        self.kind = kind
        self.settings = settings or FlowSettings()
        self.stepper = get_stepper(base, self.settings)

    def apply_batch(self, states):
        """Map a list of GraphFunctions; None marks an escaped member."""
        live = [i for i, u in enumerate(states) if u is not None]
        out = [None] * len(states)
        if not live:
            return out
        if self.kind == "T":
            for i in live:
                out[i], _ = self.splitting.apply_T(states[i])
            return out
        V = np.stack([states[i].values for i in live])
        V, _, esc = self.stepper.advance(V, 1.0, escape="freeze")
        for j, i in enumerate(live):
            if np.isfinite(esc[j]):
                continue
            u = GraphFunction.from_values(self.base, V[j])
            if self.kind == "psi_gamma":
                try:
                    u = balance(self.base, u)
                except (BalanceError, ReexpressionError):
                    u = None
            out[i] = u
        return out

    def apply(self, u):
        return self.apply_batch([u])[0]


# ---------------------------------------------------------------------------
# rotation orbit distance
# ---------------------------------------------------------------------------


class RotationOrbit:
    """Quadratic model of the rotated-base orbit, per rotation axis.

    rotate(theta) ~= theta Z1 + theta^2 Z2 as a graph over the base; the
    distance from a state to the orbit is minimized per axis with a
    golden-section search on the model.
    """

    def __init__(self, base, qform, delta=1e-3):
        self.base = base
        self.qform = qform
        self.axes = []
        axes = [None] if base.kind == "planar_curve" else [[1.0, 0.0, 0.0],
                                                           [0.0, 1.0, 0.0]]
        zero = GraphFunction.zero(base)
        for ax in axes:
            if base.kind == "planar_curve":
                gp = rotate_graph(base, rotation_2d(delta), zero)
                gm = rotate_graph(base, rotation_2d(-delta), zero)
            else:
                gp = rotate_graph(base, rotation_3d(ax, delta), zero)
                gm = rotate_graph(base, rotation_3d(ax, -delta), zero)
            z1 = (1.0 / (2.0 * delta)) * (gp - gm)
            z2 = (1.0 / (2.0 * delta ** 2)) * (gp + gm)
            if qform.norm(z1) > 1e-8:
                self.axes.append((z1, z2))

    def distance(self, u, theta_max=0.5, xtol=1e-10):
        """Q-distance from u to the modeled rotation orbit of the base.

        Along each axis the squared distance is an explicit quartic in the
        rotation parameter, so the golden-section search runs on
        precomputed inner products.
        """
        q = self.qform
        best = u
        for z1, z2 in self.axes:
            c0 = q.inner(best, best)
            c1 = q.inner(best, z1)
            c2 = q.inner(best, z2)
            n1 = q.inner(z1, z1)
            n12 = q.inner(z1, z2)
            n2 = q.inner(z2, z2)

            def dist2(th):
                return (c0 - 2.0 * th * c1 + th * th * (n1 - 2.0 * c2)
                        + 2.0 * th ** 3 * n12 + th ** 4 * n2)

            th = _golden_min(dist2, -theta_max, theta_max, xtol)
            best = best - th * z1 - th ** 2 * z2
        return q.norm(best)


def _golden_min(f, a, b, xtol=1e-10):
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > xtol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


# ---------------------------------------------------------------------------
# Q-Lipschitz calibration of Psi - T
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class ConeReport:
    radius: float
    n_pairs: int
    n_dropped: int
    eps: float                    # sup ||(Psi-T)x - (Psi-T)y|| / ||x-y||
    eps_half_radius: float        # same measurement at r/2
    lambda_expand: float
    mu_contract: float
    lambda_eff: float             # lambda - 2 eps
    mu_eff: float                 # mu + 2 eps
    cone_condition_ok: bool       # lambda-2eps > 1 and ratio > 1
    pair_ratios: tuple

    def rows(self):
        return [(i, r) for i, r in enumerate(self.pair_ratios)]


def _pair_set(splitting, rng, radius, n_pairs):
    """Mixed random and eigen-aligned pairs inside the Q-ball of radius r."""
    pairs = []
    modes = splitting.spectrum.modes
    q = splitting.qform
    states = sample_states(splitting, rng, n_pairs, radius)
    for k, x in enumerate(states):
        if k % 3 == 0:
            y = sample_states(splitting, rng, 1, radius)[0]
        elif k % 3 == 1:
            d = sample_states(splitting, rng, 1, radius)[0]
            y = x + (0.1 * radius / q.norm(d)) * d
        else:
            w = modes[int(rng.integers(len(modes)))].fn
            y = x + (0.1 * radius) * w
        ny = q.norm(y)
        if ny > radius:
            y = (radius / ny) * y
        pairs.append((x, y))
    return pairs


def _measure_eps(base, splitting, kind, radius, n_pairs, rng, settings):
    runner = MapRunner(base, splitting, kind, settings)
    q = splitting.qform
    pairs = _pair_set(splitting, rng, radius, n_pairs)
    flat = [u for pair in pairs for u in pair]
    mapped = runner.apply_batch(flat)
    ratios = []
    dropped = 0
    for k in range(n_pairs):
        px, py = mapped[2 * k], mapped[2 * k + 1]
        if px is None or py is None:
            dropped += 1
            continue
        x, y = pairs[k]
        Tx, _ = splitting.apply_T(x)
        Ty, _ = splitting.apply_T(y)
        dx, dy = px - Tx, py - Ty
        denom = q.norm(x - y)
        if denom < 1e-14:
            continue
        ratios.append(q.norm(dx - dy) / denom)
    return ratios, dropped


def calibrate_lipschitz(base, splitting, kind="psi", radius=1e-3,
                        n_pairs=30, seed=0, settings=None):
    """Measured Q-Lipschitz constant of Psi - T over the ball B_radius."""
    if n_pairs < 30:
        raise GeometryError("need at least 30 pairs for calibration")
    rng = np.random.default_rng(seed)
    ratios, dropped = _measure_eps(base, splitting, kind, radius, n_pairs,
                                   rng, settings)
    eps = max(ratios) if ratios else float("nan")
    rng_half = np.random.default_rng(seed + 1)
    ratios_half, _ = _measure_eps(base, splitting, kind, radius / 2.0,
                                  n_pairs, rng_half, settings)
    eps_half = max(ratios_half) if ratios_half else float("nan")
    lam = splitting.lambda_expand
    mu = splitting.mu_contract
    lam_eff = lam - 2.0 * eps
    mu_eff = mu + 2.0 * eps
    ok = bool(lam_eff > 1.0 and lam_eff / mu_eff > 1.0)
    return ConeReport(radius=radius, n_pairs=n_pairs, n_dropped=dropped,
                      eps=float(eps), eps_half_radius=float(eps_half),
                      lambda_expand=lam, mu_contract=mu,
                      lambda_eff=float(lam_eff), mu_eff=float(mu_eff),
                      cone_condition_ok=ok, pair_ratios=tuple(ratios))


# ---------------------------------------------------------------------------
# cone preservation
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class ConeCheckOutcome:
    n_pairs: int
    n_excluded: int        # pairs that violated the cone hypothesis
    n_dropped: int
    n_falsifiers: int
    margins: tuple         # min of the two inequality margins per pair


def cone_check(base, splitting, kind="psi", radius=1e-3, n_pairs=100,
               seed=1, eps=None, settings=None):
    """Verify the two cone inequalities on conforming pairs.

    For pairs with ||x1 - y1||_Q >= ||x2 - y2||_Q the mapped pair must
    satisfy ||P1(Mx - My)|| >= (lambda - 2 eps) ||x1 - y1|| >= ||P2(Mx - My)||.
    """
    if eps is None:
        raise GeometryError("cone_check needs the calibrated eps")
    lam_eff = splitting.lambda_expand - 2.0 * eps
    mu_eff = splitting.mu_contract + 2.0 * eps
    if not (lam_eff > 1.0 and lam_eff / mu_eff > 1.0):
        raise GeometryError("calibrated eps violates the cone margins")
    rng = np.random.default_rng(seed)
    q = splitting.qform
    runner = MapRunner(base, splitting, kind, settings)
    pairs = []
    excluded = 0
    while len(pairs) < n_pairs:
        x = sample_states(splitting, rng, 1, 0.5 * radius)[0]
        d1 = sample_states(splitting, rng, 1, 1.0, pure_unstable=True)[0]
        d2 = sample_states(splitting, rng, 1, 1.0, zero_unstable=True)[0]
        t2 = rng.uniform(0.0, 1.0)
        d = d1 + t2 * d2
        y = x + (0.3 * radius / q.norm(d)) * d
        p1 = splitting.project(x - y, 1)
        p2 = splitting.project(x - y, 2)
        if q.norm(p1) < q.norm(p2):
            excluded += 1
            continue
        pairs.append((x, y))
    flat = [u for pair in pairs for u in pair]
    mapped = runner.apply_batch(flat)
    margins = []
    falsifiers = 0
    dropped = 0
    for k, (x, y) in enumerate(pairs):
        px, py = mapped[2 * k], mapped[2 * k + 1]
        if px is None or py is None:
            dropped += 1
            continue
        d1 = q.norm(splitting.project(x - y, 1))
        m1 = q.norm(splitting.project(px - py, 1))
        m2 = q.norm(splitting.project(px - py, 2))
        lower = m1 - lam_eff * d1
        upper = lam_eff * d1 - m2
        margins.append(min(lower, upper))
        if lower < 0 or upper < 0:
            falsifiers += 1
    return ConeCheckOutcome(n_pairs=len(pairs), n_excluded=excluded,
                            n_dropped=dropped, n_falsifiers=falsifiers,
                            margins=tuple(margins))


# ---------------------------------------------------------------------------
# trapped set probe
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class TrappedReport:
    radius: float
    horizon: int
    amplitude: float
    n_samples: int
    n_trapped: int
    trapped_fraction: float
    qlips_falsifiers: int
    graph_lipschitz: float       # fitted E2 -> E1 graph constant
    exit_steps: tuple            # per sample; horizon+1 if trapped
    predicted_exit: tuple        # rate-based bound for unstable seeds


def trapped_set_probe(base, splitting, kind="psi_gamma", radius=0.1,
                      horizon=20, n_samples=20, amplitude=1e-4, seed=2,
                      unstable_fraction=0.5, settings=None,
                      orbit_min=None):
    """Iterate seeds and test the graph property of the trapped set.

    Half the seeds (by default) have no component in the expanding block and
    should stay trapped; the rest carry unstable amplitude and must exit on
    the e^{-mu_1 n} schedule.  Trapped pairs are checked against the
    cone-complement inequality ||x2-y2|| >= ||x1-y1||.
    """
    if horizon < 20:
        raise GeometryError("horizon must be at least 20 iterates")
    rng = np.random.default_rng(seed)
    q = splitting.qform
    runner = MapRunner(base, splitting, kind, settings)
    if orbit_min is None:
        orbit_min = kind == "psi_gamma"
    orbit = RotationOrbit(base, q) if orbit_min else None
    n_unstable = int(round(unstable_fraction * n_samples))
    seeds = sample_states(splitting, rng, n_samples - n_unstable, amplitude,
                          zero_unstable=True)
    seeds += sample_states(splitting, rng, n_unstable, amplitude)
    exit_step = np.full(n_samples, horizon + 1, dtype=int)
    states = list(seeds)
    for n in range(1, horizon + 1):
        states = runner.apply_batch(states)
        for i, u in enumerate(states):
            if exit_step[i] <= horizon:
                states[i] = None
                continue
            if u is None:
                exit_step[i] = n
                continue
            nrm = orbit.distance(u) if orbit is not None else q.norm(u)
            if nrm > radius:
                exit_step[i] = n
                states[i] = None
    trapped_idx = [i for i in range(n_samples) if exit_step[i] > horizon]
    falsifiers = 0
    lips = 0.0
    for a in range(len(trapped_idx)):
        for b in range(a + 1, len(trapped_idx)):
            x, y = seeds[trapped_idx[a]], seeds[trapped_idx[b]]
            d1 = q.norm(splitting.project(x - y, 1))
            d2 = q.norm(splitting.project(x - y, 2))
            if d1 > d2 * (1.0 + 1e-9) + 1e-13 * amplitude:
                falsifiers += 1
            if d2 > 1e-14:
                lips = max(lips, d1 / d2)
    mu1 = -np.log(splitting.lambda_expand)
    predicted = []
    for i in range(n_samples):
        a1 = q.norm(splitting.project(seeds[i], 1))
        if a1 > 1e-12 * amplitude:
            predicted.append(int(np.ceil(np.log(radius / a1) / (-mu1))) + 3)
        else:
            predicted.append(horizon + 1)
    return TrappedReport(radius=radius, horizon=horizon, amplitude=amplitude,
                         n_samples=n_samples, n_trapped=len(trapped_idx),
                         trapped_fraction=len(trapped_idx) / n_samples,
                         qlips_falsifiers=falsifiers,
                         graph_lipschitz=float(lips),
                         exit_steps=tuple(int(v) for v in exit_step),
                         predicted_exit=tuple(predicted))


# ---------------------------------------------------------------------------
# group action checks
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class GroupActionReport:
    commutator_sup: float          # sup ||Psi(g u) - g(Psi u)||_Q
    bilipschitz_low: float
    bilipschitz_high: float
    gyx1_factors: dict             # radius -> sup ||gv - gu|| / ||v - u||
    gyx2_eps: dict                 # radius -> needed eps in the E1 bound
    transversality: tuple          # (norm, orbit distance) samples
    transversality_slope: float    # fitted lower-envelope slope


def group_action_check(base, splitting, angles=(1e-3, -1e-3), radius=1e-3,
                       seed=3, settings=None, n_samples=6):
    """(R0)-(R2)-type measurements for the rotation action."""
    rng = np.random.default_rng(seed)
    q = splitting.qform
    runner = MapRunner(base, splitting, "psi", settings)
    if base.kind == "planar_curve":
        rots = [rotation_2d(a) for a in angles]
    else:
        rots = [rotation_3d([1.0, 0.0, 0.0], a) for a in angles]

    states = sample_states(splitting, rng, n_samples, radius)
    # (R0): commutation and bi-Lipschitz bounds
    comm = 0.0
    lo, hi = np.inf, 0.0
    for u in states[:3]:
        for g in rots:
            gu = rotate_graph(base, g, u)
            a = runner.apply(gu)
            b = rotate_graph(base, g, runner.apply(u))
            if a is None or b is None:
                continue
            comm = max(comm, q.norm(a - b))
            for v in states[:2]:
                gv = rotate_graph(base, g, v)
                num = q.norm(gv - gu)
                den = q.norm(v - u)
                if den > 1e-14:
                    lo = min(lo, num / den)
                    hi = max(hi, num / den)
    # (R2): one-sided expansion factors at two radii
    gyx1 = {}
    gyx2 = {}
    for rad in (radius, radius / 2.0):
        worst1 = 0.0
        worst2 = 0.0
        pts = sample_states(splitting, rng, n_samples, rad)
        for g in rots[:1]:
            gs = [rotate_graph(base, g, u) for u in pts]
            for i in range(len(pts)):
                for j in range(i + 1, len(pts)):
                    du = q.norm(pts[i] - pts[j])
                    if du < 1e-14:
                        continue
                    worst1 = max(worst1, q.norm(gs[i] - gs[j]) / du)
                    p1 = q.norm(splitting.project(pts[i] - pts[j], 1))
                    gp1 = q.norm(splitting.project(gs[i] - gs[j], 1))
                    worst2 = max(worst2, (p1 - gp1) / du)
        gyx1[rad] = worst1
        gyx2[rad] = max(worst2, 0.0)
    # (R1): expanding-dominant states stay away from the rotation orbit
    orbit = RotationOrbit(base, q)
    trans = []
    for t in (0.25, 0.5, 1.0):
        x = sample_states(splitting, rng, 1, t * radius,
                          pure_unstable=True)[0]
        trans.append((t * radius, orbit.distance(x)))
    slopes = [d / n for n, d in trans if n > 0]
    return GroupActionReport(
        commutator_sup=float(comm), bilipschitz_low=float(lo),
        bilipschitz_high=float(hi), gyx1_factors=gyx1, gyx2_eps=gyx2,
        transversality=tuple(trans),
        transversality_slope=float(min(slopes)))


# ---------------------------------------------------------------------------
# escape experiment
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class EscapeSample:
    index: int
    a1: float                 # initial unstable amplitude
    e1_energy: float
    e2_energy: float
    exit_step: int            # horizon+1 when never exited
    exit_norm: float
    e1_fraction_exit: float
    orbit_distance_exit: float


@dataclasses.dataclass
class EscapeReport:
    map_kind: str
    radius: float
    amplitude: float
    horizon: int
    seed: int
    n_samples: int
    n_exited: int
    escape_fraction: float
    fitted_slope: float        # exit step vs log(1/a1)
    predicted_slope: float     # 1 / (-mu_1)
    samples: tuple

    CSV_HEADER = ("index,a1,e1_energy,e2_energy,exit_step,exit_norm,"
                  "e1_fraction_exit,orbit_distance_exit")

    def write_csv(self, path):
        lines = [self.CSV_HEADER]
        for s in self.samples:
            lines.append(",".join(f"{v:.17g}" if isinstance(v, float)
                                  else str(v) for v in
                                  (s.index, s.a1, s.e1_energy, s.e2_energy,
                                   s.exit_step, s.exit_norm,
                                   s.e1_fraction_exit,
                                   s.orbit_distance_exit)))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def escape_experiment(base, splitting, kind="psi_gamma", radius=0.1,
                      n_samples=100, horizon=30, amplitude=1e-3, seed=7,
                      settings=None):
    """Iterate random seeds and record when and how they leave the ball."""
    if splitting.dim_unstable < 1:
        raise GeometryError("escape experiment needs an expanding block")
    rng = np.random.default_rng(seed)
    q = splitting.qform
    runner = MapRunner(base, splitting, kind, settings)
    orbit = RotationOrbit(base, q)
    seeds = sample_states(splitting, rng, n_samples, amplitude)
    a1 = np.array([q.norm(splitting.project(u, 1)) for u in seeds])
    e1_0 = a1 ** 2
    e2_0 = np.array([q.norm(splitting.project(u, 2)) for u in seeds]) ** 2
    exit_step = np.full(n_samples, horizon + 1, dtype=int)
    exit_norm = np.zeros(n_samples)
    e1_frac = np.zeros(n_samples)
    orbit_d = np.zeros(n_samples)
    states = list(seeds)
    prev = list(seeds)
    for n in range(1, horizon + 1):
        states = runner.apply_batch(states)
        for i, u in enumerate(states):
            if exit_step[i] <= horizon:
                states[i] = None
                continue
            if u is None:
                # left the tubular neighborhood mid-flow: that is an exit
                exit_step[i] = n
                ref = prev[i]
                exit_norm[i] = float("inf")
                p1 = q.norm(splitting.project(ref, 1))
                e1_frac[i] = p1 / max(q.norm(ref), 1e-300)
                orbit_d[i] = orbit.distance(ref)
                continue
            nrm = q.norm(u)
            if kind == "psi_gamma":
                nrm = min(nrm, orbit.distance(u))
            if nrm > radius:
                exit_step[i] = n
                exit_norm[i] = nrm
                p1 = q.norm(splitting.project(u, 1))
                e1_frac[i] = p1 / q.norm(u)
                try:
                    bal = balance(base, u) if kind == "psi" else u
                    orbit_d[i] = orbit.distance(bal)
                except (BalanceError, ReexpressionError):
                    orbit_d[i] = float("nan")
                states[i] = None
        prev = [u if u is not None else p for u, p in zip(states, prev)]
        if all(u is None for u in states):
            break
    exited = exit_step <= horizon
    mu1 = -np.log(splitting.lambda_expand)
    mask = exited & (a1 > 1e-12 * amplitude)
    if mask.sum() >= 2:
        xs = np.log(1.0 / a1[mask])
        ys = exit_step[mask].astype(float)
        slope = float(np.polyfit(xs, ys, 1)[0])
    else:
        slope = float("nan")
    samples = tuple(
        EscapeSample(index=i, a1=float(a1[i]), e1_energy=float(e1_0[i]),
                     e2_energy=float(e2_0[i]), exit_step=int(exit_step[i]),
                     exit_norm=float(exit_norm[i]),
                     e1_fraction_exit=float(e1_frac[i]),
                     orbit_distance_exit=float(orbit_d[i]))
        for i in range(n_samples))
    return EscapeReport(map_kind=kind, radius=radius, amplitude=amplitude,
                        horizon=horizon, seed=seed, n_samples=n_samples,
                        n_exited=int(exited.sum()),
                        escape_fraction=float(exited.mean()),
                        fitted_slope=slope,
                        predicted_slope=float(1.0 / (-mu1)),
                        samples=samples)
