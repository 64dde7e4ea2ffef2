import numpy as np
import pytest
from scipy.integrate import solve_ivp

from shrinklab import flow as F
from shrinklab import geometry as G
from shrinklab import spectrum as S
from shrinklab.errors import FlowEscape, InadmissibleGraphError

from conftest import smooth_graph

SQRT2 = np.sqrt(2.0)


@pytest.fixture(scope="module")
def circle_eigs(circle_small):
    q = S.assemble_Q(circle_small)
    return S.eigensolve(circle_small, q, 12)


@pytest.fixture(scope="module")
def torus_eigs(torus_flow):
    q = S.assemble_Q(torus_flow)
    return S.eigensolve(torus_flow, q, 12)


# ---------------------------------------------------------------------------
# right-hand side
# ---------------------------------------------------------------------------


def test_rhs_fixed_point(circle_small, torus_flow):
    for base in (circle_small, torus_flow):
        m = F.rhs_M(base, G.GraphFunction.zero(base))
        assert np.abs(m).max() <= 10.0 * base.residual + 1e-14


def test_rhs_concentric_closed_form(circle_small):
    for c in (0.01, -0.1, 0.2):
        u = G.GraphFunction.constant(circle_small, c)
        m = F.rhs_M(circle_small, u)
        exact = (SQRT2 + c) / 2.0 - 1.0 / (SQRT2 + c)
        assert np.abs(m - exact).max() < 1e-13


def test_rhs_value_example(circle_small):
    m = F.rhs_M(circle_small, G.GraphFunction.constant(circle_small, 0.01))
    assert abs(m[0] - 0.0099645) < 5e-7


# ---------------------------------------------------------------------------
# nonlinearity
# ---------------------------------------------------------------------------


def test_nonlinearity_circle_closed_form(circle_small):
    # Q(c) = -c^2 / (2 (sqrt2 + c)); matches -r^2/(2 sqrt2) as r -> 0
    for r in (1e-2, 5e-3, 1e-3):
        q = F.nonlinearity_values(circle_small, np.full(circle_small.N, r))
        assert np.abs(q + r ** 2 / (2.0 * (SQRT2 + r))).max() < 1e-12
    q = F.nonlinearity_values(circle_small, np.full(circle_small.N, 1e-3))
    assert np.abs(q + 1e-6 / (2.0 * SQRT2)).max() < 1e-8


@pytest.mark.parametrize("which", ["circle_small", "torus_flow"])
def test_quadratic_scaling(which, request):
    base = request.getfixturevalue(which)
    for seed in range(3):
        u = smooth_graph(base, 1.0, seed=seed, kmax=3, mmax=2)
        u = (1.0 / u.c1_norm()) * u
        rep = F.linearization_check(base, u, r_ladder=(1e-2, 5e-3, 1e-3))
        # halving r divides the norm by 4 up to the cubic correction
        assert abs(rep.q_norms[0] / rep.q_norms[1] - 4.0) < 0.4
        assert rep.ladder_spread < 1.2


def test_eigenmode_linearization(circle_eigs, circle_small):
    # M(r w_k)/r -> -mu_k w_k with O(r) error
    w = circle_eigs.modes[4].fn  # mu = 1
    mu = circle_eigs.modes[4].mu
    errs = []
    for r in (1e-3, 1e-4):
        m = F.rhs_M(circle_small, r * w) / r
        errs.append(np.abs(m - (-mu) * w.values).max())
    assert errs[1] < errs[0] * 0.2  # first-order in r
    assert errs[1] < 1e-3


def test_structure_defects(circle_small, torus_flow, sphere):
    for base in (circle_small, torus_flow, sphere):
        d = F.structure_defects(base)
        assert d["f0"] <= 10.0 * base.residual + 1e-12
        for key, val in d.items():
            assert val < 1e-6, f"{base.family} {key} = {val}"


def test_decompose_reassembly(circle_small, torus_flow):
    for base in (circle_small, torus_flow):
        u = smooth_graph(base, 1e-3, seed=4, kmax=3, mmax=2)
        v = smooth_graph(base, 1e-3, seed=5, kmax=3, mmax=2)
        rep = F.decompose_nonlinearity(base, u, v)
        assert rep.reassembly_error_u <= 1e-8
        assert rep.reassembly_error_v <= 1e-8
        same = F.decompose_nonlinearity(base, u, u)
        assert same.diff_f_sup == 0.0
        assert same.diff_W_sup == 0.0
        assert same.diff_h_sup == 0.0
        assert same.diff_V_sup == 0.0


def test_structure_h_derivative_is_H(torus_flow):
    # d_s h(p,0,0) = H(p) by central differences
    h = 1e-5
    for node in (0, 17, 63):
        _, _, hp, _ = F._structure_at(torus_flow, node, h, np.zeros(2))
        _, _, hm, _ = F._structure_at(torus_flow, node, -h, np.zeros(2))
        assert abs((hp - hm) / (2 * h) - torus_flow.H[node]) < 1e-6


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------


def test_step_fixed_point(circle_small):
    u = F.step(circle_small, G.GraphFunction.zero(circle_small), 0.05)
    assert np.abs(u.values).max() < 1e-12


def test_step_linear_mode(circle_eigs, circle_small):
    # amplitude follows e^{-mu t} within 1% at small amplitude
    k = 4  # mu = 1
    mode = circle_eigs.modes[k]
    a = 1e-4
    u = a * mode.fn
    t = 0.5
    out = F.step(circle_small, u, 0.05, F.FlowSettings())
    # chain ten steps of 0.05
    for _ in range(9):
        out = F.step(circle_small, out, 0.05)
    amp = circle_eigs.qform.inner(out, mode.fn)
    assert abs(amp / (a * np.exp(-mode.mu * t)) - 1.0) < 1e-2


def test_concentric_ode_oracle(circle_small):
    u = G.GraphFunction.constant(circle_small, 0.01)
    psi = F.time_one_map(circle_small, u)
    sol = solve_ivp(lambda t, y: [y[0] / 2.0 - 1.0 / y[0]], (0.0, 1.0),
                    [SQRT2 + 0.01], rtol=1e-13, atol=1e-15)
    assert np.abs(psi.values - (sol.y[0, -1] - SQRT2)).max() < 1e-8


def test_time_one_fixed_point(circle_small, torus_flow):
    # drift away from the fixed point is set by the shrinker residual,
    # amplified by at most the unstable growth over unit time
    for base in (circle_small, torus_flow):
        psi = F.time_one_map(base, G.GraphFunction.zero(base))
        assert np.abs(psi.values).max() < 1e-10 + 5.0 * base.residual


def test_time_one_requires_existence_ball(circle_small):
    with pytest.raises(InadmissibleGraphError):
        F.time_one_map(circle_small,
                       G.GraphFunction.constant(circle_small, 0.3))


def test_flow_escape_outcome(torus_flow, torus_eigs):
    # an unstable seed of size 0.05 grows by ~e^{3.7} and must leave the tube
    u = 0.05 * torus_eigs.modes[0].fn
    with pytest.raises(FlowEscape) as exc:
        F.time_one_map(torus_flow, u)
    assert exc.value.time is not None and 0.0 < exc.value.time < 1.0


def test_time_one_determinism(torus_flow):
    u = smooth_graph(torus_flow, 1e-3, seed=9)
    a = F.time_one_map(torus_flow, u)
    b = F.time_one_map(torus_flow, u)
    assert np.array_equal(a.values, b.values)


def test_quadratic_remainder_of_psi(circle_eigs, circle_small):
    """||Psi(u) - T(u)||_Q <= C ||u||_Q^2 with stable C across amplitudes."""
    q = circle_eigs.qform
    split = S.make_splitting(circle_eigs)
    w = circle_eigs.modes[0].fn + circle_eigs.modes[1].fn
    settings = F.FlowSettings(tol_local=1e-13)
    ratios = []
    for a in (1e-3, 1e-4):
        u = a * w
        psi = F.time_one_map(circle_small, u, settings)
        Tu, _ = split.apply_T(u)
        ratios.append(q.norm(psi - Tu) / q.norm(u) ** 2)
    assert abs(ratios[0] / ratios[1] - 1.0) < 0.25


def test_two_flow_l2_growth(circle_small):
    """Close flows stay close in Gaussian L2, uniformly over pairs."""
    q = S.assemble_Q(circle_small)
    growth = []
    for seed in range(3):
        u = smooth_graph(circle_small, 1e-3, seed=30 + seed)
        v = u + smooth_graph(circle_small, 1e-5, seed=60 + seed)
        pu = F.time_one_map(circle_small, u)
        pv = F.time_one_map(circle_small, v)
        growth.append(q.gauss_norm(pu - pv) / q.gauss_norm(u - v))
    # bounded by e^C with a C independent of the pair; e itself is the
    # linear-level bound on these modes
    assert max(growth) < np.e * 1.1
    assert max(growth) / min(growth) < 2.0


# ---------------------------------------------------------------------------
# monitors
# ---------------------------------------------------------------------------


def test_monitor_zero_trace(circle_small):
    _, trace = F.time_one_map(circle_small,
                              G.GraphFunction.zero(circle_small),
                              return_trace=True)
    rep = F.monitor_suite(trace)
    assert rep.all_ok
    assert rep.height_constant == 1.0


def test_monitor_decaying_mode(circle_eigs, circle_small):
    mode = next(m for m in circle_eigs.modes if m.mu > 0)
    u = 1e-4 * mode.fn
    _, trace = F.time_one_map(circle_small, u, return_trace=True)
    rep = F.monitor_suite(trace)
    assert rep.f_monotone
    assert rep.height_constant <= 1.05
    assert rep.a2_doubling_ok


def test_monitor_concentric_f_decreasing(circle_small):
    u = G.GraphFunction.constant(circle_small, 0.01)
    _, trace = F.time_one_map(circle_small, u, return_trace=True)
    rep = F.monitor_suite(trace, f_slack=1e-12)
    assert rep.f_monotone
    f = np.asarray(trace.f_value)
    assert f[-1] < f[0]


def test_dissipation_identity(circle_small):
    """One accepted step loses F at the rate of the Gaussian speed integral."""
    u = G.GraphFunction.constant(circle_small, 0.01)
    dt = 1e-3
    out = F.step(circle_small, u, dt)
    F0 = F.gaussian_area_values(circle_small, u.values)
    F1 = F.gaussian_area_values(circle_small, out.values)
    d0 = F.dissipation_values(circle_small, u.values)
    d1 = F.dissipation_values(circle_small, out.values)
    lhs = (F1 - F0) / dt
    rhs = -0.5 * (d0 + d1)
    assert abs(lhs - rhs) <= 0.05 * abs(rhs)


def test_trace_csv_format(tmp_path, circle_small):
    u = G.GraphFunction.constant(circle_small, 0.01)
    _, trace = F.time_one_map(circle_small, u, return_trace=True)
    path = tmp_path / "trace.csv"
    trace.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,sup_u,sup_grad_u,sup_hess_u,sup_A2,F,dt,nonlin_norm"
    assert len(lines) == len(trace.times) + 1
