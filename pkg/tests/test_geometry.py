import numpy as np
import pytest

from shrinklab import geometry as G
from shrinklab.errors import (
    GeometryError,
    ReexpressionError,
    ShootingError,
)
from shrinklab.spectral import TrigInterp1D

from conftest import smooth_graph

SQRT2 = np.sqrt(2.0)


# ---------------------------------------------------------------------------
# round shrinkers
# ---------------------------------------------------------------------------


def test_round_circle(circle):
    assert circle.residual < 1e-12
    r = np.linalg.norm(circle.profile, axis=1)
    assert np.abs(r - SQRT2).max() < 1e-13
    assert np.abs(circle.H - 1.0 / SQRT2).max() < 1e-12
    # outward normal
    assert np.einsum("ij,ij->i", circle.profile, circle.normal2d).min() > 0


def test_round_sphere(sphere):
    assert sphere.residual < 1e-12
    assert np.abs(sphere.H - 1.0).max() < 1e-11
    assert np.abs(sphere.A2 - 0.5).max() < 1e-11
    assert abs(sphere.area_weight.sum() - 16 * np.pi) < 1e-10 * 16 * np.pi


def test_circle_weight_sum_n64():
    c = G.build_round("circle", 64)
    exact = 2.0 * np.pi * SQRT2
    assert abs(c.area_weight.sum() - exact) <= 1e-10 * exact


def test_round_rejects_bad_node_count():
    with pytest.raises(GeometryError):
        G.build_round("circle", 100)
    with pytest.raises(GeometryError):
        G.build_round("circle", 32)


def test_weights_positive(circle, sphere, torus, al32):
    for b in (circle, sphere, torus, al32):
        assert b.area_weight.min() > 0


# ---------------------------------------------------------------------------
# shooting
# ---------------------------------------------------------------------------


def test_angenent_torus(torus):
    assert torus.residual < 1e-8
    assert torus.profile[:, 0].min() > 0
    # forced symmetry about z = 0
    z = torus.profile[:, 1]
    assert np.abs(z + np.roll(z[::-1], 1)).max() < 1e-12
    # published Gaussian-area anchor for the shrinking donut
    F = G.gaussian_quadrature(torus, G.GraphFunction.zero(torus))
    assert abs(F - 1.8512167) < 1e-5


def test_abresch_langer_32(al32):
    assert al32.residual < 1e-8
    # curvature repeats with the three-fold symmetry
    ki = TrigInterp1D(al32.H, al32.period)
    sq = np.linspace(0.0, al32.period, 333, endpoint=False)
    assert np.abs(ki(sq) - ki(sq + al32.period / 3.0)).max() < 1e-9
    # rotation index 2: total clockwise turning is -4 pi
    turning = -(al32.H * al32.area_weight).sum()
    assert abs(turning + 4.0 * np.pi) < 1e-9


def test_abresch_langer_degenerate_circle():
    b = G.shoot_shrinker_profile("abresch_langer", (2, 1), N=128)
    r = np.linalg.norm(b.profile, axis=1)
    assert np.abs(r - SQRT2).max() < 1e-12


def test_abresch_langer_rejects_inadmissible():
    with pytest.raises(ShootingError):
        G.shoot_shrinker_profile("abresch_langer", (3, 1), N=128)
    with pytest.raises(ShootingError):
        G.shoot_shrinker_profile("abresch_langer", (4, 3), N=128)


# ---------------------------------------------------------------------------
# tubular quantities
# ---------------------------------------------------------------------------


def _fd1(f, h=1e-5):
    return (f(h) - f(-h)) / (2.0 * h)


def taylor_table_defects(base, node):
    """All first/second order identities of the offset geometry at one node."""
    dim = base.dim
    zero = np.zeros(dim)

    def q(s, y):
        return G.tubular_quantities(base, node, s, y)

    t0 = q(0.0, zero)
    out = {
        "nu(0)=1": t0.nu - 1.0,
        "w(0)=1": t0.w - 1.0,
        "eta(0)=<p,n>": t0.eta - base.pos_normal[node],
        "ds_nu=H": _fd1(lambda h: q(h, zero).nu) - base.H[node],
        "ds_eta=1": _fd1(lambda h: q(h, zero).eta) - 1.0,
        # second s-derivative via the analytic first derivative
        "ds2_nu=H^2-|A|^2": _fd1(lambda h: q(h, zero).dnu_ds)
        - (base.H[node] ** 2 - base.A2[node]),
    }
    s_probe = 0.3 * base.reach
    out["w(s,0)=1"] = q(s_probe, zero).w - 1.0
    out["ds_w(s,0)=0"] = _fd1(lambda h: q(s_probe + h, zero).w)
    for a in range(dim):
        ya = np.zeros(dim)

        def qy(h, a=a):
            y = np.zeros(dim)
            y[a] = h
            return q(0.0, y)

        out[f"dy{a}_nu=0"] = _fd1(lambda h: qy(h).nu)
        out[f"dy{a}_w=0"] = _fd1(lambda h: qy(h).w)
        out[f"dy{a}_eta=-p_{a}"] = _fd1(lambda h: qy(h).eta) \
            + base.pos_tangent[node][a]
        for b in range(dim):
            def qyy(h, a=a, b=b):
                y = np.zeros(dim)
                y[a] += h
                return q(0.0, y).dnu_dy[b]

            out[f"dy{a}dy{b}_nu=delta"] = _fd1(qyy) - float(a == b)
        # second y-derivative of w via plain second differences, larger step
        h2 = 1e-4
        ypa = np.zeros(dim)
        ypa[a] = h2
        d2w = (q(0.0, ypa).w - 2.0 * t0.w + q(0.0, -ypa).w) / h2 ** 2
        out[f"dy{a}2_w=1"] = d2w - 1.0
    return out


@pytest.mark.parametrize("which", ["circle", "sphere", "torus", "al32"])
def test_taylor_table(which, request):
    base = request.getfixturevalue(which)
    rng = np.random.default_rng(11)
    for node in rng.integers(0, base.N, 8):
        defects = taylor_table_defects(base, int(node))
        for name, val in defects.items():
            assert abs(val) < 1e-6, f"{which} node {node}: {name} off by {val}"


def test_speed_over_area_ratio_depends_only_on_s(torus):
    rng = np.random.default_rng(3)
    for node in rng.integers(0, torus.N, 5):
        s = 0.4 * torus.reach
        vals = []
        for _ in range(4):
            y = rng.normal(size=2) * 0.5
            t = G.tubular_quantities(torus, int(node), s, y)
            vals.append(t.w / t.nu)
        assert np.ptp(vals) < 1e-10


def test_tubular_concentric_circle(circle):
    c = 0.3
    t = G.tubular_quantities(circle, 17, c, [0.0])
    assert abs(t.nu - (SQRT2 + c) / SQRT2) < 1e-12
    assert abs(t.eta - (SQRT2 + c)) < 1e-12
    assert abs(t.w - 1.0) < 1e-14


def test_tubular_reach_enforced(circle):
    with pytest.raises(GeometryError):
        G.tubular_quantities(circle, 0, 2.0 * circle.reach, [0.0])


# ---------------------------------------------------------------------------
# graph mean curvature
# ---------------------------------------------------------------------------


def test_graph_h_zero_is_base(circle, sphere, torus):
    for b in (circle, sphere, torus):
        H = G.graph_mean_curvature(b, G.GraphFunction.zero(b))
        target = b.H if b.kind == "planar_curve" else b.H[None, :]
        assert np.abs(H - target).max() < 1e-10


def test_graph_h_concentric(circle):
    for c in (0.0, 0.1, -0.2):
        u = G.GraphFunction.constant(circle, c)
        H = G.graph_mean_curvature(circle, u)
        assert np.abs(H - 1.0 / (SQRT2 + c)).max() < 1e-12


def test_linearized_mean_curvature(circle, torus):
    # (H_{tu} - H_0)/t -> -Lap u - |A|^2 u, Richardson from t = 1e-3, 1e-4
    for base in (circle, torus):
        u = smooth_graph(base, 1.0, seed=5, kmax=3, mmax=2)
        u = (1.0 / u.e_norm()) * u
        H0 = G.graph_mean_curvature(base, G.GraphFunction.zero(base))
        lap = base.field_ds(u.values, order=2)
        if base.kind == "rot_surface":
            r = base.profile[:, 0][None, :]
            lap = lap + base.drds_over_r[None, :] * base.field_ds(u.values) \
                + base.field_dtheta(u.values, order=2) / r ** 2
        a2 = base.A2 if base.kind == "planar_curve" else base.A2[None, :]
        target = -lap - a2 * u.values
        vals = []
        for t in (1e-3, 1e-4):
            Ht = G.graph_mean_curvature(base, t * u)
            vals.append((Ht - H0) / t)
        rich = (10.0 * vals[1] - vals[0]) / 9.0
        assert np.abs(rich - target).max() < 1e-5


# ---------------------------------------------------------------------------
# re-expression and rotations
# ---------------------------------------------------------------------------


def test_reexpress_identity(circle):
    u = smooth_graph(circle, 1e-3, seed=1)
    w = G.normal_graph_reexpress(circle, u, u)
    assert np.abs(w.values).max() < 1e-13


def test_reexpress_concentric(circle):
    v = G.GraphFunction.constant(circle, 0.05)
    w = G.normal_graph_reexpress(circle, G.GraphFunction.zero(circle), v)
    assert np.abs(w.values - 0.05).max() < 1e-13


@pytest.mark.parametrize("which", ["circle", "torus_flow"])
def test_reexpress_closeness_and_roundtrip(which, request):
    base = request.getfixturevalue(which)
    u = smooth_graph(base, 1e-3, seed=2)
    v = smooth_graph(base, 1e-3, seed=3)
    w = G.normal_graph_reexpress(base, u, v)
    diff = v.values - u.values
    assert np.abs(w.values - diff).max() <= 1e-4 * np.abs(diff).max()
    # express the same surface back over the zero graph; recover v
    cloud = G.embed_normal_offset(base, u, w.values)
    back = G._reexpress_cloud(base, G.GraphFunction.zero(base), cloud)
    assert np.abs(back - v.values).max() < 1e-9


def test_rotate_identity(torus_flow):
    u = smooth_graph(torus_flow, 1e-3, seed=4)
    v = G.rotate_graph(torus_flow, np.eye(3), u)
    assert np.abs(v.values - u.values).max() < 1e-12


def test_rotate_circle_symmetry(circle):
    u = G.GraphFunction.constant(circle, 0.02)
    v = G.rotate_graph(circle, G.rotation_2d(0.7), u)
    assert np.abs(v.values - 0.02).max() < 1e-12


def test_rotate_torus_first_order(torus_flow):
    ang = 1e-3
    g = G.rotation_3d([1.0, 0.0, 0.0], ang)
    up = G.rotate_graph(torus_flow, g, G.GraphFunction.zero(torus_flow))
    Z = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    zfield = np.einsum("tnc,tnc->tn", torus_flow.x3d @ Z.T, torus_flow.n3d)
    assert np.abs(up.values - ang * zfield).max() <= 1e-5


@pytest.mark.parametrize("ang", [1e-2, 1e-3])
def test_rotate_roundtrip(torus_flow, ang):
    u = smooth_graph(torus_flow, 1e-3, seed=6)
    g = G.rotation_3d([0.0, 1.0, 0.0], ang)
    gi = G.rotation_3d([0.0, 1.0, 0.0], -ang)
    v = G.rotate_graph(torus_flow, gi, G.rotate_graph(torus_flow, g, u))
    assert np.abs(v.values - u.values).max() < 1e-9


def test_rotate_large_rotation_fails_on_sphere(sphere):
    with pytest.raises(ReexpressionError):
        G.rotate_graph(sphere, G.rotation_3d([0, 1, 0], 0.5),
                       G.GraphFunction.zero(sphere))


# ---------------------------------------------------------------------------
# cache files
# ---------------------------------------------------------------------------


def test_geometry_cache_roundtrip(tmp_path, circle, torus_flow):
    for b in (circle, torus_flow):
        path = tmp_path / f"{b.family}.geom"
        G.save_geometry(b, path)
        b2 = G.load_geometry(path)
        assert b2.kind == b.kind
        assert np.abs(b2.profile - b.profile).max() == 0.0
        assert np.abs(b2.H - b.H).max() < 1e-9
        assert abs(b2.residual - b.residual) < 1e-10
        header = path.read_text().splitlines()[0]
        assert header.startswith("shrinklab-geom v1")
