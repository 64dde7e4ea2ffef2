import numpy as np
import pytest

from shrinklab import geometry as G
from shrinklab import spectrum as S
from shrinklab.errors import SpectralError

from conftest import smooth_graph


@pytest.fixture(scope="module")
def circle_spec(circle):
    q = S.assemble_Q(circle)
    return S.eigensolve(circle, q, 24)


@pytest.fixture(scope="module")
def sphere_spec(sphere):
    q = S.assemble_Q(sphere)
    return S.eigensolve(sphere, q, 40)


@pytest.fixture(scope="module")
def torus_spec(torus):
    q = S.assemble_Q(torus)
    return S.eigensolve(torus, q, 40)


@pytest.fixture(scope="module")
def torus_split(torus_spec):
    return S.make_splitting(torus_spec)


# ---------------------------------------------------------------------------
# operator
# ---------------------------------------------------------------------------


def test_L_on_constants_circle(circle):
    L = S.assemble_L(circle)
    one = G.GraphFunction.constant(circle, 1.0)
    assert np.abs(L(one).values - 1.0).max() < 1e-10


def test_L_separation_circle(circle):
    # L cos(k theta) = (1 - k^2/2) cos(k theta) on the radius-sqrt(2) circle
    L = S.assemble_L(circle)
    th = 2.0 * np.pi * np.arange(circle.N) / circle.N
    for k in (1, 2, 5):
        u = G.GraphFunction.from_values(circle, np.cos(k * th))
        out = L(u).values
        assert np.abs(out - (1.0 - k * k / 2.0) * np.cos(k * th)).max() < 1e-9


@pytest.mark.parametrize("which", ["circle", "sphere", "torus", "al32"])
def test_geometric_eigenfields(which, request):
    """L H = H, L <v,n> = <v,n>/2, L <z,n> = 0, all relative 1e-7."""
    base = request.getfixturevalue(which)
    q = S.assemble_Q(base)
    L = S.assemble_L(base)
    expected = {"dilation": -1.0, "translation": -0.5, "rotation": 0.0}
    checked = 0
    for name, g in S.geometric_candidates(base).items():
        nrm = q.gauss_norm(g)
        if nrm < 1e-10:
            continue  # field vanishes identically (axial rotation etc.)
        mu = expected[name.split("_")[0]]
        resid = q.gauss_norm(G.GraphFunction.from_values(
            base, L(g).values + mu * g.values))
        assert resid <= 1e-7 * nrm, f"{which}:{name} residual {resid/nrm}"
        checked += 1
    assert checked >= base.ambient_dim + 1


def test_self_adjointness_and_stokes(torus):
    q = S.assemble_Q(torus)
    L = S.assemble_L(torus)
    rng_seeds = [(1, 2), (3, 4), (5, 6)]
    for s1, s2 in rng_seeds:
        u = smooth_graph(torus, 1.0, seed=s1)
        v = smooth_graph(torus, 1.0, seed=s2)
        d = q.gauss_inner(L(u), v) - q.gauss_inner(u, L(v))
        assert abs(d) < 1e-9
        # Stokes identity for the drift Laplacian part
        drift = L(u).values - (torus.A2[None, :] + 0.5) * u.values
        w = torus.grid_weights() * torus.gauss_weight[None, :]
        assert abs((w * drift).sum()) < 1e-9 * q.gauss_norm(u)


# ---------------------------------------------------------------------------
# Q form
# ---------------------------------------------------------------------------


def test_q_example_circle(circle):
    q = S.QForm(circle, 2.1)
    one = G.GraphFunction.constant(circle, 1.0)
    exact = 1.1 * 2.0 * np.pi * np.sqrt(2.0) * np.exp(-0.5)
    assert abs(q.inner(one, one) - exact) < 1e-12


def test_q_rejects_small_lambda(circle):
    with pytest.raises(SpectralError):
        S.QForm(circle, 1.9)


def test_q_symmetry_random(torus):
    q = S.assemble_Q(torus)
    for seed in range(8):
        u = smooth_graph(torus, 1.0, seed=2 * seed)
        v = smooth_graph(torus, 1.0, seed=2 * seed + 1)
        d = abs(q.inner(u, v) - q.inner(v, u))
        assert d <= 1e-10 * q.norm(u) * q.norm(v)


def test_q_equivalence_constants(torus):
    q = S.assemble_Q(torus)
    assert 0 < q.c1 <= q.c2
    for seed in range(5):
        u = smooth_graph(torus, 1.0, seed=seed + 20)
        ratio = q.norm(u) / q.w12_norm(u)
        assert q.c1 * (1 - 1e-9) <= ratio <= q.c2 * (1 + 1e-9)


def test_q_bounded_by_e_norm(torus):
    q = S.assemble_Q(torus)
    for seed in range(5):
        u = smooth_graph(torus, 1.0, seed=seed + 40)
        assert q.norm(u) <= q.C_Q * u.e_norm() * (1 + 1e-9)


# ---------------------------------------------------------------------------
# spectra
# ---------------------------------------------------------------------------


def test_circle_spectrum(circle_spec):
    # mu = k^2/2 - 1 with multiplicity 2 for k >= 1
    ks = np.concatenate([[0], np.repeat(np.arange(1, 13), 2)])[:24]
    expected = ks ** 2 / 2.0 - 1.0
    assert np.abs(circle_spec.mus() - expected).max() < 1e-6
    assert circle_spec.modes[0].tag == "dilation"
    assert circle_spec.modes[1].tag == "translation"
    assert circle_spec.modes[2].tag == "translation"


def test_sphere_spectrum(sphere_spec):
    # mu = k(k+1)/4 - 1 with multiplicity 2k+1
    expected = np.concatenate(
        [np.full(2 * k + 1, k * (k + 1) / 4.0 - 1.0) for k in range(6)])
    mus = sphere_spec.mus()
    n = min(len(mus), len(expected))
    assert np.abs(mus[:n] - expected[:n]).max() < 1e-6
    tags = [m.tag for m in sphere_spec.modes[:4]]
    assert tags == ["dilation", "translation", "translation", "translation"]


def test_eigen_residuals_and_orthonormality(torus_spec):
    q = torus_spec.qform
    modes = torus_spec.modes[:20]
    assert max(m.residual for m in modes) <= 1e-7
    gram = np.array([[q.inner(a.fn, b.fn) for b in modes] for a in modes])
    assert np.abs(gram - np.eye(len(modes))).max() < 1e-8


def test_torus_unstable_eigenvalue(torus_spec):
    assert torus_spec.modes[0].mu < -1.0
    assert torus_spec.modes[0].tag == "unstable"
    assert torus_spec.modes[0].m == 0


def test_torus_rotation_fields_null(torus):
    # full-grid operator annihilates the horizontal rotation generators
    q = S.assemble_Q(torus)
    L = S.assemble_L(torus)
    for name, g in S.geometric_candidates(torus).items():
        if not name.startswith("rotation"):
            continue
        nrm = q.gauss_norm(g)
        if nrm < 1e-10:
            continue
        assert q.gauss_norm(L(g)) <= 1e-7 * nrm


def test_hessian_consistency(circle):
    """-int v L w rho matches second differences of the Gaussian area."""
    q = S.assemble_Q(circle)
    L = S.assemble_L(circle)
    v = smooth_graph(circle, 1.0, seed=31, kmax=3)
    hess_quad = -q.gauss_inner(v, L(v))
    t = 1e-3
    Fp = G.gaussian_quadrature(circle, t * v)
    F0 = G.gaussian_quadrature(circle, G.GraphFunction.zero(circle))
    Fm = G.gaussian_quadrature(circle, (-t) * v)
    pref = (4.0 * np.pi) ** (-circle.dim / 2.0)
    hess_fd = (Fp - 2.0 * F0 + Fm) / t ** 2 / pref
    assert abs(hess_fd - hess_quad) < 1e-4 * max(1.0, abs(hess_quad))


# ---------------------------------------------------------------------------
# splitting and T
# ---------------------------------------------------------------------------


def test_circle_splitting_round(circle_spec):
    split = S.make_splitting(circle_spec)
    assert split.round_flag
    assert split.dim_unstable == 0
    tr = next(m for m in circle_spec.modes if m.tag == "translation")
    Tt, _ = split.apply_T(tr.fn)
    factor = circle_spec.qform.inner(Tt, tr.fn)
    assert abs(factor - np.exp(0.5)) < 1e-9


def test_torus_splitting(torus_spec, torus_split):
    assert torus_split.dim_unstable >= 1
    assert not torus_split.round_flag
    mu1 = torus_spec.modes[0].mu
    assert abs(torus_split.lambda_expand - np.exp(-mu1)) < 1e-12
    assert torus_split.mu_contract == pytest.approx(np.e)
    # gap window contains only recognized modes
    for m in torus_spec.modes:
        if abs(m.mu + 1.0) <= torus_split.gap_tol:
            assert m.tag in ("dilation", "marginal")


def test_T_diagonal_action(torus_spec, torus_split):
    q = torus_spec.qform
    for i in (0, 3, 7):
        w = torus_spec.modes[i].fn
        Tw, resid = torus_split.apply_T(w)
        assert resid < 1e-9
        assert abs(q.inner(Tw, w) - np.exp(-torus_spec.modes[i].mu)) < 1e-8


def test_projection_completeness(torus_spec, torus_split):
    q = torus_spec.qform
    rng = np.random.default_rng(5)
    c = rng.normal(size=12)
    u = torus_split.from_coefficients(
        np.concatenate([c, np.zeros(len(torus_spec.modes) - 12)]))
    p1 = torus_split.project(u, 1)
    p2 = torus_split.project(u, 2)
    assert np.abs((p1.data + p2.data) - u.data).max() < 1e-9
    assert abs(q.inner(p1, p2)) < 1e-10 * max(q.inner(u, u), 1e-30)


def test_T_expansion_contraction(torus_spec, torus_split):
    """||Tx|| >= lambda ||x|| on the expanding block; <= e ||x|| elsewhere."""
    q = torus_spec.qform
    rng = np.random.default_rng(17)
    n = len(torus_spec.modes)
    for _ in range(100):
        c = np.zeros(n)
        for i in torus_split.index_unstable:
            c[i] = rng.normal()
        x = torus_split.from_coefficients(c)
        Tx, _ = torus_split.apply_T(x)
        assert q.norm(Tx) >= torus_split.lambda_expand * q.norm(x) * (1 - 1e-9)
    for k in range(100):
        c = rng.normal(size=n)
        for i in torus_split.index_unstable:
            c[i] = 0.0
        x = torus_split.from_coefficients(c)
        Tx, _ = torus_split.apply_T(x)
        assert q.norm(Tx) <= np.e * q.norm(x) * (1 + 1e-9)


def test_kappa_sup_bound(torus_spec, torus_split):
    q = torus_spec.qform
    rng = np.random.default_rng(23)
    n = len(torus_spec.modes)
    for _ in range(100):
        c = np.zeros(n)
        for i in torus_split.index_unstable:
            c[i] = rng.normal()
        x = torus_split.from_coefficients(c)
        sup = np.abs(x.values).max()
        assert torus_split.kappa * sup <= q.norm(x) * (1 + 1e-9)


def test_group_fields_in_second_block(torus_spec, torus_split):
    q = torus_spec.qform
    for name, g in S.geometric_candidates(torus_spec.base).items():
        nrm = q.norm(g)
        if nrm < 1e-8:
            continue
        p1 = torus_split.project(g, 1)
        assert q.norm(p1) <= 1e-6 * nrm


def test_spectrum_cache_roundtrip(tmp_path, circle_spec):
    path = tmp_path / "circle.spec"
    S.save_spectrum(circle_spec, path, geom_hash="abc123")
    rows, gh = S.load_spectrum_header(path)
    assert gh == "abc123"
    assert len(rows) == len(circle_spec.modes)
    assert rows[0][2] == pytest.approx(circle_spec.modes[0].mu)
