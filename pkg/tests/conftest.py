import numpy as np
import pytest

from shrinklab import geometry as G


@pytest.fixture(scope="session")
def circle():
    return G.build_round("circle", 256)


@pytest.fixture(scope="session")
def circle_small():
    return G.build_round("circle", 128)


@pytest.fixture(scope="session")
def sphere():
    return G.build_round("sphere", 256)


@pytest.fixture(scope="session")
def torus():
    return G.shoot_shrinker_profile("angenent_torus", N=256, tol=1e-10,
                                    modes=16)


@pytest.fixture(scope="session")
def torus_flow():
    # coarser base for flow and dynamics experiments
    return G.shoot_shrinker_profile("angenent_torus", N=128, tol=1e-10,
                                    modes=8)


@pytest.fixture(scope="session")
def al32():
    return G.shoot_shrinker_profile("abresch_langer", (3, 2), N=256,
                                    tol=1e-10)


def smooth_graph(base, amp, seed=0, kmax=5, mmax=3):
    """Random band-limited graph function with sup-norm amp."""
    rng = np.random.default_rng(seed)
    th2 = 2.0 * np.pi * base.s / base.period
    if base.kind == "planar_curve":
        v = np.zeros(base.N)
        for k in range(kmax + 1):
            v += rng.normal() * np.cos(k * th2) + rng.normal() * np.sin(k * th2)
    else:
        v = np.zeros((base.n_theta, base.N))
        for m in range(min(mmax, base.M) + 1):
            cm, sm = np.cos(m * base.theta), np.sin(m * base.theta)
            for k in range(kmax + 1):
                ck, sk = np.cos(k * th2), np.sin(k * th2)
                v += rng.normal() * np.outer(cm, ck) + rng.normal() * np.outer(cm, sk)
                if m:
                    v += rng.normal() * np.outer(sm, ck) + rng.normal() * np.outer(sm, sk)
        v = base.symmetrize_cover(v)
    v *= amp / np.abs(v).max()
    return G.GraphFunction.from_values(base, v)
