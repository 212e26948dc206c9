import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfggp.fields import ConstantField
from mfggp.functionals import gauss_legendre_rule
from mfggp.kernels import PeriodicKernelSpec
from mfggp.reference import solve_1d_explicit
from mfggp.solver import GNConfig
from mfggp.stationary import (
    LatentState,
    LayoutError,
    NonlocalGaussian,
    PointObservations,
    PowerLocal,
    StationaryInverse,
    StationaryProblemSpec,
    build_feature_sets,
    exact_state,
    field_residuals,
    objective,
    pde_residuals,
)

TWO_PI = 2 * np.pi
BOX2 = [(-0.5, 0.5), (-0.5, 0.5)]


def V1(x):
    return np.sin(TWO_PI * np.asarray(x, dtype=float).reshape(-1)) + 2.0


def dV1(x):
    return TWO_PI * np.cos(TWO_PI * np.asarray(x, dtype=float).reshape(-1))


def d2V1(x):
    return -(TWO_PI**2) * np.sin(TWO_PI * np.asarray(x, dtype=float).reshape(-1))


def V2(p):
    return np.sin(TWO_PI * p[:, 1]) + np.sin(TWO_PI * p[:, 0]) + np.cos(2 * TWO_PI * p[:, 0])


def spec_1d(x, ell=1.0, **kw):
    k = PeriodicKernelSpec(1, ell)
    kw.setdefault("nu", 0.0)
    return StationaryProblemSpec([(0.0, 1.0)], x, k, k, k, **kw)


def spec_2d(x, ell=1.41, **kw):
    k = PeriodicKernelSpec(2, ell)
    return StationaryProblemSpec(BOX2, x, k, k, k, **kw)


def uniform_1d(M):
    return (np.arange(M) / M)[:, None]


@pytest.fixture(scope="module")
def explicit():
    return solve_1d_explicit(V1, dV=dV1, d2V=d2V1)


def exact_1d(problem, sol):
    return exact_state(problem, ConstantField(0.0, 1), sol.m_field(), V1, sol.hbar)


# ---- layout ----------------------------------------------------------------


def test_feature_counts_2d():
    x = np.random.default_rng(0).random((400, 2)) - 0.5
    obs = PointObservations(x[:40], np.ones(40))
    phi_u, phi_m, phi_v = build_feature_sets(spec_2d(x, m_obs=obs))
    assert (phi_u.size, phi_m.size, phi_v.size) == (1600, 1600, 400)


def test_feature_counts_1d():
    phi_u, phi_m, phi_v = build_feature_sets(spec_1d(uniform_1d(25)))
    assert phi_u.size == 75 and phi_m.size == 75 and phi_v.size == 25
    assert [op.kind for op in phi_u.features.ops] == ["identity", "partial", "laplacian"]


def test_feature_counts_nonlocal():
    rng = np.random.default_rng(1)
    rule = gauss_legendre_rule(30, [(0, 1), (0, 1)])
    extra = rng.random((50, 2))
    k = PeriodicKernelSpec(2, 0.6)
    obs = PointObservations(extra, np.ones(50))
    # collocation on the 50 samples only: the 900 nodes join as value features
    s = StationaryProblemSpec([(0, 1), (0, 1)], extra, k, k, k, coupling=NonlocalGaussian(rule, 1.0), m_obs=obs)
    assert build_feature_sets(s)[1].size == 50 * 4 + 900
    # collocation on nodes plus samples: every value Dirac is already present
    x = np.vstack([rule.nodes, extra])
    s = StationaryProblemSpec([(0, 1), (0, 1)], x, k, k, k, coupling=NonlocalGaussian(rule, 1.0), m_obs=obs)
    assert build_feature_sets(s)[1].size == 950 * 4


def test_observations_off_collocation_are_appended():
    x = uniform_1d(10)
    obs = PointObservations(np.array([[0.05], [0.1], [0.15]]), np.ones(3))
    phi_m = build_feature_sets(spec_1d(x, m_obs=obs))[1]
    assert phi_m.size == 30 + 2
    np.testing.assert_array_equal(phi_m.obs_idx, [30, 1, 31])


def test_layout_mismatch_raises():
    p = StationaryInverse(spec_1d(uniform_1d(5)), factorize=False)
    st_ = p.initial_state()
    st_.z = np.zeros(3)
    with pytest.raises(LayoutError):
        p.to_vector(st_)
    with pytest.raises(LayoutError):
        spec_1d(np.zeros((4, 2)))


def test_spec_validation():
    with pytest.raises(ValueError):
        spec_1d(uniform_1d(4), alpha_pen=-1.0)
    with pytest.raises(ValueError):
        PointObservations(np.zeros((2, 1)), np.zeros(2), noise=0.0)
    with pytest.raises(ValueError):
        PointObservations(np.zeros((2, 1)), np.zeros(3))


# ---- residuals ---------------------------------------------------------------


def test_residuals_vanish_at_explicit_solution(explicit):
    x = np.random.default_rng(2).random((60, 1))
    p = StationaryInverse(spec_1d(x), factorize=False)
    r = pde_residuals(p, exact_1d(p, explicit))
    assert r.shape == (120,)
    assert np.abs(r).max() <= 1e-10


def test_zero_latents_zero_residuals():
    x = np.random.default_rng(3).random((20, 2)) - 0.5
    p = StationaryInverse(spec_2d(x, nu=1.0), factorize=False)
    z = LatentState(np.zeros(p.phi_u.size), np.zeros(p.phi_m.size), np.zeros(20), 0.0)
    np.testing.assert_array_equal(pde_residuals(p, z), 0.0)


@given(st.floats(-10, 10), st.integers(0, 1000))
def test_hbar_shift_moves_only_hjb_rows(c, seed):
    r = np.random.default_rng(seed)
    x = r.random((8, 2)) - 0.5
    p = StationaryInverse(spec_2d(x, nu=0.3), factorize=False)
    base = LatentState(r.standard_normal(p.phi_u.size), r.standard_normal(p.phi_m.size) ** 2, r.standard_normal(8), 0.4)
    shifted = base.copy()
    shifted.hbar += c
    d = pde_residuals(p, shifted) - pde_residuals(p, base)
    np.testing.assert_allclose(d[:8], -c, rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(d[8:], 0.0)


@given(st.floats(-100, 100), st.integers(0, 1000))
def test_gauge_identity(c, seed):
    r = np.random.default_rng(seed)
    x = r.random((8, 2)) - 0.5
    p = StationaryInverse(spec_2d(x, nu=0.3), factorize=False)
    base = LatentState(r.standard_normal(p.phi_u.size), r.standard_normal(p.phi_m.size) ** 2, r.standard_normal(8), 0.4)
    shifted = base.copy()
    shifted.v = shifted.v + c
    shifted.hbar += c
    a, b = pde_residuals(p, base), pde_residuals(p, shifted)
    # the identity is algebraically exact; only the floating-point sum rounds
    scale = max(1.0, abs(c)) * np.finfo(float).eps * 8
    assert np.abs(a - b).max() <= scale * max(1.0, np.abs(a).max())


# ---- objective -------------------------------------------------------------


def test_objective_zero_latents_is_mass_deficit():
    x = np.random.default_rng(4).random((15, 2)) - 0.5
    p = StationaryInverse(spec_2d(x, beta=1e4))
    z = LatentState(np.zeros(p.phi_u.size), np.zeros(p.phi_m.size), np.zeros(15), 0.0)
    assert objective(p, z) == pytest.approx(1e4, rel=1e-14)


def test_objective_adds_data_misfit():
    x = np.random.default_rng(5).random((15, 2)) - 0.5
    mo = np.random.default_rng(6).random(5)
    p = StationaryInverse(spec_2d(x, beta=1e4, m_obs=PointObservations(x[:5], mo, 1e-3)))
    z = LatentState(np.zeros(p.phi_u.size), np.zeros(p.phi_m.size), np.zeros(15), 0.0)
    assert objective(p, z) == pytest.approx(1e4 + 1e6 * mo @ mo, rel=1e-12)


def test_objective_at_exact_solution_is_prior_only(explicit):
    x = uniform_1d(60)
    xo = x[:20]
    m_obs = PointObservations(xo, explicit.m(xo), 1e-3)
    v_obs = PointObservations(xo, V1(xo), 1e-3)
    p = StationaryInverse(spec_1d(x, m_obs=m_obs, v_obs=v_obs))
    state = exact_1d(p, explicit)
    lsq = p.least_squares()
    theta = p.to_vector(state)
    prior = sum(sys.quadratic_form(theta[sl]) for sl, sys in lsq.blocks) + explicit.hbar**2
    assert objective(p, state) == pytest.approx(prior, rel=1e-9)


def test_unfactorized_objective_raises():
    p = StationaryInverse(spec_1d(uniform_1d(5)), factorize=False)
    with pytest.raises(RuntimeError):
        objective(p, p.initial_state())


@pytest.mark.parametrize("unknown", [[], ["nu"], ["alpha"], ["sigma"]])
def test_gradient_matches_finite_differences(unknown):
    r = np.random.default_rng(11)
    x = r.random((6, 2))
    k = PeriodicKernelSpec(2, 1.0)
    if "sigma" in unknown:
        coupling = NonlocalGaussian(gauss_legendre_rule(3, [(0, 1), (0, 1)]), 0.7, known=False)
    else:
        coupling = PowerLocal(2.0, known="alpha" not in unknown)
    s = StationaryProblemSpec(
        [(0, 1), (0, 1)], x, k, k, k, coupling=coupling, nu=0.5, nu_known="nu" not in unknown,
        m_obs=PointObservations(x[:3], r.random(3) + 0.5, 0.1), v_obs=PointObservations(x[:2], r.random(2), 0.1),
        alpha_pen=10.0, beta=10.0, eta=1e-6,
    )
    p = StationaryInverse(s)
    theta = p.to_vector(p.initial_state()) + 0.1 * r.standard_normal(p.n)
    lsq = p.least_squares()
    g = lsq.gradient(theta)
    h = 1e-6
    fd = np.array([(lsq.objective(theta + h * e) - lsq.objective(theta - h * e)) / (2 * h) for e in np.eye(p.n)])
    assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)


# ---- solver ------------------------------------------------------------------


def test_quadratic_problem_one_iteration():
    x = np.random.default_rng(7).random((12, 2)) - 0.5
    obs = PointObservations(x[:6], np.random.default_rng(8).random(6) + 0.5, 1e-2)
    p = StationaryInverse(spec_2d(x, alpha_pen=0.0, m_obs=obs))
    state, diag = p.solve(config=GNConfig(max_iters=10))
    assert diag.iterations == 1
    assert diag.converged
    # stationarity of the quadratic objective at the returned point
    lsq = p.least_squares()
    theta = p.to_vector(state)
    g = lsq.gradient(theta)
    assert np.linalg.norm(g) <= 1e-6 * max(1.0, np.linalg.norm(lsq.gradient(p.to_vector(p.initial_state()))))


@pytest.mark.parametrize("unknown_nu", [False, True])
def test_objective_monotone(explicit, unknown_nu):
    x = np.random.default_rng(9).random((30, 1))
    xo = x[:10]
    r = np.random.default_rng(10)
    m_obs = PointObservations(xo, explicit.m(xo) + 1e-3 * r.standard_normal(10), 1e-3)
    v_obs = PointObservations(xo, V1(xo) + 1e-3 * r.standard_normal(10), 1e-3)
    p = StationaryInverse(spec_1d(x, nu=0.2, nu_known=not unknown_nu, m_obs=m_obs, v_obs=v_obs))
    _, diag = p.solve(config=GNConfig(max_iters=30))
    obj = np.array(diag.objective)
    assert len(obj) >= 2
    assert np.all(np.diff(obj) <= 0.0)


def test_penalty_consistency(explicit):
    x = np.random.default_rng(12).random((30, 1))
    xo = x[:10]
    norms = []
    for a in (1e4, 1e5):
        p = StationaryInverse(
            spec_1d(
                x, alpha_pen=a, m_obs=PointObservations(xo, explicit.m(xo), 1e-3),
                v_obs=PointObservations(xo, V1(xo), 1e-3),
            )
        )
        state, _ = p.solve(exact_1d(p, explicit), GNConfig(max_iters=50))
        norms.append(np.linalg.norm(pde_residuals(p, state)))
    assert norms[1] <= norms[0]


def test_reconstruct_interpolates(explicit):
    x = np.random.default_rng(13).random((30, 1))
    xo = x[:10]
    p = StationaryInverse(
        spec_1d(x, m_obs=PointObservations(xo, explicit.m(xo), 1e-3), v_obs=PointObservations(xo, V1(xo), 1e-3))
    )
    state, _ = p.solve(config=GNConfig(max_iters=30))
    f = p.reconstruct(state)
    assert np.abs(f.m(x) - state.rho[:30]).max() <= 1e-6
    # the gap at a data point is exactly the nugget term eta * R * c
    for fld, lat in ((f.u, state.z), (f.m, state.rho), (f.V, state.v)):
        sys = fld.system
        gap = fld(x) - lat[:30]
        np.testing.assert_allclose(gap, -(sys.nugget_eta * sys.nugget * fld.coefficients)[:30], atol=1e-9)
    assert f.hbar == state.hbar
    np.testing.assert_allclose(f.strategy(x), -f.u.grad(x))
    np.testing.assert_allclose(f.V_minus_hbar(x), f.V(x) - f.hbar)


def test_explicit_recovery_1d(explicit):
    x = np.random.default_rng(14).random((60, 1))
    xo = x[:20]
    r = np.random.default_rng(15)
    p = StationaryInverse(
        spec_1d(
            x, m_obs=PointObservations(xo, explicit.m(xo) + 1e-3 * r.standard_normal(20), 1e-3),
            v_obs=PointObservations(xo, V1(xo) + 1e-3 * r.standard_normal(20), 1e-3),
        )
    )
    state, diag = p.solve(config=GNConfig(max_iters=100))
    f = p.reconstruct(state)
    g = (np.arange(128) / 128)[:, None]
    assert np.sqrt(np.mean((f.m(g) - explicit.m(g)) ** 2)) <= 1e-2
    assert np.sqrt(np.mean(f.u(g) ** 2)) <= 1e-2
    assert abs(f.hbar - explicit.hbar) <= 2e-2
    hjb, fp = field_residuals(p.spec, f, g)
    assert np.sqrt(np.mean(hjb**2)) <= 1e-2 and np.sqrt(np.mean(fp**2)) <= 1e-2


def test_scattered_collocation_aliasing():
    """With a short lengthscale in 2D, residuals vanish at scattered points but not in between."""
    from mfggp.fields import grid_points
    from mfggp.reference import EnvironmentSpec, solve_forward_stationary

    def V(p):
        return np.cos(TWO_PI * p[:, 0]) + np.sin(TWO_PI * p[:, 1]) + np.sin(2 * TWO_PI * p[:, 0])

    env = EnvironmentSpec(BOX2, V, nu=1.0, coupling=PowerLocal(2.0))
    k = PeriodicKernelSpec(2, 0.6)
    G, _ = grid_points(BOX2, 32)
    nodes = (np.arange(14) + 0.5) / 14 - 0.5
    designs = {
        "random": np.random.default_rng(0).random((196, 2)) - 0.5,
        "lattice": np.array([(a, b) for a in nodes for b in nodes]),
    }
    rms = {}
    for name, X in designs.items():
        f, diag = solve_forward_stationary(env, X, k, k)
        spec = StationaryProblemSpec(
            box=BOX2, collocation=X, kernel_u=k, kernel_m=k, kernel_v=k, coupling=env.coupling, nu=1.0, potential=V
        )
        assert diag.residual_norm[-1] <= 1e-5
        hjb, _ = field_residuals(spec, f, G)
        rms[name] = np.sqrt(np.mean(hjb**2))
    assert rms["lattice"] <= 1e-2
    assert rms["random"] >= 0.5
