import numpy as np
import pytest
from scipy import stats

from purifylab.diffusion import OdeSolverConfig, perturb, solve_pf_ode, solve_reverse_sde, time_steps
from purifylab.distributions import mixture, two_dirac
from purifylab.errors import DomainError, NumericalError


def test_perturb_small_t_returns_input():
    assert perturb(np.array([1.0]), 1e-300, np.random.default_rng(0))[0] == 1.0


def test_perturb_variance_and_mean():
    rng = np.random.default_rng(1)
    x = perturb(np.zeros(100000), 1.0, rng)
    assert abs(x.var() - 1.0) < 0.03
    y = perturb(np.tile([2.0, -2.0], (10000, 1)), 0.25, rng)
    assert np.all(np.abs(y.mean(axis=0) - [2.0, -2.0]) < 0.01)
    with pytest.raises(DomainError):
        perturb(np.zeros(3), 0.0, rng)


def test_time_steps_shape():
    ts = time_steps(1.0, 0.002, 18)
    assert ts[0] == 1.0 and ts[-1] == 0.002 and len(ts) == 19
    assert np.all(np.diff(ts) < 0)


def test_pf_ode_two_dirac_endpoints():
    d = two_dirac()
    cfg = OdeSolverConfig("heun", 200, 1e-3)
    assert abs(solve_pf_ode(d.score, np.array([[0.5]]), 1.0, cfg)[0, 0] - 1.0) <= 1e-3
    assert abs(solve_pf_ode(d.score, np.array([[-0.5]]), 1.0, cfg)[0, 0] + 1.0) <= 1e-3


def gaussian_flow(x0, t0, t1, c):
    """Exact PF-ODE solution for a centered Gaussian with std c."""
    return x0 * np.sqrt((c**2 + t1**2) / (c**2 + t0**2))


@pytest.mark.parametrize("x0", [-2.0, 0.3, 1.7])
def test_pf_ode_single_gaussian_closed_form(x0):
    g = mixture([0.0], scales=1.0)
    out = solve_pf_ode(g.score, np.array([[x0]]), 1.0, OdeSolverConfig("heun", 400, 0.002))
    assert out[0, 0] == pytest.approx(gaussian_flow(x0, 1.0, 0.002, 1.0), abs=1e-5)


def test_pf_ode_heun_second_order():
    g = mixture([0.0], scales=0.5)
    x0 = np.array([[1.3]])
    ref = solve_pf_ode(g.score, x0, 2.0, OdeSolverConfig("heun", 400, 0.01))
    coarse = abs(solve_pf_ode(g.score, x0, 2.0, OdeSolverConfig("heun", 20, 0.01)) - ref)[0, 0]
    fine = abs(solve_pf_ode(g.score, x0, 2.0, OdeSolverConfig("heun", 40, 0.01)) - ref)[0, 0]
    assert coarse / fine >= 3.0


def test_pf_ode_deterministic():
    d = two_dirac()
    x = np.linspace(-2, 2, 9)[:, None]
    a = solve_pf_ode(d.score, x, 0.7, OdeSolverConfig())
    b = solve_pf_ode(d.score, x, 0.7, OdeSolverConfig())
    assert a.tobytes() == b.tobytes()


def test_pf_ode_trajectories_do_not_cross_zero():
    d = two_dirac()
    starts = np.concatenate([np.linspace(0.01, 3, 40), -np.linspace(0.01, 3, 40)])[:, None]
    for t0 in (0.25, 0.5, 1.0):
        _, path = solve_pf_ode(d.score, starts, t0, OdeSolverConfig("heun", 400, 0.002), return_path=True)
        assert np.all(np.sign(path[:, :, 0]) == np.sign(starts[:, 0]))


def test_pf_ode_errors():
    d = two_dirac()
    with pytest.raises(DomainError):
        solve_pf_ode(d.score, np.zeros((1, 1)), 0.001, OdeSolverConfig(t_end=0.002))
    with pytest.raises(NumericalError) as info:
        solve_pf_ode(lambda x, t: np.full_like(x, np.nan), np.zeros((1, 1)), 1.0)
    assert info.value.t == 1.0
    with pytest.raises(DomainError):
        OdeSolverConfig("rk4")
    with pytest.raises(DomainError):
        OdeSolverConfig(steps=0)


def test_reverse_sde_lands_on_atom():
    d = two_dirac()
    rng = np.random.default_rng(0)
    out = solve_reverse_sde(d.score, np.full((1000, 1), 0.5), 0.25, 200, rng)
    assert np.mean(np.abs(out[:, 0] - 1.0) < 0.05) >= 0.95


def test_reverse_sde_vanishing_interval():
    g = mixture([0.0], scales=1.0)
    x = np.array([[0.7]])
    out = solve_reverse_sde(g.score, x, 1e-6, 1, np.random.default_rng(0), t_end=1e-7)
    assert out[0, 0] == pytest.approx(0.7, abs=1e-5)


def test_reverse_sde_marginal_matches_exact_cdf():
    # start from the exact t=1 marginal; the output should follow the eps marginal
    d = two_dirac()
    rng = np.random.default_rng(3)
    x0, _ = d.sample(10000, rng)
    x1 = x0 + rng.standard_normal(x0.shape)
    out = solve_reverse_sde(d.score, x1, 1.0, 200, rng, t_end=0.002)[:, 0]
    cdf = lambda v: 0.5 * stats.norm.cdf(v, -1, 0.002) + 0.5 * stats.norm.cdf(v, 1, 0.002)
    assert stats.kstest(out, cdf).statistic <= 0.05
