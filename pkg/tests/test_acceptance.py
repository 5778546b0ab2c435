"""Acceptance criteria, one test each, at the stated tolerances and time budgets."""

import math
import time

import numpy as np
import pytest

from conftest import BUILD_SECONDS
from oracles import (
    binom_cases,
    bisect_cp_lower,
    bisect_inverse_normal,
    cp_table,
    erf_phi,
    exact_binom_test,
    hp_point,
    normal_quantile_points,
    scan_cells,
    two_dirac_posterior,
)
from purifylab.diffusion import OdeSolverConfig, solve_pf_ode
from purifylab.distributions import four_dirac
from purifylab.nn import gradient_check, init_net, net_forward
from purifylab.purifiers import ConsistencyNetPurifier, make_purifier, purify
from purifylab.smoothing import (
    Constant,
    binom_test_two_sided,
    certified_accuracy_curve,
    certify,
    clopper_pearson_lower,
    inverse_normal_cdf,
    nearest_centroid_for,
)
from purifylab.timegrid import build_grid
from purifylab.transport import DEFAULT_R_GRID, estimate_transport, markov_bound_report, transport_distances

SIGMAS = (0.25, 0.5, 1.0)


def test_01_two_dirac_posterior_closed_form(dist1, record):
    start = time.perf_counter()
    x = np.linspace(-5, 5, 4001)[:, None]
    worst = 0.0
    for t in (0.1, 0.25, 0.5, 1.0, 2.0):
        worst = max(worst, float(np.max(np.abs(dist1.posterior_mean(x, t)[:, 0] - two_dirac_posterior(x[:, 0], t)))))
    elapsed = time.perf_counter() - start
    record(f"max err {worst:.1e}, {elapsed:.2f}s")
    assert worst <= 1e-10
    assert elapsed < 1.0


def test_02_pf_ode_trajectories_do_not_cross(dist1, record):
    start = time.perf_counter()
    mags = np.linspace(0.01, 3.0, 100)
    x0 = np.concatenate([mags, -mags])[:, None]
    worst_end, crossings = 0.0, 0
    for t0 in (0.25, 0.5, 1.0):
        # stop at 1e-4: the flow sits about |slope| * t_end from the atom when it stops
        _, path = solve_pf_ode(dist1.score, x0, t0, OdeSolverConfig("heun", 400, 1e-4), return_path=True)
        crossings += int(np.sum(np.any(np.sign(path[:, :, 0]) != np.sign(x0[:, 0]), axis=0)))
        worst_end = max(worst_end, float(np.max(np.abs(path[-1, :, 0] - np.sign(x0[:, 0])))))
    elapsed = time.perf_counter() - start
    record(f"crossings {crossings}, max endpoint err {worst_end:.1e}, {elapsed:.2f}s")
    assert crossings == 0
    assert worst_end <= 1e-3
    assert elapsed < 10.0


def test_03_markov_bound_every_kind(dist1, grid, distilled_net, finetuned_net, record):
    start = time.perf_counter()
    kinds = {name: make_purifier(name, dist1, grid=grid) for name in ("onestep", "pfode", "sde", "cm-oracle", "identity", "nearest")}
    kinds["cm-net"] = ConsistencyNetPurifier(distilled_net)
    kinds["cm-net-ft"] = ConsistencyNetPurifier(finetuned_net)
    failures, checks, tightest = [], 0, math.inf
    for name, kind in kinds.items():
        for sigma in (0.25, 0.5, 0.75, 1.0):
            est = estimate_transport(dist1, kind, sigma, 100_000, DEFAULT_R_GRID, grid, seed=31)
            for c in markov_bound_report(est):
                checks += 1
                tightest = min(tightest, c.slack)
                if not c.passed:
                    failures.append((name, sigma, c.r, c.exceedance, c.bound))
    elapsed = time.perf_counter() - start
    record(f"{checks} checks, {len(failures)} failures, min slack {tightest:.2e}, {elapsed:.0f}s")
    assert not failures, failures
    assert elapsed < 120.0


def test_04_statistics_against_oracles(record):
    start = time.perf_counter()
    cp = max(abs(clopper_pearson_lower(k, n, a) - bisect_cp_lower(k, n, a)) for k, n, a in cp_table())
    inv = max(abs(inverse_normal_cdf(float(p)) - bisect_inverse_normal(float(p))) for p in normal_quantile_points())
    bt = max(abs(binom_test_two_sided(k, n) - exact_binom_test(k, n)) for k, n in binom_cases())
    elapsed = time.perf_counter() - start
    record(f"cp {cp:.1e}, inv-normal {inv:.1e}, binom {bt:.1e}, {elapsed:.2f}s")
    assert len(cp_table()) == 50 and len(normal_quantile_points()) == 1000 and len(binom_cases()) == 200
    assert cp <= 1e-9
    assert inv <= 1e-9
    assert bt <= 1e-12
    assert elapsed < 5.0


def test_05_radius_from_injected_bound(grid, record):
    phi1 = erf_phi(1.0)
    out = certify(make_purifier("identity"), Constant(1), [0.0], 0.5, 100, 100, 0.001, grid, seed=0, lower_bound=lambda k, n, a: phi1)
    record(f"radius {out.radius!r}")
    assert out.prediction == 1
    assert abs(out.radius - 0.5) <= 1e-6


def test_06_gradient_check_default_net(distilled_net, record):
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    x = rng.normal(size=(16, 1)) * 1.5
    t = np.exp(rng.uniform(np.log(0.002), np.log(80.0), 16))
    fresh = init_net(1, zero_final=False, rng=np.random.default_rng(60))
    errs = [gradient_check(net, x, t, n_coords=150, rng=rng) for net in (fresh, distilled_net)]
    elapsed = time.perf_counter() - start
    record(f"max rel err {max(errs):.1e} (fresh, distilled), {elapsed:.2f}s")
    assert max(errs) <= 1e-5
    assert elapsed < 5.0


def test_07_distilled_net_matches_oracle(dist1, grid, distilled_net, record):
    start = time.perf_counter()
    oracle, learned = make_purifier("cm-oracle", dist1, grid=grid), ConsistencyNetPurifier(distilled_net)
    rng = np.random.default_rng(7)
    agree = {}
    for sigma in SIGMAS:
        x, _ = dist1.sample(10_000, rng)
        noisy = x + sigma * rng.standard_normal(x.shape)
        agree[sigma] = float(np.mean(np.sign(purify(learned, noisy, sigma, grid)) == np.sign(purify(oracle, noisy, sigma, grid))))
    xs = np.linspace(-5, 5, 1001)[:, None]
    boundary = np.array_equal(net_forward(distilled_net, xs, distilled_net.eps), xs)
    elapsed = time.perf_counter() - start + BUILD_SECONDS.get("distill", 0.0)
    record(", ".join(f"sigma {s}: {a:.4f}" for s, a in agree.items()) + f", boundary exact {boundary}, {elapsed:.0f}s incl. training")
    assert all(a >= 0.99 for a in agree.values())
    assert boundary
    assert elapsed < 120.0


def test_08_transport_direction(dist1, grid, distilled_net, finetuned_net, record):
    start = time.perf_counter()
    notes, ok = [], True
    for sigma in SIGMAS:
        # identical seeds give identical clean draws and noise for both nets
        d_before = transport_distances(dist1, ConsistencyNetPurifier(distilled_net), sigma, 100_000, grid, seed=81)
        d_after = transport_distances(dist1, ConsistencyNetPurifier(finetuned_net), sigma, 100_000, grid, seed=81)
        diff = d_after - d_before
        se = float(np.std(diff, ddof=1) / math.sqrt(diff.size))
        notes.append(f"sigma {sigma}: {d_before.mean():.4f} -> {d_after.mean():.4f} (se {se:.1e})")
        ok &= bool(diff.mean() <= se)
    o = estimate_transport(dist1, make_purifier("onestep", dist1, grid=grid), 1.0, 100_000, DEFAULT_R_GRID, grid, seed=82)
    c = estimate_transport(dist1, make_purifier("cm-oracle", dist1, grid=grid), 1.0, 100_000, DEFAULT_R_GRID, grid, seed=82)
    gap_se = (o.mean_dist - c.mean_dist) / math.hypot(o.std_err, c.std_err)
    elapsed = time.perf_counter() - start + BUILD_SECONDS.get("finetune", 0.0)
    record("; ".join(notes) + f"; oracle {c.mean_dist:.4f} vs onestep {o.mean_dist:.4f} = {gap_se:.1f} SE, {elapsed:.0f}s incl. fine-tuning")
    assert ok
    assert gap_se >= 3.0
    assert elapsed < 180.0


@pytest.mark.slow
def test_09_four_dirac_certified_ordering(grid, record):
    start = time.perf_counter()
    d = four_dirac()
    clf = nearest_centroid_for(d)
    points, labels = d.sample(200, np.random.default_rng(9))
    acc = {}
    for name in ("cm-oracle", "pfode", "onestep"):
        purifier = make_purifier(name, d, grid=grid)
        curves = []
        for si, sigma in enumerate(SIGMAS):
            results = [
                (certify(purifier, clf, x, sigma, 100, 2000, 0.001, grid, seed=np.random.SeedSequence(90, spawn_key=(si, i))), int(y))
                for i, (x, y) in enumerate(zip(points, labels))
            ]
            curves.append(certified_accuracy_curve(results, [0.5])[0])
        acc[name] = max(curves)

    def reversal(hi, lo):
        # how far `hi` falls below `lo`, in binomial standard errors at the pooled accuracy
        p = 0.5 * (acc[hi] + acc[lo])
        se = math.sqrt(p * (1 - p) / 200)
        gap = acc[lo] - acc[hi]
        return 0.0 if gap <= 0 else (math.inf if se == 0 else gap / se)

    elapsed = time.perf_counter() - start
    record(", ".join(f"{k} {v:.3f}" for k, v in acc.items()) + f", {elapsed:.0f}s")
    assert reversal("cm-oracle", "pfode") <= 2.0
    assert reversal("pfode", "onestep") <= 2.0
    assert elapsed < 600.0


def test_10_karras_grid(record):
    start = time.perf_counter()
    g = build_grid(0.002, 80.0, 7.0, 18)
    interior = max(abs(g.points[i - 1] - float(hp_point(0.002, 80, 7, 18, i))) for i in range(2, 18))
    sig = np.exp(np.random.default_rng(10).uniform(np.log(1e-4), np.log(200.0), 10_000))
    chosen = g.select_timestep(sig)
    mismatches = sum(chosen[i] != scan_cells(g.points, s) for i, s in enumerate(sig))
    elapsed = time.perf_counter() - start
    record(f"interior err {interior:.1e}, {mismatches} mismatches, {elapsed:.2f}s")
    assert g.points[0] == 0.002 and g.points[-1] == 80.0
    assert interior <= 1e-12
    assert mismatches == 0
    assert elapsed < 1.0


def test_11_worker_count_does_not_change_results(dist1, grid, record):
    clf = nearest_centroid_for(dist1)
    same = []
    for name in ("sde", "cm-oracle"):
        p = make_purifier(name, dist1, grid=grid)
        a = certify(p, clf, [0.3], 0.5, 100, 4500, 0.001, grid, seed=111, workers=1)
        b = certify(p, clf, [0.3], 0.5, 100, 4500, 0.001, grid, seed=111, workers=8)
        same.append(a == b and repr(a.radius) == repr(b.radius) and repr(a.p_a_lower) == repr(b.p_a_lower))
        ta = estimate_transport(dist1, p, 0.5, 20_000, DEFAULT_R_GRID, grid, seed=112, workers=1)
        tb = estimate_transport(dist1, p, 0.5, 20_000, DEFAULT_R_GRID, grid, seed=112, workers=8)
        same.append(ta == tb and repr(ta.mean_dist) == repr(tb.mean_dist) and repr(ta.std_err) == repr(tb.std_err))
    record(f"{sum(same)}/{len(same)} identical")
    assert all(same)
