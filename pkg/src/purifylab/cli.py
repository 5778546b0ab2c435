"""Command-line experiment runner.

Exit codes: 0 success, 2 configuration or usage error, 3 training failure,
4 a checked property was violated.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, resolve
from .diffusion import OdeSolverConfig, solve_pf_ode
from .distributions import BUILTIN, parse_distribution
from .errors import DomainError, TrainingError
from .nn import init_net, load_checkpoint, save_checkpoint
from .purifiers import ConsistencyNetPurifier, make_purifier, purify
from .smoothing import (
    best_over_sigma,
    certified_accuracy_curve,
    certify,
    derive_rng,
    nearest_centroid_for,
)
from .timegrid import KarrasGrid
from .training import DistillConfig, FinetuneConfig, distill, finetune, loss_kind
from .transport import estimate_transport, markov_bound_report

EXIT_OK, EXIT_USAGE, EXIT_TRAINING, EXIT_PROPERTY = 0, 2, 3, 4

# spawn keys separating the independent random streams of a run
KEY_TEST_SET, KEY_CERTIFY, KEY_EVAL = 1, 2, 3


class UsageError(Exception):
    pass


def _g(x: float) -> str:
    return f"{x:.17g}"


# ---------------------------------------------------------------- setup helpers


def load_distribution(cfg: ExperimentConfig):
    if cfg.dist_file is not None:
        return parse_distribution(Path(cfg.dist_file).read_text())
    if cfg.dist not in BUILTIN:
        raise UsageError(f"unknown distribution {cfg.dist!r}; choose from {sorted(BUILTIN)} or pass --dist-file")
    return BUILTIN[cfg.dist]()


def build_grid(cfg: ExperimentConfig) -> KarrasGrid:
    return KarrasGrid(cfg.t_eps, cfg.t_max, cfg.rho, cfg.grid_n)


def build_purifier(name: str, cfg: ExperimentConfig, dist, grid):
    net = None
    if name == "cm-net":
        if cfg.checkpoint is None:
            raise UsageError("--purifier cm-net requires --checkpoint")
        net = load_checkpoint(cfg.checkpoint)
        if net.data_dim != dist.dim:
            raise UsageError(f"checkpoint dimension {net.data_dim} != distribution dimension {dist.dim}")
    solver = OdeSolverConfig(cfg.solver, cfg.ode_steps, grid.eps)
    return make_purifier(name, dist, net=net, solver=solver, sde_steps=cfg.sde_steps, grid=grid, shift=cfg.shift)


def build_classifier(cfg: ExperimentConfig, dist):
    if cfg.classifier != "nearest-centroid":
        raise UsageError(f"unknown classifier {cfg.classifier!r}")
    return nearest_centroid_for(dist)


def provenance(cfg: ExperimentConfig) -> dict:
    return {"seed": cfg.seed, "config_hash": cfg.config_hash(), "version": __version__}


def _footer(cfg: ExperimentConfig) -> str:
    p = provenance(cfg)
    return f"# seed={p['seed']} config_hash={p['config_hash']} version={p['version']}\n"


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, header, rows, cfg) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        fh.write(_footer(cfg))


def _read_csv(path) -> tuple[list, list]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


# ---------------------------------------------------------------- commands


def cmd_certify(cfg: ExperimentConfig) -> int:
    dist = load_distribution(cfg)
    grid = build_grid(cfg)
    purifier = build_purifier(cfg.purifier, cfg, dist, grid)
    classifier = build_classifier(cfg, dist)
    out = _out_dir(cfg)
    points, labels = dist.sample(cfg.num_points, derive_rng(cfg.seed, KEY_TEST_SET))
    prov = provenance(cfg)
    by_sigma = {}
    with open(out / f"certify_{cfg.purifier}.jsonl", "w") as fh:
        for si, sigma in enumerate(cfg.sigmas):
            results = []
            for pi, (x, y) in enumerate(zip(points, labels)):
                start = time.perf_counter()
                seed = np.random.SeedSequence(cfg.seed, spawn_key=(KEY_CERTIFY, si, pi))
                o = certify(purifier, classifier, x, sigma, cfg.n0, cfg.n_cert, cfg.alpha, grid, seed, cfg.workers)
                results.append((o, int(y)))
                record = {
                    **prov,
                    "purifier": cfg.purifier,
                    "input_id": pi,
                    "sigma": sigma,
                    "label": int(y),
                    "prediction": o.prediction,
                    "p_a_lower": o.p_a_lower,
                    "radius": o.radius,
                    "counts0": {str(k): v for k, v in o.counts0.items()},
                    "counts": {str(k): v for k, v in o.counts.items()},
                    "wall_time": time.perf_counter() - start,
                }
                fh.write(json.dumps(record) + "\n")
            by_sigma[sigma] = certified_accuracy_curve(results, cfg.eps_grid)
    best = best_over_sigma(by_sigma)
    header = ["eps"] + [f"acc_sigma_{s!r}" for s in cfg.sigmas] + ["best"]
    rows = [[_g(e)] + [_g(by_sigma[s][i]) for s in cfg.sigmas] + [_g(best[i])] for i, e in enumerate(cfg.eps_grid)]
    _write_csv(out / f"curve_{cfg.purifier}.csv", header, rows, cfg)
    print(f"certified accuracy ({cfg.purifier}, {cfg.num_points} points, N={cfg.n_cert})")
    print("  ".join(f"{h:>16}" for h in header))
    for row in rows:
        print("  ".join(f"{float(v):>16.4f}" for v in row))
    return EXIT_OK


def _agreement(dist, grid, net, cfg) -> dict:
    """Fraction of noisy draws where the net and the ODE oracle land on the same side/atom."""
    oracle = make_purifier("cm-oracle", dist, grid=grid)
    model = ConsistencyNetPurifier(net)
    out = {}
    for si, sigma in enumerate(cfg.sigmas):
        rng = derive_rng(cfg.seed, KEY_EVAL, si)
        x, _ = dist.sample(cfg.n_eval, rng)
        noisy = x + sigma * rng.standard_normal(x.shape)
        a = purify(oracle, noisy, sigma, grid)
        b = purify(model, noisy, sigma, grid)
        if dist.is_discrete and dist.dim > 1:
            same = dist.nearest_data_point(a)[1] == dist.nearest_data_point(b)[1]
        else:
            same = np.all(np.sign(a) == np.sign(b), axis=1)
        out[repr(sigma)] = float(np.mean(same))
    return out


def _transport_by_sigma(dist, grid, net, cfg) -> dict:
    kind = ConsistencyNetPurifier(net)
    seed = np.random.SeedSequence(cfg.seed, spawn_key=(KEY_EVAL,))
    return {repr(s): estimate_transport(dist, kind, s, cfg.n_eval, cfg.r_grid, grid, seed, cfg.workers).mean_dist for s in cfg.sigmas}


def _train(cfg: ExperimentConfig, phase: str) -> int:
    dist = load_distribution(cfg)
    grid = build_grid(cfg)
    out = _out_dir(cfg)
    ckpt_out = Path(cfg.checkpoint_out or out / ("cm_net.json" if phase == "distill" else "cm_net_ft.json"))
    log_path = out / f"{phase}_log.jsonl"
    prov = provenance(cfg)
    with open(log_path, "w") as log_fh:

        def log(record):
            log_fh.write(json.dumps({**prov, **record}) + "\n")
            log_fh.flush()

        try:
            if phase == "distill":
                net = init_net(dist.dim, eps=grid.eps, rng=derive_rng(cfg.seed, 0))
                dcfg = DistillConfig(
                    grid=grid,
                    batch=cfg.batch,
                    iters=4000 if cfg.iters is None else cfg.iters,
                    ema_decay=cfg.ema_decay,
                    lr=1e-3 if cfg.lr is None else cfg.lr,
                    loss=loss_kind(cfg.loss or "l2", dist.dim),
                    seed=cfg.seed,
                )
                net = distill(dist, net, dcfg, log=log)
                log({"phase": "eval", "oracle_agreement": _agreement(dist, grid, net, cfg)})
                save_checkpoint(net, ckpt_out)
            else:
                if cfg.checkpoint is None:
                    raise UsageError("finetune requires --checkpoint")
                net = load_checkpoint(cfg.checkpoint)
                fcfg = FinetuneConfig(
                    sigmas=cfg.sigmas,
                    batch=cfg.batch,
                    iters=2000 if cfg.iters is None else cfg.iters,
                    lr=1e-4 if cfg.lr is None else cfg.lr,
                    loss=loss_kind(cfg.loss or "feature", dist.dim),
                    seed=cfg.seed,
                    schedule=cfg.schedule,
                )
                before = _transport_by_sigma(dist, grid, net, cfg)
                tuned = finetune(dist, net, grid, fcfg, log=log)
                after = _transport_by_sigma(dist, grid, tuned, cfg)
                log({"phase": "eval", "transport_before": before, "transport_after": after})
                save_checkpoint(tuned, ckpt_out)
        except TrainingError as exc:
            log({"phase": "error", "iter": exc.iteration, "last_finite_loss": exc.last_loss})
            print(f"error: training diverged at iteration {exc.iteration}; last finite loss {exc.last_loss}", file=sys.stderr)
            return EXIT_TRAINING
    print(f"wrote {ckpt_out} and {log_path}")
    return EXIT_OK


def cmd_distill(cfg: ExperimentConfig) -> int:
    return _train(cfg, "distill")


def cmd_finetune(cfg: ExperimentConfig) -> int:
    return _train(cfg, "finetune")


def cmd_transport(cfg: ExperimentConfig) -> int:
    dist = load_distribution(cfg)
    grid = build_grid(cfg)
    names = list(cfg.purifiers)
    if cfg.checkpoint is not None and "cm-net" not in names:
        names.append("cm-net")
    kinds = {name: build_purifier(name, cfg, dist, grid) for name in names}
    out = _out_dir(cfg)
    est_rows, report_rows, failures = [], [], []
    for name, kind in kinds.items():
        for sigma in cfg.sigmas:
            est = estimate_transport(dist, kind, sigma, cfg.n, cfg.r_grid, grid, cfg.seed, cfg.workers)
            est_rows.append([name, _g(sigma), est.n, _g(est.mean_dist), _g(est.std_err)] + [_g(p) for _, p in est.exceedance])
            for chk in markov_bound_report(est):
                report_rows.append([name, _g(sigma), _g(chk.r), _g(chk.exceedance), _g(chk.bound), _g(chk.slack), int(chk.passed)])
                if not chk.passed:
                    failures.append((name, sigma, chk.r))
    _write_csv(out / "transport.csv", ["kind", "sigma", "n", "mean_dist", "std_err"] + [f"r_{r!r}" for r in cfg.r_grid], est_rows, cfg)
    _write_csv(out / "markov_report.csv", ["kind", "sigma", "r", "exceedance", "bound", "slack", "pass"], report_rows, cfg)
    for row in est_rows:
        print(f"{row[0]:>10}  sigma={float(row[1]):<5}  transport={float(row[3]):.5f} +- {float(row[4]):.5f}")
    if failures:
        for name, sigma, r in failures:
            print(f"markov bound violated: kind={name} sigma={sigma!r} r={r!r}", file=sys.stderr)
        return EXIT_PROPERTY
    print(f"markov bound holds for all {len(report_rows)} checks (n={cfg.n})")
    return EXIT_OK


def _demo_starts(count: int) -> np.ndarray:
    half = np.linspace(0.05, 3.0, (count + 1) // 2)
    return np.concatenate([half, -half])[:count]


def cmd_ode_demo(cfg: ExperimentConfig) -> int:
    dist = load_distribution(cfg)
    if dist.dim != 1:
        raise UsageError(f"ode-demo needs a one-dimensional distribution, got dim={dist.dim}")
    out = _out_dir(cfg)
    starts = _demo_starts(cfg.num_trajectories)[:, None]
    ts, path = solve_pf_ode(dist.score, starts, cfg.t_start, OdeSolverConfig("heun", cfg.demo_steps, cfg.t_end), return_path=True)
    rows = [[j, _g(t), _g(path[k, j, 0])] for j in range(len(starts)) for k, t in enumerate(ts)]
    _write_csv(out / "trajectories.csv", ["trajectory", "t", "x"], rows, cfg)

    xs = np.linspace(-3.0, 3.0, 61)
    xs[30] = 0.0
    t_values = (0.1, 0.25, 0.5, 1.0, 2.0)
    pm_rows, score_rows = [], []
    for t in t_values:
        pm = dist.posterior_mean(xs[:, None], t)[:, 0]
        sc = dist.score(xs[:, None], t)[:, 0]
        pm_rows += [[_g(t), _g(x), _g(v)] for x, v in zip(xs, pm)]
        score_rows += [[_g(t), _g(x), _g(v)] for x, v in zip(xs, sc)]
    _write_csv(out / "posterior_mean.csv", ["t", "x", "posterior_mean"], pm_rows, cfg)
    _write_csv(out / "score_field.csv", ["t", "x", "score"], score_rows, cfg)

    crossed = int(np.sum(np.any(np.sign(path[:, :, 0]) != np.sign(path[0, :, 0]), axis=0)))
    end_err = float(np.max(np.abs(np.abs(path[-1, :, 0]) - 1.0)))
    print(f"{len(starts)} trajectories from t={cfg.t_start} to {cfg.t_end}; sign changes: {crossed}; max |end| - 1: {end_err:.2e}")
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out_dir)
    curves = sorted(glob.glob(str(out / "curve_*.csv")))
    transport = out / "transport.csv"
    if not curves and not transport.is_file():
        raise UsageError(f"no result files found in {out}")
    summary = {"provenance": provenance(cfg), "certified_accuracy": {}, "transport": []}
    eps_col, columns = None, {}
    for path in curves:
        name = Path(path).stem[len("curve_"):]
        header, rows = _read_csv(path)
        eps_col = [r[0] for r in rows]
        columns[name] = [r[header.index("best")] for r in rows]
        summary["certified_accuracy"][name] = {r[0]: float(r[header.index("best")]) for r in rows}
    if columns:
        names = sorted(columns)
        _write_csv(out / "summary.csv", ["eps"] + [f"best_{n}" for n in names], [[e] + [columns[n][i] for n in names] for i, e in enumerate(eps_col)], cfg)
    if transport.is_file():
        header, rows = _read_csv(transport)
        summary["transport"] = [dict(zip(header, r)) for r in rows]
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out / 'summary.json'}")
    return EXIT_OK


COMMANDS = {
    "certify": cmd_certify,
    "distill": cmd_distill,
    "finetune": cmd_finetune,
    "transport": cmd_transport,
    "ode-demo": cmd_ode_demo,
    "report": cmd_report,
}


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    add = common.add_argument
    add("--config", help="key = value config file; flags override it")
    add("--dist", help="built-in distribution: " + ", ".join(sorted(BUILTIN)))
    add("--dist-file", help="distribution definition file")
    add("--t-eps", type=float)
    add("--t-max", type=float)
    add("--rho", type=float)
    add("--grid-n", type=int)
    add("--purifier", choices=["onestep", "pfode", "sde", "cm-oracle", "cm-net", "identity", "nearest", "shift"])
    add("--purifiers", help="comma-separated purifier list (transport)")
    add("--solver", choices=["euler", "heun"])
    add("--ode-steps", type=int)
    add("--sde-steps", type=int)
    add("--checkpoint")
    add("--shift", type=float, help="offset of the 'shift' diagnostic purifier")
    add("--classifier")
    add("--sigmas")
    add("--n0", type=int)
    add("--n-cert", type=int)
    add("--alpha", type=float)
    add("--num-points", type=int)
    add("--eps-grid")
    add("--n", type=int, help="transport draws")
    add("--r-grid")
    add("--iters", type=int)
    add("--batch", type=int)
    add("--lr", type=float)
    add("--ema-decay", type=float)
    add("--loss", choices=["l1", "l2", "feature"])
    add("--schedule", choices=["discrete", "continuous"])
    add("--checkpoint-out")
    add("--n-eval", type=int)
    add("--num-trajectories", type=int)
    add("--t-start", type=float)
    add("--t-end", type=float)
    add("--demo-steps", type=int)
    add("--seed", type=int)
    add("--workers", type=int)
    add("--out-dir")

    parser = argparse.ArgumentParser(prog="purifylab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    overrides = {k: v for k, v in vars(args).items() if k != "command"}
    try:
        cfg = resolve(overrides)
        return COMMANDS[args.command](cfg)
    except (UsageError, DomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
