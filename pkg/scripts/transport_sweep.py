"""Transport of each purifier on the two-atom data across noise levels.

Distills a consistency net, fine-tunes a copy, then estimates E||x - purify(x + sigma z)||
for every purifier with paired draws. Writes a CSV and prints a table.

    python scripts/transport_sweep.py --n 20000 --out transport_sweep.csv
"""

import argparse
import csv
import time

import numpy as np

from purifylab.distributions import two_dirac
from purifylab.nn import init_net
from purifylab.purifiers import ConsistencyNetPurifier, make_purifier
from purifylab.timegrid import KarrasGrid
from purifylab.training import DistillConfig, FinetuneConfig, distill, finetune, loss_kind
from purifylab.transport import DEFAULT_R_GRID, transport_comparison


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20_000)
    ap.add_argument("--sigmas", default="0.25,0.5,0.75,1.0")
    ap.add_argument("--distill-iters", type=int, default=4000)
    ap.add_argument("--finetune-iters", type=int, default=2000)
    ap.add_argument("--loss", default="feature", choices=["l1", "l2", "feature"])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="transport_sweep.csv")
    args = ap.parse_args()
    sigmas = [float(s) for s in args.sigmas.split(",")]

    d, grid = two_dirac(), KarrasGrid()
    start = time.perf_counter()
    net = distill(d, init_net(1, eps=grid.eps, rng=np.random.default_rng(args.seed)), DistillConfig(grid=grid, iters=args.distill_iters, seed=args.seed))
    tuned = finetune(d, net, grid, FinetuneConfig(iters=args.finetune_iters, loss=loss_kind(args.loss, 1), seed=args.seed + 1))
    print(f"trained in {time.perf_counter() - start:.0f}s")

    kinds = {name: make_purifier(name, d, grid=grid) for name in ("onestep", "pfode", "sde", "cm-oracle")}
    kinds["cm-net"] = ConsistencyNetPurifier(net)
    kinds["cm-net-ft"] = ConsistencyNetPurifier(tuned)
    table = transport_comparison(d, kinds, sigmas, args.n, DEFAULT_R_GRID, grid, args.seed, args.workers)

    print(f"{'purifier':>10} " + " ".join(f"{'sigma=' + repr(s):>18}" for s in sigmas))
    for name in kinds:
        cells = [f"{table[name, s].mean_dist:.4f} +- {table[name, s].std_err:.4f}" for s in sigmas]
        print(f"{name:>10} " + " ".join(f"{c:>18}" for c in cells))

    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "sigma", "n", "mean_dist", "std_err"] + [f"r_{r!r}" for r in DEFAULT_R_GRID])
        for (name, s), est in table.items():
            w.writerow([name, s, est.n, f"{est.mean_dist:.17g}", f"{est.std_err:.17g}"] + [f"{p:.17g}" for _, p in est.exceedance])
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
