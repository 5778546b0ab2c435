"""Certified accuracy of several purifiers on the 2D four-atom task.

Test points come from the data distribution; the base classifier is nearest
centroid. Reports accuracy at each radius, best over the noise levels.

    python scripts/certify_four_atoms.py --points 50 --n-cert 1000
"""

import argparse
import time

import numpy as np

from purifylab.distributions import four_dirac
from purifylab.purifiers import make_purifier
from purifylab.smoothing import best_over_sigma, certified_accuracy_curve, certify, nearest_centroid_for
from purifylab.timegrid import KarrasGrid


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--purifiers", default="onestep,pfode,sde,cm-oracle")
    ap.add_argument("--sigmas", default="0.25,0.5,1.0")
    ap.add_argument("--eps", default="0,0.5,1,1.5,2,2.5")
    ap.add_argument("--points", type=int, default=50)
    ap.add_argument("--n0", type=int, default=100)
    ap.add_argument("--n-cert", type=int, default=1000)
    ap.add_argument("--alpha", type=float, default=0.001)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    sigmas = [float(s) for s in args.sigmas.split(",")]
    eps = [float(e) for e in args.eps.split(",")]

    d, grid = four_dirac(), KarrasGrid()
    clf = nearest_centroid_for(d)
    points, labels = d.sample(args.points, np.random.default_rng(args.seed))
    print(f"{'purifier':>10} " + " ".join(f"{'eps=' + repr(e):>9}" for e in eps) + "   time")
    for name in args.purifiers.split(","):
        purifier = make_purifier(name, d, grid=grid)
        start = time.perf_counter()
        curves = {}
        for si, sigma in enumerate(sigmas):
            results = []
            for i, (x, y) in enumerate(zip(points, labels)):
                seed = np.random.SeedSequence(args.seed, spawn_key=(si, i))
                results.append((certify(purifier, clf, x, sigma, args.n0, args.n_cert, args.alpha, grid, seed, args.workers), int(y)))
            curves[sigma] = certified_accuracy_curve(results, eps)
        best = best_over_sigma(curves)
        print(f"{name:>10} " + " ".join(f"{a:>9.3f}" for a in best) + f"  {time.perf_counter() - start:5.0f}s")


if __name__ == "__main__":
    main()
