"""Drive one datum's likelihood contribution up along a blow-up path.

The decoder mean is pinned to x_i and the variance collapses on a thin slab
of latent space as alpha grows.  The target contribution climbs without
bound while every other datum stays above its analytic floor.  Without a
variance floor the maximum-likelihood problem is therefore ill-posed.

    python3 demos/blowup_path.py
"""

import numpy as np

from dlvm.blowup import BlowupSpec, blowup_trace, constrained_bound
from dlvm.data import synth_data


def main():
    ds, _ = synth_data("ppca", {"p": 5, "d": 2}, n=50, seed=2)
    spec = BlowupSpec(index=0, w=np.array([0.6, 0.8]), alphas=np.arange(0.0, 21.0, 4.0), mc_samples=50_000, seed=3)
    trace = blowup_trace(ds.X, spec)
    print(f"{'alpha':>6} {'log p(x_i)':>12} {'+-':>6} {'quadrature':>11} {'min other':>10} {'floor':>9}")
    for row in zip(trace.alphas, trace.contrib_i, trace.stderr_i, trace.quadrature_i, trace.min_contrib_other, trace.floor_other):
        print("{:6.1f} {:12.3f} {:6.3f} {:11.3f} {:10.3f} {:9.3f}".format(*row))
    print(f"growth over the grid: {trace.growth:.1f} nats; others above floor: {trace.others_above_floor()}")
    print(f"with a variance floor xi = 1/16 no datum can exceed {constrained_bound(5, 2.0**-4):.3f} nats")


if __name__ == "__main__":
    main()
