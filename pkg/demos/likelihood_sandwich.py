"""Bracket a trained model's log-likelihood from both sides.

The ELBO and the importance-weighted estimate bound the model's
log-likelihood from below.  A finite Gaussian mixture, fitted by EM under
the same variance floor, bounds it from above.  The gap between the IW
estimate and the mixture bound is the likelihood the decoder gives up by
being a smooth map (the parsimony gap).

    python3 demos/likelihood_sandwich.py
"""

from dlvm.data import synth_data
from dlvm.distributions import make_rng
from dlvm.mixture import nonparametric_bound, sandwich_report
from dlvm.training import TrainConfig, paired_bounds, train


def main():
    xi = 2.0**-4
    ds, _ = synth_data("ppca", {"p": 10, "d": 2, "noise_var": 0.5}, n=200, seed=6)
    ckpt, trace = train(TrainConfig(d=2, h=16, p=10, xi=xi, learning_rate=1e-3, batch_size=20, steps=3000, seed=0), ds.X)
    print(f"trained {trace.records[-1].step} steps, final train ELBO per datum {trace.records[-1].train_elbo:.3f}")
    pb = paired_bounds(ckpt.decoder, ckpt.encoder, ds.X, 256, make_rng(7))
    bound = nonparametric_bound(ds.X, "gaussian", xi, restarts=5, rng=0)
    for K, ll, best in bound.schedule:
        print(f"  K={K:4d}  EM log-likelihood {ll:10.2f}  best so far {best:10.2f}")
    rep = sandwich_report(pb.total_elbo, pb.total_iw, bound.loglik, pb.total_elbo_se, pb.total_iw_se)
    print(f"ELBO {rep.elbo:.2f} (+-{rep.elbo_se:.2f}) <= IW {rep.iw_loglik:.2f} (+-{rep.iw_se:.2f}) <= bound {rep.bound:.2f}")
    print(f"parsimony gap <= {rep.parsimony_gap:.2f} nats, ordered: {rep.ordered}")


if __name__ == "__main__":
    main()
