"""ELBO and importance-sampling estimators, gradients, Adam, initialisation and the training loop."""

import math

import numpy as np
import pytest

from dlvm import autodiff as ad
from dlvm.data import synth_data
from dlvm.distributions import make_rng
from dlvm.model import BERNOULLI, LinearGaussianModel
from dlvm.training import (
    AdamState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    elbo_estimate,
    elbo_gradient,
    elbo_gradient_path_derivative,
    elbo_log_weights,
    glorot_init,
    init_decoder,
    init_encoder,
    marginal_loglik_importance,
    paired_bounds,
    train,
)


@pytest.fixture(scope="module")
def ppca():
    rng = np.random.default_rng(0)
    model = LinearGaussianModel(rng.standard_normal((5, 2)), rng.standard_normal(5), 0.4)
    X = rng.multivariate_normal(model.offset, model.marginal_cov, size=8)
    return model, X


class TestElboEstimate:
    def test_perfect_posterior_equals_exact_loglik(self, ppca):
        model, X = ppca
        enc = model.exact_encoder()
        x = X[:1]
        Xr = np.repeat(x, 10_000, axis=0)
        rng = make_rng(1)
        lw = elbo_log_weights(model, enc, Xr, rng.standard_normal((10_000, 2)), rng.standard_normal(10_000))
        exact = model.log_marginal(x)[0]
        se = lw.std() / math.sqrt(lw.size)
        assert abs(lw.mean() - exact) <= 3 * se + 1e-10
        # with the exact posterior every log weight equals log p(x)
        np.testing.assert_allclose(lw, exact, atol=1e-10)

    def test_wrong_encoder_is_below_loglik(self, ppca):
        model, X = ppca
        est = elbo_estimate(model, model.exact_encoder(shift=0.7), X[:1], 10_000, make_rng(2))
        assert est < model.log_marginal(X[:1])[0]

    def test_bernoulli_always_negative(self):
        rng = make_rng(3)
        theta = init_decoder(2, 8, 6, rng, BERNOULLI)
        gamma = init_encoder(2, 8, 6, rng)
        X = (rng.random((20, 6)) < 0.5).astype(float)
        for _ in range(20):
            assert elbo_estimate(theta, gamma, X, 1, rng) < 0

    def test_variance_shrinks_like_one_over_L(self, ppca):
        model, X = ppca
        enc = model.exact_encoder(shift=0.5)
        rng = make_rng(4)
        v1 = np.var([elbo_estimate(model, enc, X[:1], 1, rng) for _ in range(2000)])
        v16 = np.var([elbo_estimate(model, enc, X[:1], 16, rng) for _ in range(2000)])
        assert v1 / v16 == pytest.approx(16, rel=0.25)

    def test_rejects_zero_samples(self, ppca):
        model, X = ppca
        with pytest.raises(ValueError):
            elbo_estimate(model, model.exact_encoder(), X, 0, make_rng(0))


class TestPathDerivative:
    def test_encoder_gradient_vanishes_at_exact_posterior(self, ppca):
        model, X = ppca
        for seed in range(5):
            g = elbo_gradient_path_derivative(model, model.exact_encoder(), X[:1], 1, make_rng(seed))
            for v in g.gamma.values():
                np.testing.assert_allclose(v, 0.0, atol=1e-10)

    def test_plain_estimator_gradient_is_not_zero_there(self, ppca):
        model, X = ppca
        g = elbo_gradient(model, model.exact_encoder(), X[:1], 1, make_rng(0), path_derivative=False)
        assert max(np.abs(v).max() for v in g.gamma.values()) > 1e-3

    def test_decoder_gradient_matches_finite_differences(self):
        rng = make_rng(5)
        theta = init_decoder(2, 4, 3, rng, xi=0.1)
        gamma = init_encoder(2, 4, 3, rng)
        X = np.random.default_rng(0).standard_normal((4, 3))
        g = elbo_gradient_path_derivative(theta, gamma, X, 2, make_rng(11))
        step = 1e-6
        worst = 0.0
        for name, arr in theta.arrays().items():
            for j in range(arr.size):
                plus, minus = arr.copy(), arr.copy()
                plus.flat[j] += step
                minus.flat[j] -= step
                f_p = elbo_estimate(theta.with_arrays({name: plus}), gamma, X, 2, make_rng(11))
                f_m = elbo_estimate(theta.with_arrays({name: minus}), gamma, X, 2, make_rng(11))
                fd = (f_p - f_m) / (2 * step)
                worst = max(worst, abs(g.theta[name].flat[j] - fd) / max(1.0, abs(fd)))
        assert worst < 1e-4

    def test_decoder_gradient_unchanged_by_stop_gradient(self):
        rng = make_rng(6)
        theta = init_decoder(2, 4, 3, rng)
        gamma = init_encoder(2, 4, 3, rng)
        X = np.random.default_rng(1).standard_normal((5, 3))
        a = elbo_gradient(theta, gamma, X, 1, make_rng(7), path_derivative=True)
        b = elbo_gradient(theta, gamma, X, 1, make_rng(7), path_derivative=False)
        assert a.value == b.value
        for k in a.theta:
            np.testing.assert_array_equal(a.theta[k], b.theta[k])

    def test_encoder_gradient_matches_tape_oracle(self):
        rng = make_rng(8)
        theta = init_decoder(2, 3, 3, rng)
        gamma = init_encoder(2, 3, 3, rng)
        X = np.random.default_rng(2).standard_normal((3, 3))
        noise = make_rng(9)
        eps, eps1 = noise.standard_normal((3, 2)), noise.standard_normal(3)
        names = list(gamma.arrays())

        def f(*arrays):
            g = gamma.with_arrays(dict(zip(names, arrays)))
            return ad.mean(elbo_log_weights(theta, g, X, eps, eps1))

        assert ad.grad_check(f, [gamma.arrays()[k] for k in names]) < 1e-5


class TestAdam:
    def test_first_step(self):
        params = {"x": np.array([1.0])}
        new, state = adam_step(params, {"x": np.array([1.0])}, AdamState.zeros_like(params), 1e-4)
        assert new["x"][0] - 1.0 == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)
        assert state.t == 1

    def test_zero_gradient(self):
        params = {"x": np.array([2.0, -1.0])}
        new, _ = adam_step(params, {"x": np.zeros(2)}, AdamState.zeros_like(params), 1e-3)
        np.testing.assert_array_equal(new["x"], params["x"])

    def test_quadratic_bowl(self):
        target = np.array([1.0, -2.0, 0.5])
        params = {"x": np.zeros(3)}
        state = AdamState.zeros_like(params)
        for _ in range(100_000):
            params, state = adam_step(params, {"x": 2 * (params["x"] - target)}, state, 1e-3)
        np.testing.assert_allclose(params["x"], target, atol=1e-3)

    def test_state_shape_check(self):
        params = {"x": np.zeros(2)}
        state = AdamState({"x": np.zeros(3)}, {"x": np.zeros(3)})
        with pytest.raises(ValueError):
            adam_step(params, {"x": np.zeros(2)}, state, 1e-3)


class TestGlorot:
    def test_unit_shape_bounds(self):
        draws = np.array([glorot_init((1, 1), make_rng(s))[0, 0] for s in range(2000)])
        assert np.all(np.abs(draws) <= math.sqrt(3))
        assert np.abs(draws).max() > 0.95 * math.sqrt(3)

    def test_variance(self):
        W = glorot_init((300, 400), make_rng(0))
        assert W.var() == pytest.approx(2 / 700, rel=0.05)

    def test_reproducible(self):
        np.testing.assert_array_equal(glorot_init((3, 4), make_rng(1)), glorot_init((3, 4), make_rng(1)))

    def test_biases_zero(self):
        theta = init_decoder(2, 3, 4, make_rng(0))
        assert not theta.a.any() and not theta.b.any() and not theta.beta.any()

    def test_rejects_non_matrix(self):
        with pytest.raises(ValueError):
            glorot_init((3,), make_rng(0))


class TestImportance:
    def test_k1_is_single_elbo_term(self, ppca):
        model, X = ppca
        enc = model.exact_encoder(shift=0.3)
        a = marginal_loglik_importance(model, enc, X[0], 1, make_rng(3))
        b = elbo_estimate(model, enc, X[:1], 1, make_rng(3))
        assert a == pytest.approx(b, rel=1e-14)

    def test_closed_form_ppca(self, ppca):
        model, X = ppca
        enc = model.exact_encoder(shift=0.3)
        reps = [marginal_loglik_importance(model, enc, X[1], 10_000, make_rng(s)) for s in range(20)]
        se = np.std(reps, ddof=1) / math.sqrt(len(reps))
        assert abs(np.mean(reps) - model.log_marginal(X[1])[0]) < 3 * max(se, 1e-4)

    def test_monotone_in_k(self, ppca):
        model, X = ppca
        enc = model.exact_encoder(shift=0.8)
        rng = make_rng(5)
        k1 = np.mean([marginal_loglik_importance(model, enc, X[2], 1, rng) for _ in range(100)])
        k100 = np.mean([marginal_loglik_importance(model, enc, X[2], 100, rng) for _ in range(100)])
        assert k100 >= k1

    def test_paired_bounds_order(self, ppca):
        model, X = ppca
        pb = paired_bounds(model, model.exact_encoder(shift=0.5), X, 64, make_rng(6))
        assert np.all(pb.elbo <= pb.iw)
        assert pb.total_elbo <= pb.total_iw


@pytest.fixture(scope="module")
def data():
    ds, _ = synth_data("ppca", {"p": 10, "d": 2}, n=600, seed=0)
    return ds.X[:500], ds.X[500:]


class TestTrain:
    def test_heldout_elbo_improves(self, data):
        cfg = TrainConfig(d=2, h=16, p=10, xi=2**-4, steps=2000, seed=0)
        _, trace = train(cfg, *data)
        heldout = trace.column("heldout_elbo")
        assert heldout[-1] - heldout[0] >= 10.0
        assert np.all(np.diff(trace.column("step")) >= 0)

    def test_zero_steps_returns_initialisation(self, data):
        cfg = TrainConfig(d=2, h=4, p=10, steps=0, seed=3)
        ckpt, _ = train(cfg, data[0])
        rng = make_rng(3).spawn(4)[0]
        theta = init_decoder(2, 4, 10, rng)
        gamma = init_encoder(2, 4, 10, rng)
        for k, v in theta.arrays().items():
            np.testing.assert_array_equal(ckpt.decoder.arrays()[k], v)
        for k, v in gamma.arrays().items():
            np.testing.assert_array_equal(ckpt.encoder.arrays()[k], v)

    def test_bit_reproducible(self, data):
        cfg = TrainConfig(d=2, h=4, p=10, steps=60, seed=1)
        a, ta = train(cfg, data[0])
        b, tb = train(cfg, data[0])
        for k, v in a.decoder.arrays().items():
            assert v.tobytes() == b.decoder.arrays()[k].tobytes()
        assert ta.minibatch_elbo == tb.minibatch_elbo

    def test_bernoulli_trace_negative(self):
        ds, _ = synth_data("bernoulli-mixture", {}, n=200, seed=1)
        cfg = TrainConfig(d=2, h=8, p=64, output_kind=BERNOULLI, steps=300, seed=0, learning_rate=1e-3)
        _, trace = train(cfg, ds.X, ds.X[:50])
        assert np.all(np.array(trace.minibatch_elbo) < 0)
        assert np.all(trace.column("train_elbo") < 0)
        assert np.all(trace.column("heldout_elbo") < 0)

    def test_divergence_guard(self, data):
        cfg = TrainConfig(d=2, h=4, p=10, steps=5, seed=0, divergence_threshold=1.0)
        with pytest.raises(TrainingDiverged) as info:
            train(cfg, data[0])
        assert info.value.step == 1
        assert "dec.W" in info.value.param_norms

    def test_invalid_config(self, data):
        with pytest.raises(ValueError, match="learning_rate"):
            train(TrainConfig(d=2, h=4, p=10, learning_rate=0.0), data[0])

    def test_metrics_csv(self, data, tmp_path):
        cfg = TrainConfig(d=2, h=4, p=10, steps=100, seed=0, batch_size=50, iw_samples=8)
        _, trace = train(cfg, *data)
        path = trace.to_csv(tmp_path / "m.csv", {"seed": 0})
        lines = path.read_text().splitlines()
        assert lines[0] == "# seed=0"
        assert lines[1] == "step,train_elbo,heldout_elbo,iw_loglik,clamps,seconds"
        assert len(lines) == 2 + len(trace.records)
        assert np.all(trace.column("heldout_elbo") <= trace.column("iw_loglik") + 0.5)
