"""Decoder/encoder parametrisations and checkpoint persistence."""

import json

import numpy as np
import pytest

from dlvm import autodiff as ad
from dlvm.blowup import BlowupSpec, make_blowup_params
from dlvm.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from dlvm.distributions import BERNOULLI_EPS, make_rng
from dlvm.model import (
    BERNOULLI,
    GAUSSIAN,
    DecoderParams,
    EncoderParams,
    LinearGaussianModel,
    decode_bernoulli,
    decode_gaussian,
    diag_plus_rank1,
    encode,
)
from dlvm.training import init_decoder, init_encoder


def random_decoder(rng, d=2, h=4, p=3, kind=GAUSSIAN, xi=0.0, scale=1.0):
    return DecoderParams(
        W=scale * rng.standard_normal((h, d)),
        a=scale * rng.standard_normal(h),
        V=scale * rng.standard_normal((p, h)),
        b=scale * rng.standard_normal(p),
        alpha=scale * rng.standard_normal((p, h)),
        beta=scale * rng.standard_normal(p),
        output_kind=kind,
        xi=xi,
    )


def zero_encoder(d=2, h=3, p=4):
    return EncoderParams(
        W=np.zeros((h, p)),
        a=np.zeros(h),
        W_mean=np.zeros((d, h)),
        b_mean=np.zeros(d),
        W_logdiag=np.zeros((d, h)),
        b_logdiag=np.zeros(d),
        W_u=np.zeros((d, h)),
        b_u=np.zeros(d),
    )


class TestDecodeGaussian:
    def test_zero_preactivation(self):
        theta = random_decoder(np.random.default_rng(0), xi=0.3)
        theta.a[:] = 0.0
        mean, var = decode_gaussian(theta, np.zeros(2))
        np.testing.assert_allclose(mean, theta.b, rtol=0, atol=0)
        np.testing.assert_allclose(var, np.exp(theta.beta) + 0.3, rtol=1e-15)

    def test_blowup_decoder_mean_is_the_datum(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((6, 4))
        spec = BlowupSpec(index=2, w=np.array([1.0, -0.5]), alphas=np.array([0.0, 3.0, 7.0]))
        for k in range(3):
            theta = make_blowup_params(X, spec, k)
            mean, _ = decode_gaussian(theta, rng.standard_normal((50, 2)))
            np.testing.assert_array_equal(mean, np.broadcast_to(X[2], mean.shape))

    def test_floor_on_random_pairs(self):
        rng = np.random.default_rng(2)
        worst = np.inf
        for _ in range(100):
            theta = random_decoder(rng, xi=0.1, scale=3.0)
            _, var = decode_gaussian(theta, 5 * rng.standard_normal((100, 2)))
            worst = min(worst, var.min())
        assert worst >= 0.1

    def test_wrong_kind(self):
        theta = random_decoder(np.random.default_rng(3), kind=BERNOULLI)
        with pytest.raises(ValueError):
            decode_gaussian(theta, np.zeros(2))

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            DecoderParams(np.zeros((3, 2)), np.zeros(4), np.zeros((2, 3)), np.zeros(2), np.zeros((2, 3)), np.zeros(2))

    def test_deterministic(self):
        theta = random_decoder(np.random.default_rng(4))
        z = np.array([0.3, -0.2])
        a, b = decode_gaussian(theta, z), decode_gaussian(theta, z)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])


class TestDecodeBernoulli:
    def test_zero_output_layer(self):
        theta = random_decoder(np.random.default_rng(0), kind=BERNOULLI)
        theta.V[:] = 0.0
        theta.b[:] = 0.0
        np.testing.assert_array_equal(decode_bernoulli(theta, np.ones(2)), np.full(3, 0.5))

    def test_saturation_is_clamped(self):
        theta = random_decoder(np.random.default_rng(0), kind=BERNOULLI)
        theta.V[:] = 0.0
        theta.b[:] = 50.0
        np.testing.assert_array_equal(decode_bernoulli(theta, np.ones(2)), np.full(3, 1 - BERNOULLI_EPS))

    def test_valid_probabilities(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            probs = decode_bernoulli(random_decoder(rng, kind=BERNOULLI, scale=10.0), 10 * rng.standard_normal((20, 2)))
            assert np.all((probs > 0) & (probs < 1))


class TestEncode:
    def test_all_zero_weights(self):
        q = encode(zero_encoder(), np.arange(4.0))
        np.testing.assert_array_equal(q.mean, np.zeros(2))
        np.testing.assert_array_equal(q.diag, np.ones(2))
        np.testing.assert_array_equal(q.u, np.zeros(2))

    def test_diag_positive(self):
        rng = np.random.default_rng(6)
        gamma = init_encoder(3, 5, 4, rng)
        gamma.b_logdiag[:] = -30.0
        q = encode(gamma, rng.standard_normal((10, 4)))
        assert np.all(q.diag > 0)

    def test_gradient(self):
        rng = np.random.default_rng(7)
        gamma = init_encoder(2, 4, 3, rng)
        x = rng.standard_normal((5, 3))
        names = EncoderParams.ARRAYS

        def f(*arrays):
            g = gamma.with_arrays(dict(zip(names, arrays)))
            mean, logdiag, u = g.encode(x)
            return ad.sum(mean * mean) + ad.sum(ad.exp(logdiag)) + ad.sum(ad.tanh(u))

        assert ad.grad_check(f, [gamma.arrays()[k] for k in names]) < 1e-5

    def test_decoder_mean_gradient(self):
        rng = np.random.default_rng(8)
        theta = random_decoder(rng)
        Z = rng.standard_normal((4, 2))
        names = DecoderParams.ARRAYS

        def f(*arrays):
            return ad.sum(theta.with_arrays(dict(zip(names, arrays))).output(Z)[0])

        assert ad.grad_check(f, [theta.arrays()[k] for k in names]) < 1e-5


class TestLinearGaussian:
    def test_exact_encoder_matches_posterior(self):
        rng = np.random.default_rng(9)
        model = LinearGaussianModel(rng.standard_normal((5, 2)), rng.standard_normal(5), 0.3)
        enc = model.exact_encoder()
        A, C = model.posterior()
        x = rng.standard_normal(5)
        q = encode(enc, x)
        np.testing.assert_allclose(q.mean, A @ (x - model.offset), atol=1e-12)
        np.testing.assert_allclose(np.diag(q.diag) + np.outer(q.u, q.u), C, atol=1e-12)

    def test_diag_plus_rank1_rejects_dense_d3(self):
        C = np.array([[2.0, 0.5, 0.1], [0.5, 2.0, 0.3], [0.1, 0.3, 2.0]])
        with pytest.raises(ValueError):
            diag_plus_rank1(C)

    def test_log_marginal_matches_dense(self):
        rng = np.random.default_rng(10)
        model = LinearGaussianModel(rng.standard_normal((3, 2)), np.zeros(3), 0.5)
        x = rng.standard_normal(3)
        C = model.marginal_cov
        expected = -0.5 * (x @ np.linalg.solve(C, x) + np.linalg.slogdet(C)[1] + 3 * np.log(2 * np.pi))
        assert model.log_marginal(x)[0] == pytest.approx(expected, rel=1e-12)


class TestCheckpoint:
    def make(self, kind=GAUSSIAN):
        rng = make_rng(0)
        return Checkpoint(init_decoder(2, 5, 4, rng, kind, 0.0625), init_encoder(2, 5, 4, rng), {"seed": 3, "steps": 7, "config_digest": "abc"})

    def test_round_trip_is_bitwise(self, tmp_path):
        ckpt = self.make()
        loaded = load_checkpoint(save_checkpoint(ckpt, tmp_path / "c.json"))
        for k, v in ckpt.decoder.arrays().items():
            assert np.array_equal(v, loaded.decoder.arrays()[k])
            assert v.tobytes() == loaded.decoder.arrays()[k].tobytes()
        for k, v in ckpt.encoder.arrays().items():
            assert v.tobytes() == loaded.encoder.arrays()[k].tobytes()
        assert loaded.decoder.xi == 0.0625
        assert loaded.meta == {"seed": 3, "steps": 7, "config_digest": "abc"}

    def test_truncated_file(self, tmp_path):
        path = save_checkpoint(self.make(), tmp_path / "c.json")
        path.write_text(path.read_text()[:-40])
        with pytest.raises(CheckpointError, match="corrupt"):
            load_checkpoint(path)

    def test_digest_mismatch(self, tmp_path):
        path = save_checkpoint(self.make(), tmp_path / "c.json")
        payload = json.loads(path.read_text())
        payload["decoder"]["b"][0] += 1.0
        path.write_text(json.dumps(payload))
        with pytest.raises(CheckpointError, match="digest"):
            load_checkpoint(path)

    def test_shape_mismatch(self, tmp_path):
        from dlvm.checkpoint import canonical_digest

        path = save_checkpoint(self.make(), tmp_path / "c.json")
        payload = json.loads(path.read_text())
        payload.pop("digest")
        payload["dims"]["p"] = 9
        payload["digest"] = canonical_digest(payload)
        path.write_text(json.dumps(payload))
        with pytest.raises(CheckpointError, match="shape"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope.json")

    def test_blowup_decoder_reevaluates_exactly(self, tmp_path):
        rng = np.random.default_rng(11)
        X = rng.standard_normal((4, 3))
        theta = make_blowup_params(X, BlowupSpec(1, np.array([0.6, 0.8]), np.array([0.0, 5.0])), 1)
        ckpt = Checkpoint(theta, init_encoder(2, 1, 3, rng), {})
        loaded = load_checkpoint(save_checkpoint(ckpt, tmp_path / "b.json"))
        Z = rng.standard_normal((30, 2))
        for a, b in zip(decode_gaussian(theta, Z), decode_gaussian(loaded.decoder, Z)):
            np.testing.assert_array_equal(a, b)
