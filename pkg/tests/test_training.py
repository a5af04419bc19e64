import numpy as np
import pytest

from conftest import digit_like
from satgrad.data import Dataset, Split
from satgrad.model import backward, forward, init_model, model_to_bytes
from satgrad.training import (
    TrainingConfig,
    TrainingDivergedError,
    evaluate_accuracy,
    fold_sharpening,
    hidden_saturation_fraction,
    parameter_count,
    saturation_penalty,
    total_loss,
    train,
)


def synthetic(n, seed=0, dims=784):
    """Separable toy digits: class k lights up its own block of pixels."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    x = digit_like(rng, n, dims) * 0.3
    block = dims // 10
    for i, k in enumerate(labels):
        x[i, k * block:(k + 1) * block] = np.maximum(x[i, k * block:(k + 1) * block], 0.9)
    return Dataset(x, labels, Split.TRAIN)


def trace_with_activations(acts):
    """A forward trace whose hidden activations are replaced by ``acts``."""
    m = init_model((4, 3, 2, 2), seed=0)
    t = forward(m, np.zeros((acts[0].shape[0], 4)), np.zeros(acts[0].shape[0], int))
    t.activations[:] = acts
    return t


class TestPenalty:
    def test_saturated_sigmoid_is_zero(self):
        t = trace_with_activations([np.array([[0.0, 1.0, 1.0]]), np.array([[1.0, 0.0]])])
        assert saturation_penalty(t, "sigmoid") == 0.0

    def test_half_activations_maximal(self):
        t = trace_with_activations([np.full((5, 3), 0.5), np.full((5, 2), 0.5)])
        assert saturation_penalty(t, "sigmoid") == 0.25 * 5

    def test_dead_relu_is_zero(self):
        t = trace_with_activations([np.zeros((2, 3)), np.zeros((2, 2))])
        assert saturation_penalty(t, "relu") == 0.0

    def test_relu_l1_batch_mean(self):
        t = trace_with_activations([np.array([[1.0, 2.0, 0.0], [3.0, 0.0, 0.0]]),
                                    np.array([[1.0, 1.0], [0.0, 0.0]])])
        assert saturation_penalty(t, "relu") == pytest.approx((3 + 3) / 2 + (2 + 0) / 2)

    def test_nonnegative(self, rng):
        m = init_model(seed=2)
        t = forward(m, digit_like(rng, 4))
        assert saturation_penalty(t, "sigmoid") > 0


class TestTotalLoss:
    def test_lambda_zero_is_cross_entropy(self, rng):
        m = init_model(seed=1)
        t = forward(m, digit_like(rng, 3), [1, 2, 3])
        assert total_loss(t, [1, 2, 3], 0.0, "sigmoid") == float(np.mean(t.losses))

    def test_saturated_trace_ignores_lambda(self):
        t = trace_with_activations([np.array([[0.0, 1.0, 1.0]]), np.array([[1.0, 0.0]])])
        ce = float(np.mean(t.losses))
        for lam in (0.0, 0.1, 1.0, 100.0):
            assert total_loss(t, [0], lam, "sigmoid") == ce

    def test_negative_lambda(self, rng):
        m = init_model(seed=1)
        with pytest.raises(ValueError):
            total_loss(forward(m, digit_like(rng, 1), [0]), [0], -1.0, "sigmoid")

    @pytest.mark.parametrize("activation", ["sigmoid", "relu"])
    def test_parameter_gradients_at_lambda_0_1(self, activation):
        # gradient of total_loss on a 10-unit net vs central differences
        m = init_model((6, 10, 10), activation, seed=3)
        rng = np.random.default_rng(9)
        m = m.with_params(m.weights, [rng.normal(0, 0.3, b.shape) for b in m.biases])
        x = rng.uniform(0.05, 0.95, size=(4, 6))
        y = rng.integers(0, 10, size=4)
        lam = 0.1
        rec = backward(m, forward(m, x, y), penalty_weight=lam, params=True)

        def objective(model):
            return total_loss(forward(model, x, y), y, lam, activation)

        h = 1e-5
        for k in range(m.n_layers):
            for which in ("w", "b"):
                ref = np.empty(m.weights[k].shape if which == "w" else m.biases[k].shape)
                for idx in np.ndindex(ref.shape):
                    vals = []
                    for d in (h, -h):
                        ws, bs = [w.copy() for w in m.weights], [b.copy() for b in m.biases]
                        (ws if which == "w" else bs)[k][idx] += d
                        vals.append(objective(m.with_params(ws, bs)))
                    ref[idx] = (vals[0] - vals[1]) / (2 * h)
                got = rec.weight_gradients[k] if which == "w" else rec.bias_gradients[k]
                assert np.max(np.abs(got - ref)) / np.max(np.abs(ref)) < 1e-5


class TestConfig:
    def test_defaults(self):
        c = TrainingConfig()
        assert (c.epochs, c.batch_size, c.learning_rate, c.optimizer) == (30, 128, 1e-3, "adam")
        assert (c.beta1, c.beta2) == (0.9, 0.999)

    @pytest.mark.parametrize("kwargs", [
        dict(epochs=0), dict(batch_size=0), dict(learning_rate=-1.0), dict(penalty_weight=-0.1),
        dict(optimizer="rmsprop"), dict(schedule="cosine"), dict(precision="binary16"),
        dict(sharpen_gain=3.0), dict(sharpen_logit_scale=0.5), dict(harden_gain=0.5),
        dict(harden_logit_scale=6.0),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TrainingConfig(**kwargs)

    def test_linear_ramp(self):
        c = TrainingConfig(epochs=10, penalty_weight=2.0)
        assert c.penalty_at(0) == 0.0
        assert c.penalty_at(2.5) == 1.0
        assert c.penalty_at(5) == 2.0
        assert c.penalty_at(9.9) == 2.0

    def test_delayed_ramp(self):
        c = TrainingConfig(epochs=10, penalty_weight=1.0, ramp_start_epoch=2, ramp_epochs=4)
        assert c.penalty_at(1.9) == 0.0
        assert c.penalty_at(4) == 0.5
        assert c.penalty_at(6) == 1.0

    def test_constant(self):
        assert TrainingConfig(penalty_weight=0.3, schedule="constant").penalty_at(0) == 0.3

    def test_sharpening_geometric(self):
        c = TrainingConfig(epochs=10, sharpen_gain=256.0, sharpen_start_epoch=2, sharpen_epochs=8)
        assert c.sharpening_at(0) == (1.0, 1.0)
        assert c.sharpening_at(6) == (16.0, 1.0)
        assert c.sharpening_at(10) == (256.0, 1.0)

    def test_round_trip(self):
        c = TrainingConfig(penalty_weight=0.5, dims=(10, 5, 3))
        assert TrainingConfig(**c.to_dict()) == c


class TestFold:
    def test_bitwise_equivalent(self, rng):
        m = init_model(seed=4)
        x = digit_like(rng, 5)
        sharp = m.replace(gain=64.0, logit_scale=8.0)
        folded = fold_sharpening(m, 64.0, 8.0)
        assert folded.gain == 1.0 and folded.logit_scale == 1.0
        assert forward(sharp, x).probs.tobytes() == forward(folded, x).probs.tobytes()

    def test_relu_scale(self, rng):
        m = init_model(seed=4, activation="relu")
        x = digit_like(rng, 5)
        a = forward(m.replace(logit_scale=4.0), x).probs
        b = forward(fold_sharpening(m, 1.0, 4.0), x).probs
        assert a.tobytes() == b.tobytes()


SMALL = dict(dims=(784, 32, 16, 10), epochs=3, batch_size=32, learning_rate=1e-2)


class TestTrain:
    def test_learns_separable_data(self):
        ds = synthetic(600)
        model, metrics = train(TrainingConfig(**SMALL), ds, "sigmoid")
        assert metrics.final.accuracy > 0.9
        assert len(metrics.history) == SMALL["epochs"]

    def test_deterministic(self):
        ds = synthetic(300, seed=1)
        cfg = TrainingConfig(**SMALL, penalty_weight=0.1)
        a, ma = train(cfg, ds, "relu")
        b, mb = train(cfg, ds, "relu")
        assert model_to_bytes(a) == model_to_bytes(b)
        assert ma == mb

    def test_zero_learning_rate_is_noop(self):
        ds = synthetic(200, seed=2)
        cfg = TrainingConfig(**{**SMALL, "epochs": 1, "learning_rate": 0.0})
        for opt in ("sgd", "momentum", "adam", "adamax"):
            model, _ = train(TrainingConfig(**{**cfg.to_dict(), "optimizer": opt}), ds, "sigmoid")
            init = init_model(cfg.dims, "sigmoid", cfg.seed)
            assert model_to_bytes(model) == model_to_bytes(init)

    def test_lambda_zero_matches_penalty_free_loop(self):
        # reference loop written without any penalty code
        ds = synthetic(256, seed=3)
        cfg = TrainingConfig(**{**SMALL, "optimizer": "sgd", "learning_rate": 0.1, "epochs": 1})
        model, _ = train(cfg, ds, "sigmoid")

        from satgrad.data import batches
        ref = init_model(cfg.dims, "sigmoid", cfg.seed)
        ws, bs = [np.array(w) for w in ref.weights], [np.array(b) for b in ref.biases]
        for xb, yb in batches(ds, cfg.batch_size, cfg.seed, 0):
            cur = ref.with_params(ws, bs)
            t = forward(cur, xb, yb)
            n = len(yb)
            delta = t.probs.copy()
            delta[np.arange(n), yb] -= 1
            gw, gb = [None] * 3, [None] * 3
            for k in (2, 1, 0):
                a_in = t.x if k == 0 else t.activations[k - 1]
                gw[k] = a_in.T @ delta / n
                gb[k] = delta.sum(axis=0) / n
                if k:
                    a = t.activations[k - 1]
                    delta = (delta @ cur.weights[k].T) * (a * (1 - a))
            for k in range(3):
                ws[k] -= 0.1 * gw[k]
                bs[k] -= 0.1 * gb[k]
        expected = ref.with_params(ws, bs)
        for p, q in zip(model.weights + model.biases, expected.weights + expected.biases):
            np.testing.assert_allclose(p, q, rtol=1e-12, atol=1e-15)
        # and the lambda = 0 path runs no penalty arithmetic at all
        t = forward(model, ds.images[:8], ds.labels[:8])
        r0 = backward(model, t, penalty_weight=0.0, params=True)
        r1 = backward(model, t, params=True)
        for g0, g1 in zip(r0.weight_gradients, r1.weight_gradients):
            assert g0.tobytes() == g1.tobytes()

    def test_penalty_increases_saturation(self):
        ds = synthetic(600, seed=4)
        base = dict(SMALL, epochs=3)
        _, vanilla = train(TrainingConfig(**base), ds, "sigmoid")
        _, sat = train(TrainingConfig(**base, penalty_weight=0.1, sharpen_gain=256.0), ds, "sigmoid")
        assert sat.final.saturation_fraction > vanilla.final.saturation_fraction

    def test_hardening_folded_after_last_update(self):
        ds = synthetic(200, seed=3)
        cfg = TrainingConfig(**SMALL, sharpen_gain=4.0, sharpen_epochs=2)
        plain, _ = train(cfg, ds, "sigmoid")
        hard, metrics = train(TrainingConfig(**{**cfg.to_dict(), "harden_gain": 64.0,
                                                "harden_logit_scale": 2.0}), ds, "sigmoid")
        assert model_to_bytes(hard) == model_to_bytes(fold_sharpening(plain, 64.0, 2.0))
        assert metrics.final.accuracy == evaluate_accuracy(hard, ds.images, ds.labels)

    def test_relu_rejects_gain_sharpening(self):
        with pytest.raises(ValueError):
            train(TrainingConfig(**SMALL, sharpen_gain=4.0), synthetic(50), "relu")
        with pytest.raises(ValueError):
            train(TrainingConfig(**SMALL, harden_gain=4.0), synthetic(50), "relu")

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reported(self):
        ds = synthetic(128, seed=5)
        cfg = TrainingConfig(**{**SMALL, "optimizer": "sgd", "learning_rate": 1e308})
        with pytest.raises(TrainingDivergedError) as err:
            train(cfg, ds, "relu")
        assert "epoch" in str(err.value) and "batch" in str(err.value)

    def test_progress_and_csv(self, tmp_path):
        seen = []
        _, metrics = train(TrainingConfig(**SMALL), synthetic(100), "sigmoid", progress=seen.append)
        assert seen == metrics.history
        metrics.write_csv(tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss,penalty,penalty_weight,accuracy,saturation_fraction"
        assert len(lines) == SMALL["epochs"] + 1
        for m in metrics.history:
            assert 0 <= m.accuracy <= 1 and 0 <= m.saturation_fraction <= 1


class TestEvaluate:
    def test_single_correct(self):
        m = init_model(seed=0)
        x = np.zeros((1, 784))
        label = int(np.argmax(forward(m, x).probs))
        assert evaluate_accuracy(m, x, [label]) == 1.0

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate_accuracy(init_model(), np.zeros((0, 784)), [])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            evaluate_accuracy(init_model(), np.zeros((2, 784)), [1])

    def test_saturation_fraction_bounds(self, rng):
        m = init_model(seed=0)
        assert hidden_saturation_fraction(m, digit_like(rng, 10)) == 0.0
        big = fold_sharpening(m, 2.0 ** 20, 1.0)
        assert hidden_saturation_fraction(big, digit_like(rng, 10)) > 0.5

    def test_parameter_count(self):
        assert parameter_count((784, 256, 128, 10)) == 235_146
