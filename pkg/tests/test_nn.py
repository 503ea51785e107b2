"""Tests for the numpy CNN engine: shapes, gradients, optimizer, training."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multibackdoor import nn
from multibackdoor.data import LabeledDataset
from multibackdoor.errors import ConfigurationError, InputError, ShapeError, TrainingError


def numeric_grad(params, x, y, key, h=1e-4):
    t = params.tensors[key]
    out = np.zeros_like(t)
    it = np.nditer(t, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = t[i]
        t[i] = old + h
        lp, _ = nn.loss_and_grads(params, x, y)
        t[i] = old - h
        lm, _ = nn.loss_and_grads(params, x, y)
        t[i] = old
        out[i] = (lp - lm) / (2 * h)
    return out


def max_rel_error(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-6)))


def tiny_cnn(head="gap", dims=(6, 6, 2)):
    return nn.small_cnn(dims, 3, channels=(3, 4), head=head)


class TestModelSpec:
    def test_dense_only_param_count(self):
        spec = nn.ModelSpec([nn.Flatten(), nn.Dense(3)], (4, 1, 1), 3)
        params = nn.build_model(spec, seed=0)
        assert params.n_params == 4 * 3 + 3

    def test_small_cnn_closed_form_count(self):
        spec = nn.small_cnn((16, 16, 3), 10, (16, 32, 32))
        expected = (3 * 3 * 3 * 16 + 16) + (3 * 3 * 16 * 32 + 32) + (3 * 3 * 32 * 32 + 32) + (32 * 10 + 10)
        assert nn.build_model(spec, 0).n_params == expected

    def test_flatten_head_closed_form_count(self):
        spec = nn.small_cnn((16, 16, 3), 10, (16, 32, 32), head="flatten")
        expected = (27 * 16 + 16) + (144 * 32 + 32) + (288 * 32 + 32) + (2 * 2 * 32 * 10 + 10)
        assert nn.build_model(spec, 0).n_params == expected

    def test_same_seed_bit_identical(self):
        spec = nn.small_cnn()
        a, b = nn.build_model(spec, 7), nn.build_model(spec, 7)
        for k in a.tensors:
            assert np.array_equal(a.tensors[k], b.tensors[k])

    def test_biases_start_at_zero(self):
        params = nn.build_model(nn.small_cnn(), 1)
        for k, v in params.tensors.items():
            if k.endswith(".bias"):
                assert not v.any()

    def test_incompatible_spec_rejected(self):
        with pytest.raises(ConfigurationError):
            nn.ModelSpec([nn.MaxPool(4), nn.MaxPool(4), nn.Dense(2)], (4, 4, 1), 2).shapes()

    def test_last_layer_must_emit_k_logits(self):
        with pytest.raises(ConfigurationError):
            nn.ModelSpec([nn.Flatten(), nn.Dense(3)], (2, 2, 1), 4).shapes()


class TestForward:
    def test_zero_weights_give_uniform_softmax(self):
        spec = nn.mlp(5, [4], 10)
        params = nn.build_model(spec, 0)
        for k in params.tensors:
            params.tensors[k][:] = 0
        probs = nn.softmax(nn.forward(params, np.random.default_rng(0).uniform(0, 255, (3, 5, 1, 1))))
        np.testing.assert_allclose(probs, 0.1, atol=1e-12)

    def test_one_by_one_conv_hand_computed(self):
        spec = nn.ModelSpec([nn.Conv2D(1, kernel=1), nn.Flatten(), nn.Dense(2)], (2, 2, 1), 2)
        params = nn.build_model(spec, 0)
        params.tensors["0.weight"][:] = 2.0
        params.tensors["0.bias"][:] = 0.5
        params.tensors["2.weight"][:] = np.array([[1, 0], [0, 1], [1, 1], [0, 0]], dtype=float)
        params.tensors["2.bias"][:] = 0
        x = np.array([[10.0, 20.0], [30.0, 40.0]])[None, :, :, None]
        acts = 2.0 * np.array([10, 20, 30, 40]) / 255 + 0.5
        expected = np.array([acts[0] + acts[2], acts[1] + acts[2]])
        np.testing.assert_allclose(nn.forward(params, x)[0], expected, rtol=1e-12)

    def test_softmax_rows_sum_to_one(self):
        params = nn.build_model(nn.small_cnn(), 3)
        x = np.random.default_rng(1).uniform(0, 255, (7, 16, 16, 3))
        probs = nn.softmax(nn.forward(params, x))
        assert probs.shape == (7, 10)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_dim_mismatch(self):
        params = nn.build_model(nn.small_cnn(), 0)
        with pytest.raises(ShapeError):
            nn.forward(params, np.zeros((2, 8, 8, 3)))

    def test_predict_ties_go_to_lowest_index(self):
        params = nn.build_model(nn.mlp(3, [2], 4), 0)
        for k in params.tensors:
            params.tensors[k][:] = 0
        assert (nn.predict(params, np.ones((5, 3, 1, 1))) == 0).all()


class TestLossAndGradients:
    def test_uniform_logits_loss_is_log_k(self):
        params = nn.build_model(nn.mlp(3, [2], 7), 0)
        for k in params.tensors:
            params.tensors[k][:] = 0
        loss, _ = nn.loss_and_grads(params, np.ones((4, 3, 1, 1)), np.array([0, 3, 6, 1]))
        assert loss == pytest.approx(np.log(7))

    def test_duplicated_batch_mean_reduction(self):
        params = nn.build_model(tiny_cnn(), 2)
        x = np.random.default_rng(0).uniform(0, 255, (1, 6, 6, 2))
        single, _ = nn.loss_and_grads(params, x, [1])
        double, _ = nn.loss_and_grads(params, np.concatenate([x, x]), [1, 1])
        assert double == pytest.approx(single, rel=1e-12)

    def test_out_of_range_label(self):
        params = nn.build_model(tiny_cnn(), 0)
        with pytest.raises(InputError):
            nn.loss_and_grads(params, np.zeros((1, 6, 6, 2)), [3])

    @pytest.mark.parametrize("head", ["gap", "flatten"])
    def test_finite_differences_cnn(self, head):
        params = nn.build_model(tiny_cnn(head), 11, np.float64)
        rng = np.random.default_rng(5)
        x = rng.uniform(0, 255, (4, 6, 6, 2))
        y = rng.integers(0, 3, 4)
        _, grads = nn.loss_and_grads(params, x, y)
        for key in params.tensors:
            assert max_rel_error(grads[key], numeric_grad(params, x, y, key)) < 1e-4, key

    def test_finite_differences_mlp(self):
        params = nn.build_model(nn.mlp(5, [6, 4], 3), 2, np.float64)
        rng = np.random.default_rng(1)
        x = rng.uniform(0, 255, (5, 5, 1, 1))
        y = rng.integers(0, 3, 5)
        _, grads = nn.loss_and_grads(params, x, y)
        for key in params.tensors:
            assert max_rel_error(grads[key], numeric_grad(params, x, y, key)) < 1e-4

    def test_input_gradient_matches_finite_differences(self):
        params = nn.build_model(tiny_cnn(), 4, np.float64)
        rng = np.random.default_rng(2)
        x = rng.uniform(0, 255, (2, 6, 6, 2))
        y = np.array([0, 2])
        g = nn.input_gradient(params, x, y)
        h = 1e-3
        for n in range(2):
            for idx in [(0, 0, 0), (3, 2, 1), (5, 5, 0)]:
                xp, xm = x.copy(), x.copy()
                xp[(n, *idx)] += h
                xm[(n, *idx)] -= h
                num = (nn.example_losses(params, xp, y)[n] - nn.example_losses(params, xm, y)[n]) / (2 * h)
                assert g[(n, *idx)] == pytest.approx(num, rel=1e-4, abs=1e-9)


class TestSGD:
    def _single(self, theta, g, lr, momentum, steps):
        params = {"w": np.array([theta], dtype=float)}
        velocity = {"w": np.zeros(1)}
        sched = nn.TrainSchedule(lr=lr, momentum=momentum)
        for _ in range(steps):
            nn.sgd_step(params, {"w": np.array([g], dtype=float)}, velocity, sched)
        return params["w"][0], velocity["w"][0]

    def test_plain_sgd(self):
        theta, _ = self._single(1.0, 2.0, 0.1, 0.0, 1)
        assert theta == pytest.approx(0.8)

    def test_two_step_momentum_recursion(self):
        theta, _ = self._single(0.0, 1.0, 1.0, 0.9, 2)
        assert theta == pytest.approx(-2.9)

    def test_zero_gradient_coasts_on_velocity(self):
        params = {"w": np.array([1.0])}
        velocity = {"w": np.array([0.5])}
        nn.sgd_step(params, {"w": np.zeros(1)}, velocity, nn.TrainSchedule(lr=0.1, momentum=0.9))
        assert velocity["w"][0] == pytest.approx(0.45)
        assert params["w"][0] == pytest.approx(1 - 0.045)

    def test_masked_entries_stay_zero(self):
        params = {"w": np.array([1.0, 0.0])}
        velocity = {"w": np.zeros(2)}
        nn.sgd_step(params, {"w": np.ones(2)}, velocity, nn.TrainSchedule(lr=0.1, momentum=0.9),
                    masks={"w": np.array([1.0, 0.0])})
        assert params["w"][1] == 0

    def test_invalid_schedule(self):
        with pytest.raises(ConfigurationError):
            nn.TrainSchedule(lr=0)
        with pytest.raises(ConfigurationError):
            nn.TrainSchedule(patience=0)


def blobs(n=200, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    centres = np.array([[60.0] * 4, [190.0] * 4])
    x = centres[y] + rng.normal(0, 15, (n, 4))
    return LabeledDataset(np.clip(x, 0, 255).reshape(n, 4, 1, 1), y)


class TestTraining:
    def test_separable_blobs_fit(self):
        train, val = blobs(200, 0), blobs(60, 1)
        params = nn.build_model(nn.mlp(4, [8], 2), 0)
        sched = nn.TrainSchedule(lr=0.05, batch_size=16, max_epochs=30, patience=5)
        best, hist = nn.train_with_early_stopping(params, train, val, sched)
        assert nn.accuracy(best, train) >= 0.95
        assert {"epoch", "train_loss", "train_acc", "val_loss", "val_acc"} <= set(hist[0])

    def test_identical_runs_identical_history(self):
        train, val = blobs(100, 0), blobs(40, 1)
        sched = nn.TrainSchedule(lr=0.05, batch_size=16, max_epochs=5, patience=5)
        runs = [nn.train_with_early_stopping(nn.build_model(nn.mlp(4, [8], 2), 0), train, val, sched) for _ in range(2)]
        assert runs[0][1] == runs[1][1]
        for k in runs[0][0].tensors:
            assert np.array_equal(runs[0][0].tensors[k], runs[1][0].tensors[k])

    def test_returns_best_validation_epoch(self):
        # validation labels are the inverse of training labels, so val loss rises once learning starts
        train = blobs(200, 0)
        val = blobs(60, 1)
        val.clean_labels = 1 - val.clean_labels
        snapshots = []
        sched = nn.TrainSchedule(lr=0.05, batch_size=16, max_epochs=20, patience=1)
        best, hist = nn.train_with_early_stopping(nn.build_model(nn.mlp(4, [8], 2), 0), train, val, sched,
                                                  on_epoch=lambda e, p: snapshots.append(p.copy()))
        e = int(np.argmin([h["val_loss"] for h in hist]))
        assert len(hist) == e + 2
        for k in best.tensors:
            assert np.array_equal(best.tensors[k], snapshots[e].tensors[k])

    def test_single_example_loss_driven_down(self):
        params = nn.build_model(tiny_cnn(), 0)
        x = np.random.default_rng(0).uniform(0, 255, (1, 6, 6, 2))
        y = np.array([2])
        velocity = params.zeros_like()
        sched = nn.TrainSchedule(lr=0.05, momentum=0.9)
        for _ in range(200):
            loss, grads = nn.loss_and_grads(params, x, y)
            nn.sgd_step(params.tensors, grads, velocity, sched)
        assert nn.loss_and_grads(params, x, y)[0] < 1e-2

    def test_divergence_names_epoch(self):
        train, val = blobs(50, 0), blobs(20, 1)
        train.images[3] = np.nan
        sched = nn.TrainSchedule(lr=0.01, batch_size=8, max_epochs=5, patience=5)
        with pytest.raises(TrainingError, match="epoch"):
            with np.errstate(all="ignore"):
                nn.train_with_early_stopping(nn.build_model(nn.mlp(4, [8], 2), 0), train, val, sched)

    def test_empty_sets_rejected(self):
        empty = blobs(10).subset(np.zeros(0, dtype=int))
        with pytest.raises(InputError):
            nn.train_with_early_stopping(nn.build_model(nn.mlp(4, [8], 2), 0), empty, blobs(10), nn.TrainSchedule())


class TestAccuracy:
    def test_random_predictor_monte_carlo(self):
        rng = np.random.default_rng(0)
        # identity dense layer: the prediction is the argmax of a random input
        direct = nn.build_model(nn.mlp(10, [], 10), 0)
        direct.tensors["1.weight"][:] = np.eye(10)
        direct.tensors["1.bias"][:] = 0
        x = rng.uniform(0, 255, (10_000, 10, 1, 1))
        data = LabeledDataset(x, rng.integers(0, 10, 10_000))
        assert abs(nn.accuracy(direct, data) - 0.1) <= 0.02

    def test_all_correct(self):
        params = nn.build_model(nn.mlp(3, [], 3), 0)
        params.tensors["1.weight"][:] = np.eye(3)
        params.tensors["1.bias"][:] = 0
        data = LabeledDataset(np.eye(3).reshape(3, 3, 1, 1) * 255, np.arange(3))
        assert nn.accuracy(params, data) == 1.0

    def test_empty_is_error(self):
        params = nn.build_model(nn.mlp(3, [2], 2), 0)
        with pytest.raises(InputError):
            nn.accuracy(params, LabeledDataset(np.zeros((0, 3, 1, 1)), np.zeros(0)))

    def test_missing_poison_labels(self):
        params = nn.build_model(nn.mlp(3, [2], 2), 0)
        with pytest.raises(InputError):
            nn.accuracy(params, LabeledDataset(np.zeros((2, 3, 1, 1)), [0, 1]), label_field="poison")


class TestPenultimate:
    def test_two_layer_dense_rows(self):
        params = nn.build_model(nn.mlp(3, [5], 2), 0)
        x = np.random.default_rng(0).uniform(0, 255, (4, 3, 1, 1))
        reps = nn.penultimate_activations(params, LabeledDataset(x, np.zeros(4)))
        w, b = params.tensors["1.weight"], params.tensors["1.bias"]
        np.testing.assert_allclose(reps, np.maximum(x.reshape(4, 3) / 255 @ w + b, 0), rtol=1e-10)

    def test_zero_weights_zero_rows(self):
        params = nn.build_model(nn.small_cnn(), 0)
        for k in params.tensors:
            params.tensors[k][:] = 0
        x = np.random.default_rng(0).uniform(0, 255, (3, 16, 16, 3))
        reps = nn.penultimate_activations(params, LabeledDataset(x, np.zeros(3)))
        assert reps.shape == (3, 32) and not reps.any()

    def test_single_layer_rejected(self):
        params = nn.build_model(nn.mlp(3, [], 2), 0)
        with pytest.raises(ConfigurationError):
            nn.penultimate_activations(params, LabeledDataset(np.zeros((1, 3, 1, 1)), [0]))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), b=st.integers(1, 6))
def test_softmax_normalised_property(seed, b):
    params = nn.build_model(tiny_cnn(), seed)
    x = np.random.default_rng(seed).uniform(0, 255, (b, 6, 6, 2))
    probs = nn.softmax(nn.forward(params, x))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    assert np.isfinite(probs).all()
