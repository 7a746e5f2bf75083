"""Architecture, optimizer, training, and checkpoint tests.

Expected layer shapes and the parameter counts are frozen from independent
hand arithmetic over the layer hyperparameters.
"""

import math

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from conftest import sampled_network_fd_error, separable_trials
from eegmotion.binio import ChecksumError, FormatError
from eegmotion.network import (
    AdamState,
    ArchitectureMismatchError,
    TrainConfig,
    adam_step,
    architecture_rows,
    build_network,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)

INTENT_SHAPES = [
    ("conv1", (32, 124, 121)),
    ("relu1", (32, 124, 121)),
    ("bn1", (32, 124, 121)),
    ("pool1", (32, 41, 40)),
    ("conv2", (64, 37, 36)),
    ("relu2", (64, 37, 36)),
    ("bn2", (64, 37, 36)),
    ("pool2", (64, 12, 12)),
    ("conv3", (128, 8, 8)),
    ("relu3", (128, 8, 8)),
    ("bn3", (128, 8, 8)),
    ("pool3", (128, 2, 2)),
    ("fc", (1, 2)),
    ("softmax", (1, 2)),
]

RT_SHAPES = [
    ("conv1", (32, 126, 121)),
    ("relu1", (32, 126, 121)),
    ("bn1", (32, 126, 121)),
    ("pool1", (32, 63, 60)),
    ("conv2", (64, 61, 56)),
    ("relu2", (64, 61, 56)),
    ("bn2", (64, 61, 56)),
    ("pool2", (64, 30, 28)),
    ("conv3", (128, 28, 24)),
    ("relu3", (128, 28, 24)),
    ("bn3", (128, 28, 24)),
    ("pool3", (128, 14, 12)),
    ("conv4", (256, 12, 8)),
    ("relu4", (256, 12, 8)),
    ("bn4", (256, 12, 8)),
    ("pool4", (256, 6, 4)),
    ("fc", (1, 2)),
    ("softmax", (1, 2)),
]

# hand counts: conv = Cout*Cin*kh*kw + Cout, bn = 2*C, fc = out*in + out
INTENT_PARAM_COUNT = (
    (32 * 1 * 5 * 5 + 32)        # 832
    + (64 * 32 * 5 * 5 + 64)     # 51,264
    + (128 * 64 * 5 * 5 + 128)   # 204,928
    + 2 * (32 + 64 + 128)        # 448
    + (2 * 512 + 2)              # 1,026
)
RT_PARAM_COUNT = (
    (32 * 1 * 3 * 5 + 32)
    + (64 * 32 * 3 * 5 + 64)
    + (128 * 64 * 3 * 5 + 128)
    + (256 * 128 * 3 * 5 + 256)
    + 2 * (32 + 64 + 128 + 256)
    + (2 * 6144 + 2)
)


class TestArchitecture:
    def test_intent_layer_shapes(self):
        assert architecture_rows(build_network("intent")) == INTENT_SHAPES

    def test_rt_layer_shapes(self):
        assert architecture_rows(build_network("rt")) == RT_SHAPES

    def test_intent_parameter_count(self):
        assert INTENT_PARAM_COUNT == 258_498
        assert build_network("intent").parameter_count() == 258_498

    def test_rt_parameter_count(self):
        assert build_network("rt").parameter_count() == RT_PARAM_COUNT

    def test_forward_logits_shape(self):
        net = build_network("intent", seed=1)
        x = np.random.default_rng(0).standard_normal((1, 1, 128, 125)).astype(np.float32)
        assert net.forward(x, "eval").shape == (1, 2)

    def test_unknown_architecture_rejected(self):
        with pytest.raises(ValueError, match="arch"):
            build_network("lstm")

    def test_forward_rejects_wrong_trial_shape(self):
        net = build_network("intent")
        with pytest.raises(ValueError, match="shape"):
            net.forward(np.zeros((1, 1, 64, 125), dtype=np.float32), "eval")

    def test_build_is_seed_deterministic(self):
        a = build_network("intent", seed=7).parameters()
        b = build_network("intent", seed=7).parameters()
        for k in a:
            assert np.array_equal(a[k], b[k])
        c = build_network("intent", seed=8).parameters()
        assert not np.array_equal(a["conv1.w"], c["conv1.w"])


class TestAdam:
    def cfg(self, **kw):
        return TrainConfig(**kw)

    def test_first_step_on_unit_gradient(self):
        # m̂ = v̂ = 1 after one step, so the update is -lr/(1+eps)
        p = {"w": np.array([0.0])}
        adam_step(p, {"w": np.array([1.0])}, AdamState.for_params(p), self.cfg())
        assert p["w"][0] == pytest.approx(-1e-3, rel=1e-6)

    def test_zero_gradient_leaves_parameters_unchanged(self):
        p = {"w": np.array([0.25, -0.5])}
        st = AdamState.for_params(p)
        adam_step(p, {"w": np.zeros(2)}, st, self.cfg())
        assert np.array_equal(p["w"], [0.25, -0.5])
        assert st.step == 1

    def test_two_steps_match_scalar_recursion(self):
        lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
        g_seq = [0.2, -0.7]
        # independent scalar recursion
        p_ref, m, v = 0.5, 0.0, 0.0
        for t, g in enumerate(g_seq, 1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mh = m / (1 - b1 ** t)
            vh = v / (1 - b2 ** t)
            p_ref -= lr * mh / (math.sqrt(vh) + eps)
        p = {"w": np.array([0.5])}
        st = AdamState.for_params(p)
        for g in g_seq:
            adam_step(p, {"w": np.array([g])}, st, self.cfg())
        assert abs(p["w"][0] - p_ref) <= 1e-12

    def test_non_finite_gradient_aborts_with_parameter_name(self):
        p = {"conv1.w": np.zeros(2)}
        with pytest.raises(FloatingPointError, match="conv1.w"):
            adam_step(p, {"conv1.w": np.array([1.0, np.inf])},
                      AdamState.for_params(p), self.cfg())

    def test_gradient_shape_mismatch_rejected(self):
        p = {"w": np.zeros(2)}
        with pytest.raises(ValueError, match="shape"):
            adam_step(p, {"w": np.zeros(3)}, AdamState.for_params(p), self.cfg())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=-1e-3)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(holdout_fraction=1.0)


class TestGradientFidelity:
    def test_intent_loss_gradient_matches_finite_differences(self):
        assert sampled_network_fd_error("intent", n_coords=2, seed=0) < 1e-3

    def test_rt_loss_gradient_matches_finite_differences(self):
        assert sampled_network_fd_error("rt", n_coords=2, seed=1) < 1e-3


class TestTraining:
    def test_learns_separable_classes(self):
        x, y = separable_trials(64, seed=3)
        net = build_network("intent", seed=3)
        cfg = TrainConfig(epochs=10, seed=3, holdout_fraction=0.0)
        hist = train(net, (x, y), cfg)
        assert hist.train_accuracy[-1] >= 0.95
        # loss is non-increasing up to small transient upticks; once the
        # loss is essentially zero, noise-level wiggles do not count
        best = hist.train_loss[0]
        for loss in hist.train_loss[1:]:
            assert loss <= best * 1.05 + 1e-3
            best = min(best, loss)
        labels, _ = predict(net, x)
        assert (labels == y).mean() >= 0.95

    def test_zero_learning_rate_freezes_parameters(self):
        x, y = separable_trials(8, seed=4)
        net = build_network("intent", seed=4)
        before = {k: v.copy() for k, v in net.parameters().items()}
        hist = train(net, (x, y), TrainConfig(
            learning_rate=0.0, epochs=2, seed=4, holdout_fraction=0.0))
        for k, v in net.parameters().items():
            assert np.array_equal(before[k], v)
        assert hist.epochs_run == 2
        # batchnorm running stats still move
        assert any(s.any() for n, s in net.running_stats().items() if "mean" in n)

    def test_same_seed_reproduces_loss_history_bitwise(self):
        x, y = separable_trials(8, seed=5)
        with threadpool_limits(limits=1):
            h1 = train(build_network("intent", seed=5), (x, y),
                       TrainConfig(epochs=2, seed=5, holdout_fraction=0.0))
            h2 = train(build_network("intent", seed=5), (x, y),
                       TrainConfig(epochs=2, seed=5, holdout_fraction=0.0))
        assert h1.train_loss == h2.train_loss
        assert h1.train_accuracy == h2.train_accuracy

    def test_empty_dataset_rejected(self):
        net = build_network("intent")
        with pytest.raises(ValueError, match="empty"):
            train(net, (np.zeros((0, 128, 125)), np.zeros(0, dtype=int)), TrainConfig())

    def test_single_class_dataset_warns(self):
        x, _ = separable_trials(4, seed=6)
        y = np.zeros(4, dtype=np.int64)
        with pytest.warns(UserWarning, match="single class"):
            train(build_network("intent", seed=6), (x, y),
                  TrainConfig(epochs=1, seed=6, holdout_fraction=0.0))

    def test_bad_labels_rejected(self):
        x, _ = separable_trials(4, seed=6)
        with pytest.raises(ValueError, match="labels"):
            train(build_network("intent"), (x, np.array([0, 1, 2, 1])), TrainConfig())

    def test_early_stopping_restores_best_epoch(self):
        x, y = separable_trials(24, seed=7)
        cfg = TrainConfig(epochs=6, seed=7, holdout_fraction=0.25, patience=2)
        hist = train(build_network("intent", seed=7), (x, y), cfg)
        assert len(hist.val_loss) == hist.epochs_run
        assert hist.best_epoch <= hist.epochs_run - 1


class TestPredict:
    def test_probabilities_sum_to_one_and_match_argmax(self):
        net = build_network("intent", seed=9)
        x = np.random.default_rng(9).standard_normal((5, 128, 125)).astype(np.float32)
        labels, probs = predict(net, x)
        assert probs.shape == (5, 2)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)
        assert np.array_equal(labels, probs.argmax(axis=1))

    def test_single_trial_form(self):
        net = build_network("intent", seed=9)
        x = np.random.default_rng(2).standard_normal((128, 125)).astype(np.float32)
        label, prob = predict(net, x)
        assert label in (0, 1)
        assert prob.shape == (2,)

    def test_untrained_network_predicts_near_chance(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((64, 128, 125)).astype(np.float32)
        y = np.arange(64) % 2
        labels, _ = predict(build_network("intent", seed=10), x)
        assert 0.3 <= (labels == y).mean() <= 0.7

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            predict(build_network("intent"), np.zeros((3, 128, 100)))


class TestCheckpoints:
    def test_round_trip_is_bitwise(self, tmp_path):
        x, y = separable_trials(8, seed=11)
        net = build_network("intent", seed=11)
        train(net, (x, y), TrainConfig(epochs=1, seed=11, holdout_fraction=0.0))
        path = tmp_path / "net.ckpt"
        save_checkpoint(net, path)
        other = load_checkpoint(path)
        for k, v in net.parameters().items():
            assert np.array_equal(v, other.parameters()[k])
        for k, v in net.running_stats().items():
            assert np.array_equal(v, other.running_stats()[k])
        probe = x[:3]
        assert np.array_equal(predict(net, probe)[1], predict(other, probe)[1])

    def test_truncated_file_fails_checksum(self, tmp_path):
        net = build_network("intent", seed=12)
        path = tmp_path / "net.ckpt"
        save_checkpoint(net, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 9])
        with pytest.raises(ChecksumError):
            load_checkpoint(path)

    def test_architecture_mismatch_is_explicit(self, tmp_path):
        path = tmp_path / "net.ckpt"
        save_checkpoint(build_network("intent", seed=1), path)
        with pytest.raises(ArchitectureMismatchError, match="intent"):
            load_checkpoint(path, expect_arch="rt")

    def test_foreign_file_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"PK\x03\x04 definitely not a checkpoint")
        with pytest.raises(FormatError):
            load_checkpoint(path)
