from __future__ import annotations

import numpy as np
import pytest

from mgrulab.cells import BNConfig, CellBNMode, GateBNMode
from mgrulab.network import ModelConfig, init_model, named_parameters
from mgrulab.training import (
    NonFiniteError,
    TaskSpec,
    TrainConfig,
    cross_entropy,
    cross_entropy_grad_logits,
    frame_accuracy,
    gen_task,
    grad_check,
    split_dataset,
    trace_gate,
    trace_to_csv,
    train,
)


def tiny_model(cell_kind="mgruip", n=8, p=4, d=6, c=4, bn=None, seed=0):
    config = ModelConfig(
        cell_kind=cell_kind,
        layer_count=2,
        cells_per_layer=n,
        input_dim=d,
        output_dim=c,
        projection_dim=None if cell_kind == "mgru" else p,
        bn=bn or BNConfig(),
    )
    return init_model(config, seed=seed)


LOOKAHEAD = TaskSpec(
    kind="lookahead-classify", frames=30, feature_dim=6, classes=4,
    sequences=24, lookahead=2, seed=5,
)
SLOW = TaskSpec(
    kind="slow-signal", frames=30, feature_dim=6, classes=4,
    sequences=24, window=6, seed=6,
)


class TestGenTask:
    def test_lookahead_requires_positive_lookahead(self):
        with pytest.raises(ValueError):
            TaskSpec(kind="lookahead-classify", frames=10, feature_dim=3, classes=2, lookahead=0)

    def test_slow_requires_window(self):
        with pytest.raises(ValueError):
            TaskSpec(kind="slow-signal", frames=10, feature_dim=3, classes=2, window=1)

    def test_same_seed_identical(self):
        a = gen_task(LOOKAHEAD)
        b = gen_task(LOOKAHEAD)
        assert np.array_equal(a.inputs, b.inputs)
        assert np.array_equal(a.labels, b.labels)

    def test_lookahead_labels_rederive_from_frames(self):
        # oracle: classify each frame by its nearest class mean, then check
        # that label[t] is the recovered class of frame t+d
        from mgrulab.training import _class_means

        ds = gen_task(LOOKAHEAD)
        rng = np.random.default_rng(LOOKAHEAD.seed)
        means = _class_means(LOOKAHEAD.classes, LOOKAHEAD.feature_dim, rng)
        dist = np.linalg.norm(ds.inputs[:, :, None, :] - means[None, None], axis=3)
        recovered = dist.argmin(axis=2)
        d = LOOKAHEAD.lookahead
        assert np.array_equal(ds.labels[:, : -d], recovered[:, d:])

    def test_lookahead_tail_labels_clamp_to_final_frame(self):
        ds = gen_task(LOOKAHEAD)
        d = LOOKAHEAD.lookahead
        for k in range(1, d + 1):
            assert np.array_equal(ds.labels[:, -k], ds.labels[:, -1])

    def test_slow_labels_rederive_from_trailing_mean(self):
        ds = gen_task(SLOW)
        w = SLOW.window
        ch0 = ds.inputs[:, :, 0]
        filtered = np.empty_like(ch0)
        for t in range(SLOW.frames):
            filtered[:, t] = ch0[:, max(0, t - w + 1) : t + 1].mean(axis=1)
        edges = np.quantile(filtered, [i / SLOW.classes for i in range(1, SLOW.classes)])
        assert np.array_equal(ds.labels, np.searchsorted(edges, filtered))

    def test_slow_labels_balanced(self):
        ds = gen_task(SLOW)
        counts = np.bincount(ds.labels.ravel(), minlength=SLOW.classes)
        assert counts.min() >= 0.8 * counts.mean()


class TestLossHelpers:
    def test_cross_entropy_of_perfect_prediction(self):
        probs = np.zeros((2, 2, 3))
        labels = np.array([[0, 1], [2, 0]])
        for t in range(2):
            for b in range(2):
                probs[t, b, labels[t, b]] = 1.0
        assert cross_entropy(probs, labels) == 0.0
        assert frame_accuracy(probs, labels) == 1.0

    def test_grad_logits_sums_to_zero_per_frame(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(3, 2, 4))
        from mgrulab.numerics import softmax

        probs = softmax(logits)
        labels = rng.integers(0, 4, size=(3, 2))
        grad = cross_entropy_grad_logits(probs, labels)
        assert np.allclose(grad.sum(axis=2), 0.0, atol=1e-12)


class TestTrain:
    def test_batch_size_must_allow_batch_norm(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.1, batch_size=1)

    def test_zero_learning_rate_keeps_parameters(self):
        model = tiny_model()
        ds = gen_task(LOOKAHEAD)
        before = {k: v.copy() for k, v in named_parameters(model).items()}
        cfg = TrainConfig(learning_rate=0.0, batch_size=4, epochs=1, seed=1)
        model, metrics = train(model, ds, cfg)
        after = named_parameters(model)
        for name, value in before.items():
            assert np.array_equal(value, after[name]), name
        assert len(metrics) == 2

    def test_deterministic_given_seeds(self):
        cfg = TrainConfig(learning_rate=0.05, batch_size=4, epochs=2, seed=2)
        runs = []
        for _ in range(2):
            model = tiny_model(seed=3)
            _, metrics = train(model, gen_task(LOOKAHEAD), cfg)
            runs.append(metrics)
        assert runs[0] == runs[1]

    def test_loss_decreases_on_slow_task(self):
        model = tiny_model()
        cfg = TrainConfig(learning_rate=0.1, batch_size=4, epochs=4, seed=3)
        _, metrics = train(model, gen_task(SLOW), cfg)
        losses = [m.loss for m in metrics if m.split == "train"]
        assert losses[-1] < losses[0]

    def test_mgru_kind_trains(self):
        model = tiny_model(cell_kind="mgru")
        cfg = TrainConfig(learning_rate=0.05, batch_size=4, epochs=1, seed=4)
        _, metrics = train(model, gen_task(SLOW), cfg)
        assert all(np.isfinite(m.loss) for m in metrics)

    def test_non_finite_loss_aborts_with_tensor_name(self):
        model = tiny_model()
        model.layers[0].W_v1[0, 0] = np.nan
        cfg = TrainConfig(learning_rate=0.05, batch_size=4, epochs=1, seed=5)
        with pytest.raises(NonFiniteError, match="layer1/W_v1"):
            train(model, gen_task(LOOKAHEAD), cfg)

    def test_split_is_deterministic_tail(self):
        ds = gen_task(LOOKAHEAD)
        train_set, eval_set = split_dataset(ds, 0.25)
        assert train_set.sequences == 18 and eval_set.sequences == 6
        assert np.array_equal(eval_set.inputs, ds.inputs[18:])


class TestTraceGate:
    def test_fresh_both_bn_traces_near_half(self):
        model = tiny_model(bn=BNConfig(gate=GateBNMode.BOTH, cell=CellBNMode.BOTH), seed=6)
        rng = np.random.default_rng(7)
        inputs = rng.normal(size=(20, 64, 6))
        records = trace_gate(model, inputs, layer=2)
        assert len(records) == 20
        assert all(0.4 <= r.mean_gate <= 0.6 for r in records)

    def test_zero_gate_weights_trace_exactly_half(self):
        model = tiny_model(bn=BNConfig(gate=GateBNMode.NONE, cell=CellBNMode.BOTH), seed=8)
        for layer in model.layers:
            layer.W_z[:] = 0.0
            layer.b_z[:] = 0.0
        rng = np.random.default_rng(8)
        inputs = rng.normal(size=(10, 4, 6))
        records = trace_gate(model, inputs, layer=1)
        assert all(r.mean_gate == 0.5 for r in records)

    def test_means_strictly_inside_unit_interval(self):
        model = tiny_model(seed=9)
        rng = np.random.default_rng(9)
        records = trace_gate(model, rng.normal(size=(5, 4, 6)), layer=1)
        assert all(0.0 < r.mean_gate < 1.0 for r in records)

    def test_layer_out_of_range(self):
        model = tiny_model(seed=10)
        rng = np.random.default_rng(10)
        inputs = rng.normal(size=(4, 4, 6))
        with pytest.raises(ValueError):
            trace_gate(model, inputs, layer=0)
        with pytest.raises(ValueError):
            trace_gate(model, inputs, layer=3)

    def test_tracing_is_pure(self):
        model = tiny_model(seed=11)
        model.set_mode("train")
        rng = np.random.default_rng(11)
        inputs = rng.normal(size=(4, 4, 6))
        stats_before = {
            name: value.copy()
            for name, value in _running_stats(model).items()
        }
        trace_gate(model, inputs, layer=1)
        assert model.bn_modes() == ["train"] * len(model.bn_modes())
        for name, value in _running_stats(model).items():
            assert np.array_equal(value, stats_before[name]), name

    def test_csv_format(self):
        model = tiny_model(seed=12)
        rng = np.random.default_rng(12)
        records = trace_gate(model, rng.normal(size=(3, 4, 6)), layer=2)
        lines = trace_to_csv(records).strip().split("\n")
        assert lines[0] == "t,layer,mean_gate"
        assert len(lines) == 4
        assert lines[1].startswith("0,2,")


def _running_stats(model):
    from mgrulab.network import named_running_stats

    return named_running_stats(model)


class TestGradCheckOracle:
    def test_quadratic_loss_is_exact(self):
        rng = np.random.default_rng(13)
        w = rng.normal(size=(4,))
        a = rng.normal(size=(10, 4))
        b = rng.normal(size=(10,))

        def loss_fn():
            resid = a @ w - b
            return float(0.5 * (resid**2).sum()), {"w": a.T @ resid}

        report = grad_check(loss_fn, {"w": w}, tolerance=1e-9)
        assert report.passed, str(report)

    def test_detector_catches_corrupted_gradient(self):
        rng = np.random.default_rng(14)
        w = rng.normal(size=(4,))
        a = rng.normal(size=(10, 4))
        b = rng.normal(size=(10,))

        def loss_fn():
            resid = a @ w - b
            grad = a.T @ resid
            grad = grad.copy()
            grad[0] += 0.5  # deliberate corruption
            return float(0.5 * (resid**2).sum()), {"w": grad}

        report = grad_check(loss_fn, {"w": w}, tolerance=1e-4)
        assert not report.passed
        assert report.worst_name == "w"
