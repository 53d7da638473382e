from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fleetlab import coreml
from fleetlab.coreml import Batch, ModelParams, ModelSpec


def _batch(spec, n, seed):
    rng = np.random.default_rng(seed)
    return Batch(rng.normal(size=(n, spec.input_dim)), rng.integers(0, spec.num_classes, size=n))


def _hand_forward_loss(params, batch):
    # independent per-sample loop, no vectorization
    spec = params.spec
    mats = coreml.unpack(params.values, spec)
    total = 0.0
    for x, y in zip(batch.features, batch.labels):
        if spec.hidden_dim == 0:
            W, b = mats
            z = [sum(x[i] * W[i, k] for i in range(spec.input_dim)) + b[k] for k in range(spec.num_classes)]
        else:
            W1, b1, W2, b2 = mats
            h = []
            for j in range(spec.hidden_dim):
                a = sum(x[i] * W1[i, j] for i in range(spec.input_dim)) + b1[j]
                h.append(max(a, 0.0) if spec.activation == "relu" else math.tanh(a))
            z = [sum(h[j] * W2[j, k] for j in range(spec.hidden_dim)) + b2[k] for k in range(spec.num_classes)]
        m = max(z)
        lse = m + math.log(sum(math.exp(v - m) for v in z))
        total += lse - z[y]
    return total / len(batch)


def test_param_count_softmax():
    p = coreml.init_params(ModelSpec(4, 0, 3), seed=7)
    assert p.values.size == 15
    assert p.clock == 0


def test_param_count_mnist_mlp():
    assert ModelSpec(784, 64, 10).num_params == 50_890


def test_init_deterministic_and_scaled():
    spec = ModelSpec(16, 8, 4)
    a = coreml.init_params(spec, 3)
    b = coreml.init_params(spec, 3)
    assert a.values.tobytes() == b.values.tobytes()
    W1, b1, W2, b2 = coreml.unpack(a.values, spec)
    assert np.all(np.abs(W1) <= 1 / math.sqrt(16)) and np.all(np.abs(W2) <= 1 / math.sqrt(8))
    assert not b1.any() and not b2.any()
    assert coreml.init_params(spec, 4).values.tobytes() != a.values.tobytes()


def test_invalid_spec_and_params():
    with pytest.raises(ValueError):
        ModelSpec(0, 1, 2)
    with pytest.raises(ValueError):
        ModelSpec(3, 0, 1)
    with pytest.raises(ValueError):
        ModelSpec(3, 2, 2, activation="gelu")
    spec = ModelSpec(2, 0, 2)
    with pytest.raises(ValueError):
        ModelParams(np.zeros(5), spec)
    with pytest.raises(ValueError):
        ModelParams(np.array([0, 0, 0, 0, np.nan, 0.0]), spec)


def test_batch_validation():
    with pytest.raises(ValueError):
        Batch(np.zeros((0, 2)), np.zeros(0, dtype=int))
    with pytest.raises(ValueError):
        Batch(np.array([[np.inf, 0.0]]), np.array([0]))
    spec = ModelSpec(3, 0, 2)
    p = coreml.init_params(spec, 0)
    with pytest.raises(ValueError):
        coreml.loss(p, Batch(np.zeros((2, 4)), np.array([0, 1])))
    with pytest.raises(ValueError):
        coreml.loss(p, Batch(np.zeros((2, 3)), np.array([0, 2])))


def test_zero_softmax_loss_is_log_classes():
    spec = ModelSpec(5, 0, 10)
    p = ModelParams(np.zeros(spec.num_params), spec)
    assert coreml.loss(p, _batch(spec, 7, 1)) == pytest.approx(math.log(10), abs=1e-12)


def test_confident_logits_drive_loss_to_zero():
    spec = ModelSpec(2, 0, 2)
    batch = Batch(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1]))
    losses = []
    for scale in (1.0, 10.0, 100.0):
        W = scale * np.eye(2)
        p = ModelParams(np.concatenate([W.ravel(), np.zeros(2)]), spec)
        losses.append(coreml.loss(p, batch))
    assert losses[0] > losses[1] > losses[2] >= 0
    assert losses[2] < 1e-40


@pytest.mark.parametrize("spec", [ModelSpec(3, 0, 4), ModelSpec(3, 4, 3, "relu"), ModelSpec(3, 4, 3, "tanh")])
def test_loss_matches_hand_forward(spec):
    p = coreml.init_params(spec, 11)
    batch = _batch(spec, 3, 5)
    assert coreml.loss(p, batch) == pytest.approx(_hand_forward_loss(p, batch), abs=1e-12)


def test_frozen_loss_and_gradient_values():
    # values produced by the hand-forward oracle above, frozen
    spec = ModelSpec(4, 3, 3, "tanh")
    p = coreml.init_params(spec, 7)
    batch = _batch(spec, 5, 2)
    assert coreml.loss(p, batch) == pytest.approx(_hand_forward_loss(p, batch), abs=1e-12)
    assert coreml.loss(p, batch) == pytest.approx(1.0652829121707548, abs=1e-12)
    g = coreml.gradient(p, batch)
    assert float(np.linalg.norm(g)) == pytest.approx(0.37495484251512357, abs=1e-12)


def test_symmetric_bias_gradients():
    spec = ModelSpec(2, 0, 2)
    p = ModelParams(np.zeros(spec.num_params), spec)
    batch = Batch(np.array([[1.0, -1.0], [1.0, -1.0]]), np.array([0, 1]))
    g = coreml.gradient(p, batch)
    b = g[-2:]
    assert b[0] == pytest.approx(-b[1], abs=1e-15)
    assert np.allclose(g, 0.0)


def test_duplicate_batch_same_gradient():
    spec = ModelSpec(3, 5, 3)
    p = coreml.init_params(spec, 1)
    batch = _batch(spec, 4, 9)
    doubled = Batch(np.repeat(batch.features, 2, axis=0), np.repeat(batch.labels, 2))
    assert np.allclose(coreml.gradient(p, batch), coreml.gradient(p, doubled), atol=1e-15)


def test_finite_difference_mlp_batch5():
    spec = ModelSpec(6, 5, 4, "tanh")
    p = coreml.init_params(spec, 2)
    assert coreml.finite_diff_check(p, _batch(spec, 5, 3), 1e-5) < 1e-5


def test_injected_fault_detected():
    spec = ModelSpec(4, 3, 3, "tanh")
    p = coreml.init_params(spec, 5)
    batch = _batch(spec, 5, 6)
    numeric = coreml.numeric_gradient(p, batch, 1e-5)
    assert coreml.relative_error(2 * coreml.gradient(p, batch), numeric) == pytest.approx(1.0, abs=1e-3)


def test_large_step_has_larger_error():
    spec = ModelSpec(4, 3, 3, "tanh")
    p = coreml.init_params(spec, 5)
    batch = _batch(spec, 5, 6)
    assert coreml.finite_diff_check(p, batch, 1e-1) > coreml.finite_diff_check(p, batch, 1e-5)


def test_apply_step_examples():
    spec = ModelSpec(1, 0, 2)
    p = ModelParams(np.array([1.0, 1.0, 0.0, 0.0]), spec, clock=41)
    q = coreml.apply_step(p, np.array([1.0, 2.0, 0.0, 0.0]), 0.5)
    assert q.values[:2].tolist() == [0.5, 0.0]
    assert q.clock == 42
    z = coreml.apply_step(p, np.ones(4), 0.0)
    assert z.values.tobytes() == p.values.tobytes() and z.clock == 42
    with pytest.raises(ValueError):
        coreml.apply_step(p, np.ones(3), 0.1)
    with pytest.raises(ValueError):
        coreml.apply_step(p, np.ones(4), math.nan)


def test_params_are_read_only():
    p = coreml.init_params(ModelSpec(2, 0, 2), 0)
    with pytest.raises(ValueError):
        p.values[0] = 1.0


def test_accuracy_and_recall():
    spec = ModelSpec(2, 0, 3)
    W = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    p = ModelParams(np.concatenate([W.ravel(), np.zeros(3)]), spec)
    x = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    y = np.array([0, 1, 0])
    assert coreml.accuracy(p, x, y) == pytest.approx(2 / 3)
    recall = coreml.per_class_recall(p, x, y)
    assert recall[0] == 0.5 and recall[1] == 1.0 and math.isnan(recall[2])


specs = st.builds(
    ModelSpec,
    input_dim=st.integers(1, 6),
    hidden_dim=st.integers(0, 5),
    num_classes=st.integers(2, 5),
    activation=st.sampled_from(["tanh", "relu"]),
)


@given(specs, st.integers(1, 6), st.integers(0, 10_000))
def test_loss_nonnegative_finite_and_permutation_invariant(spec, n, seed):
    p = coreml.init_params(spec, seed)
    batch = _batch(spec, n, seed + 1)
    value = coreml.loss(p, batch)
    assert math.isfinite(value) and value >= 0
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = Batch(batch.features[perm], batch.labels[perm])
    assert coreml.loss(p, shuffled) == pytest.approx(value, rel=1e-12, abs=1e-14)
    assert np.allclose(coreml.gradient(p, shuffled), coreml.gradient(p, batch), rtol=1e-10, atol=1e-14)


@given(st.integers(1, 6), st.integers(1, 5), st.integers(2, 5), st.integers(1, 6), st.integers(0, 10_000))
def test_tanh_gradient_matches_finite_differences(d, h, c, n, seed):
    spec = ModelSpec(d, h, c, "tanh")
    p = coreml.init_params(spec, seed)
    assert coreml.finite_diff_check(p, _batch(spec, n, seed + 1), 1e-5) < 1e-5
