import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from builders import finite_difference_errors
from dqjl.errors import CheckpointError, ShapeMismatchError
from dqjl.net import (
    QNetworkParams,
    adam_step,
    aggregate_dueling,
    backward,
    dueling_forward,
    dueling_streams,
    dumps_checkpoint,
    forward,
    init_params,
    layer_shapes,
    load,
    loads_checkpoint,
    save,
)


def small(arch, seed=0, K=2, hidden=(5, 7)):
    p = init_params(arch, K, np.random.default_rng(seed), hidden)
    rng = np.random.default_rng(seed + 1000)
    for w in p.weights.values():
        w += rng.normal(0.0, 0.1, size=w.shape)  # nonzero biases too
    return p


def test_default_shapes():
    shapes = layer_shapes("standard", 20)
    assert shapes["W1"] == (120, 128) and shapes["W2"] == (128, 256) and shapes["W3"] == (256, 21)
    d = layer_shapes("dueling", 20)
    assert d["Wv2"] == (256, 1) and d["Wa2"] == (256, 21) and d["W1"] == (120, 128)


def test_unknown_arch():
    with pytest.raises(ValueError):
        layer_shapes("lstm", 3)


def test_glorot_bounds_and_zero_bias():
    p = init_params("standard", 4, np.random.default_rng(0))
    limit = math.sqrt(6.0 / (24 + 128))
    assert np.abs(p.weights["W1"]).max() <= limit
    assert np.all(p.weights["b1"] == 0.0) and p.adam_t == 0


def test_zero_net_gives_zero_q():
    p = init_params("standard", 3, np.random.default_rng(0))
    for w in p.weights.values():
        w[...] = 0.0
    assert np.all(forward(p, np.random.default_rng(1).normal(size=18)) == 0.0)


def test_relu_chain_kills_negative_input():
    p = init_params("standard", 1, np.random.default_rng(0), hidden=(1, 1))
    for w in p.weights.values():
        w[...] = 0.0
    p.weights["W1"][0, 0] = 1.0
    p.weights["W2"][0, 0] = 1.0
    p.weights["W3"][0, :] = 1.0
    x = np.zeros(6)
    x[0] = -2.0
    assert forward(p, x).tolist() == [0.0, 0.0]
    x[0] = 2.0
    assert forward(p, x).tolist() == [2.0, 2.0]


def _naive_forward(w, x):
    def dense(inp, W, b, relu):
        out = []
        for j in range(W.shape[1]):
            acc = b[j]
            for i in range(W.shape[0]):
                acc += inp[i] * W[i, j]
            out.append(max(acc, 0.0) if relu else acc)
        return out

    a1 = dense(x, w["W1"], w["b1"], True)
    a2 = dense(a1, w["W2"], w["b2"], True)
    return np.array(dense(a2, w["W3"], w["b3"], False))


def test_forward_matches_loop_oracle():
    p = init_params("standard", 3, np.random.default_rng(4), hidden=(16, 24))
    x = np.random.default_rng(5).normal(size=18)
    np.testing.assert_allclose(forward(p, x), _naive_forward(p.weights, x), rtol=0, atol=1e-12)


def test_forward_batch_matches_single():
    p = small("dueling", seed=3)
    X = np.random.default_rng(2).normal(size=(5, 12))
    batch = forward(p, X)
    for i in range(5):
        np.testing.assert_allclose(batch[i], forward(p, X[i]), rtol=0, atol=1e-14)


def test_forward_shape_error():
    p = small("standard")
    with pytest.raises(ShapeMismatchError):
        forward(p, np.zeros(13))


def test_dueling_aggregation_examples():
    q = aggregate_dueling(np.array([[2.0]]), np.array([[1.0, 0.0, -1.0]]))
    assert q.tolist() == [[3.0, 2.0, 1.0]]
    q = aggregate_dueling(np.array([[0.0]]), np.array([[5.0, 5.0, 5.0]]))
    assert q.tolist() == [[0.0, 0.0, 0.0]]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dueling_mean_q_equals_value(seed):
    p = small("dueling", seed=seed % 1000, K=3)
    x = np.random.default_rng(seed).normal(size=(4, 18)) * 3
    value, _ = dueling_streams(p, x)
    q = dueling_forward(p, x)
    np.testing.assert_allclose(q.mean(axis=1), value, rtol=0, atol=1e-12)


def test_dueling_forward_rejects_standard():
    with pytest.raises(ShapeMismatchError):
        dueling_forward(small("standard"), np.zeros(12))


@pytest.mark.parametrize("arch", ["standard", "dueling"])
def test_zero_residual_zero_gradient(arch):
    p = small(arch)
    x = np.random.default_rng(1).normal(size=12)
    q = forward(p, x)
    grads, loss = backward(p, x, 2, q[2])
    assert loss == 0.0
    assert all(np.all(g == 0.0) for g in grads.values())


def test_only_selected_output_column_gets_gradient():
    p = small("standard")
    grads, _ = backward(p, np.random.default_rng(1).normal(size=12), 1, 5.0)
    assert np.all(grads["W3"][:, [0, 2]] == 0.0)
    assert np.all(grads["b3"][[0, 2]] == 0.0)
    assert np.any(grads["W3"][:, 1] != 0.0)


@pytest.mark.parametrize("arch", ["standard", "dueling"])
def test_finite_differences(arch):
    rng = np.random.default_rng(17)
    for case in range(5):
        p = small(arch, seed=case)
        x = rng.normal(size=12)
        errs = finite_difference_errors(p, x, int(rng.integers(0, 3)), float(rng.normal(0, 3)))
        assert errs.max() < 1e-5


def test_finite_differences_batch():
    p = small("dueling", seed=9)
    rng = np.random.default_rng(3)
    errs = finite_difference_errors(p, rng.normal(size=(4, 12)), rng.integers(0, 3, 4), rng.normal(size=4))
    assert errs.max() < 1e-5


def test_backward_shape_checks():
    p = small("standard")
    with pytest.raises(ShapeMismatchError):
        backward(p, np.zeros((3, 12)), [0, 1], [0.0, 0.0, 0.0])


# -- Adam -------------------------------------------------------------------------


def _scalar_params():
    p = init_params("standard", 1, np.random.default_rng(0), hidden=(1, 1))
    p.weights["W2"][0, 0] = 0.5
    return p


def test_adam_first_step_magnitude():
    p = _scalar_params()
    adam_step(p, {"W2": np.array([[1.0]])})
    assert p.weights["W2"][0, 0] == pytest.approx(0.5 - 0.0005 / (1.0 + 1e-8), abs=1e-15)
    assert p.adam_t == 1


def test_adam_zero_gradient_is_noop():
    p = _scalar_params()
    before = p.copy()
    adam_step(p, {k: np.zeros_like(w) for k, w in p.weights.items()})
    for k in p.weights:
        assert np.array_equal(p.weights[k], before.weights[k])


def test_adam_two_step_hand_trace():
    p = _scalar_params()
    adam_step(p, {"W2": np.array([[1.0]])}, lr=0.1)
    adam_step(p, {"W2": np.array([[-2.0]])}, lr=0.1)
    # step 1: m = 0.1, v = 0.001, m_hat = 1, v_hat = 1
    theta1 = 0.5 - 0.1 * 1.0 / (1.0 + 1e-8)
    # step 2: m = 0.09 - 0.2 = -0.11, v = 0.000999 + 0.004 = 0.004999
    m_hat = -0.11 / 0.19
    v_hat = 0.004999 / 0.001999
    theta2 = theta1 - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert abs(p.weights["W2"][0, 0] - theta2) < 1e-12
    assert abs(p.adam_m["W2"][0, 0] - -0.11) < 1e-12
    assert abs(p.adam_v["W2"][0, 0] - 0.004999) < 1e-12


def test_adam_gradient_clipping_knob():
    p = _scalar_params()
    q = _scalar_params()
    adam_step(p, {"W2": np.array([[10.0]])}, max_grad_norm=1.0)
    adam_step(q, {"W2": np.array([[1.0]])})
    assert p.adam_m["W2"][0, 0] == q.adam_m["W2"][0, 0]


def test_adam_shape_check():
    with pytest.raises(ShapeMismatchError):
        adam_step(_scalar_params(), {"W2": np.zeros((2, 2))})


# -- checkpoints --------------------------------------------------------------------


@pytest.mark.parametrize("arch", ["standard", "dueling"])
def test_checkpoint_roundtrip(tmp_path, arch):
    p = small(arch, seed=2, K=4, hidden=(8, 6))
    grads, _ = backward(p, np.ones(24), 1, 3.0)
    adam_step(p, grads)
    path = tmp_path / "ckpt.json"
    save(p, path)
    q = load(path)
    assert (q.arch, q.pad_size, q.hidden, q.adam_t) == (arch, 4, (8, 6), 1)
    for group in ("weights", "adam_m", "adam_v"):
        for k, w in getattr(p, group).items():
            assert np.array_equal(getattr(q, group)[k], w)
    X = np.random.default_rng(0).normal(size=(100, 24))
    assert np.array_equal(forward(p, X), forward(q, X))


def test_checkpoint_truncated(tmp_path):
    text = dumps_checkpoint(small("standard"))
    path = tmp_path / "bad.json"
    path.write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError):
        load(path)


def test_checkpoint_with_inf_rejected():
    doc = json.loads(dumps_checkpoint(small("standard")))
    doc["weights"][0]["values"][0] = float("inf")
    with pytest.raises(CheckpointError):
        loads_checkpoint(json.dumps(doc))


def test_checkpoint_wrong_size_rejected():
    doc = json.loads(dumps_checkpoint(small("standard")))
    doc["weights"][0]["values"].pop()
    with pytest.raises(CheckpointError):
        loads_checkpoint(json.dumps(doc))


def test_save_refuses_nan():
    p = small("standard")
    p.weights["b1"][0] = np.nan
    with pytest.raises(CheckpointError):
        dumps_checkpoint(p)


def test_missing_checkpoint_file(tmp_path):
    with pytest.raises(CheckpointError):
        load(tmp_path / "nope.json")


def test_params_shape_validation():
    p = small("standard")
    w = dict(p.weights)
    w["W1"] = np.zeros((3, 3))
    with pytest.raises(ShapeMismatchError):
        QNetworkParams(arch="standard", pad_size=2, hidden=(5, 7), weights=w)
