import math

import numpy as np
import pytest

from sftnet.errors import ParameterError
from sftnet.optim import AdamState, ParamStore, adam_step


def test_adam_two_steps_match_hand_trace():
    store = ParamStore(np.float64)
    theta = store.add("theta", np.array(1.0))
    state = AdamState.for_params(store, alpha=0.1, beta1=0.9, beta2=0.999, eps=1e-8)

    theta.grad = np.array(0.5)
    adam_step(store, state)
    # m1 = 0.05, v1 = 0.00025; bias-corrected: 0.5 and 0.25
    expected1 = 1.0 - 0.1 * 0.5 / (math.sqrt(0.25) + 1e-8)
    assert abs(theta.data - expected1) <= 1e-12

    theta.grad = np.array(-0.25)
    adam_step(store, state)
    # m2 = 0.9*0.05 - 0.1*0.25 = 0.02, v2 = 0.999*0.00025 + 0.001*0.0625 = 0.00031225
    m_hat = 0.02 / (1 - 0.9 ** 2)
    v_hat = 0.00031225 / (1 - 0.999 ** 2)
    expected2 = expected1 - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert abs(theta.data - expected2) <= 1e-12
    assert state.t == 2
    assert abs(state.m["theta"] - 0.02) <= 1e-15
    assert abs(state.v["theta"] - 0.00031225) <= 1e-15


def test_adam_defaults():
    state = AdamState()
    assert (state.alpha, state.beta1, state.beta2, state.eps) == (1e-4, 0.9, 0.999, 1e-7)


def test_adam_missing_gradient_changes_nothing():
    store = ParamStore(np.float64)
    a = store.add("a", np.ones(2))
    store.add("b", np.ones(2))
    state = AdamState.for_params(store)
    a.grad = np.ones(2)
    with pytest.raises(ParameterError, match="'b'"):
        adam_step(store, state)
    assert state.t == 0
    np.testing.assert_array_equal(a.data, np.ones(2))


def test_adam_ignores_buffers():
    store = ParamStore(np.float64)
    w = store.add("w", np.ones(3))
    buf = store.add("running", np.full(3, 7.0), trainable=False)
    state = AdamState.for_params(store)
    w.grad = np.ones(3)
    adam_step(store, state)
    np.testing.assert_array_equal(buf.data, np.full(3, 7.0))
    assert "running" not in state.m


def test_first_step_moves_by_alpha_in_gradient_sign():
    store = ParamStore(np.float64)
    w = store.add("w", np.zeros(3))
    state = AdamState.for_params(store, alpha=0.01, eps=1e-12)
    w.grad = np.array([3.0, -0.5, 1e-3])
    adam_step(store, state)
    np.testing.assert_allclose(w.data, [-0.01, 0.01, -0.01], rtol=1e-8)


def test_param_store_bookkeeping():
    store = ParamStore(np.float32)
    store.add("a", np.zeros((2, 3)))
    store.add("m", np.zeros(4), trainable=False)
    assert store.num_parameters() == 6
    assert len(store) == 1 and "m" in store and "zz" not in store
    assert [n for n, _ in store.items()] == ["a", "m"]
    assert store["a"].dtype == np.float32
    with pytest.raises(ParameterError):
        store.add("a", np.zeros(1))
    with pytest.raises(ParameterError):
        store["zz"]
    copy = store.astype(np.float64)
    assert copy["m"].dtype == np.float64 and not copy["m"].requires_grad
