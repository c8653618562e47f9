import numpy as np
import pytest

from modules import ndgrad as nd
from modules.error_handler import NonFiniteError, ShapeError
from modules.optim import SGDState, clip_grad_norm, sgd_step


def test_plain_descent():
    p = nd.parameter([1.0, -2.0])
    sgd_step([p], [np.array([0.5, 0.5])], SGDState([p]), lr=0.1)
    np.testing.assert_allclose(p.data, [0.95, -2.05])


def test_zero_gradient_leaves_params_unchanged():
    p = nd.parameter([1.0, 2.0])
    state = SGDState([p])
    for _ in range(3):
        sgd_step([p], [np.zeros(2)], state, lr=0.1, momentum=0.9)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_quadratic_bowl_converges():
    x = nd.parameter([1.0])
    state = SGDState([x])
    for _ in range(150):
        x.zero_grad()
        (x * x).sum().backward()
        sgd_step([x], [x.grad], state, lr=0.1, momentum=0.9)
    assert abs(x.data[0]) < 1e-3


def test_missing_gradient_counts_as_zero():
    p = nd.parameter([2.0])
    sgd_step([p], [None], SGDState([p]), lr=0.5, weight_decay=0.1)
    np.testing.assert_allclose(p.data, [1.9])


def test_non_finite_gradient():
    p = nd.parameter([1.0])
    with pytest.raises(NonFiniteError):
        sgd_step([p], [np.array([np.inf])], SGDState([p]), lr=0.1)


def test_gradient_shape_mismatch():
    p = nd.parameter([1.0, 2.0])
    with pytest.raises(ShapeError):
        sgd_step([p], [np.ones(3)], SGDState([p]), lr=0.1)


def test_state_round_trip_continues_identically():
    a, b = nd.parameter([1.0, 1.0]), nd.parameter([1.0, 1.0])
    state_a = SGDState([a])
    sgd_step([a], [np.array([1.0, -1.0])], state_a, lr=0.1, momentum=0.9)
    b.data = a.data.copy()
    state_b = SGDState.from_arrays(state_a.to_arrays(), state_a.steps)
    for params, state in (([a], state_a), ([b], state_b)):
        sgd_step(params, [np.array([0.3, 0.2])], state, lr=0.1, momentum=0.9)
    np.testing.assert_array_equal(a.data, b.data)
    assert state_b.steps == 2


def test_clip_grad_norm():
    grads = [np.array([3.0]), np.array([4.0]), None]
    assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.hypot(grads[0], grads[1]), [1.0], rtol=1e-9)
