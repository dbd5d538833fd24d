import numpy as np
import pytest
from numerics import NonFiniteError, Parameter
from optim import Adam


def with_grad(name, values, grad):
    p = Parameter(name, values)
    p.tensor.grad = np.array(grad, dtype=np.float64)
    return p


def test_first_step_moves_by_learning_rate():
    p = with_grad("w", [1.0, -1.0, 0.5], [0.3, -2.0, 0.0])
    norm = Adam(learning_rate=0.1, grad_clip=None).update([p])
    assert norm == pytest.approx(np.sqrt(0.09 + 4.0))
    # Bias-corrected first step is lr * sign(g).
    np.testing.assert_allclose(p.values, [0.9, -0.9, 0.5], atol=1e-6)


def test_clipping_scales_gradients():
    opt = Adam(learning_rate=0.1, grad_clip=1.0)
    p = with_grad("w", [0.0, 0.0], [30.0, 40.0])
    assert opt.update([p]) == pytest.approx(50.0)
    np.testing.assert_allclose(opt.m["w"], 0.1 * np.array([0.6, 0.8]))


def test_learning_rate_override_and_zero():
    p = with_grad("w", [1.0], [1.0])
    opt = Adam(learning_rate=0.1)
    opt.update([p], learning_rate=0.0)
    assert p.values[0] == 1.0
    assert opt.t == 1
    opt.update([p], learning_rate=0.5)
    assert p.values[0] < 1.0


def test_non_finite_gradient_rejected():
    p = with_grad("w", [1.0], [np.nan])
    opt = Adam()
    with pytest.raises(NonFiniteError) as e:
        opt.update([p])
    assert "w" in str(e.value)
    assert p.values[0] == 1.0
    assert opt.t == 0


def test_negative_learning_rate():
    with pytest.raises(ValueError):
        Adam(learning_rate=-1.0)


def test_state_roundtrip():
    p = with_grad("a.w", [1.0, 2.0], [0.5, -0.5])
    opt = Adam(0.01)
    opt.update([p])
    opt.update([p])

    restored = Adam(0.01).load_arrays(opt.to_arrays())
    assert restored.t == 2
    np.testing.assert_array_equal(restored.m["a.w"], opt.m["a.w"])
    np.testing.assert_array_equal(restored.v["a.w"], opt.v["a.w"])

    q = Parameter("a.w", p.values)
    q.tensor.grad = p.grad.copy()
    opt.update([p])
    restored.update([q])
    np.testing.assert_array_equal(p.values, q.values)
