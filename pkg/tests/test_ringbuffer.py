import numpy as np
import pytest
from ringbuffer import RingBuffer


def test_window_eviction():
    smoother = RingBuffer(3)
    assert smoother.max_size == 3
    assert len(smoother) == 0
    assert not smoother.full

    smoother.append(2.0)
    smoother.append(4.0)
    assert smoother.mean() == 3.0
    assert not smoother.full

    smoother.append(6.0)
    smoother.append(10.0)
    assert smoother.full
    assert len(smoother) == 3
    np.testing.assert_array_equal(smoother.to_array(), [4.0, 6.0, 10.0])
    assert smoother.mean() == pytest.approx(20.0 / 3)
    assert smoother[0] == 4.0
    assert smoother[-1] == 10.0
    with pytest.raises(IndexError):
        smoother[3]


def test_empty_mean_raises():
    with pytest.raises(ZeroDivisionError):
        RingBuffer(4).mean()


@pytest.mark.parametrize("size", [0, -1])
def test_invalid_size(size):
    with pytest.raises(ValueError):
        RingBuffer(size)


def test_restored_window_smooths_identically():
    losses = np.random.default_rng(0).exponential(size=40)
    uninterrupted = RingBuffer(8)
    for loss in losses[:25]:
        uninterrupted.append(loss)

    resumed = RingBuffer.from_array(8, uninterrupted.to_array())
    assert resumed.full
    for loss in losses[25:]:
        uninterrupted.append(loss)
        resumed.append(loss)
        assert resumed.mean() == uninterrupted.mean()
    np.testing.assert_array_equal(resumed.to_array(), losses[-8:])


def test_from_array_keeps_newest():
    np.testing.assert_array_equal(RingBuffer.from_array(2, [1.0, 2.0, 3.0]).to_array(), [2.0, 3.0])
    assert len(RingBuffer.from_array(3, [])) == 0
