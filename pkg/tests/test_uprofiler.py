import pytest
import uprofiler
from common import MockTime


@pytest.fixture
def mock_time(mocker):
    mock_time = MockTime.patch(mocker, "uprofiler.perf_counter")
    uprofiler.reset()
    yield mock_time
    uprofiler.reset()


def test_profile_counts_calls(mock_time):
    @uprofiler.profile(name="test.forward")
    def forward(step):
        mock_time.time += step

    forward(0.5)
    forward(1.5)

    (row,) = [r for r in uprofiler.results() if r["name"] == "test.forward"]
    assert row["calls"] == 2
    assert row["total_s"] == 2.0
    assert row["average_s"] == 1.0


def test_profile_default_name_is_qualname(mock_time):
    class Model:
        @uprofiler.profile
        def decode(self):
            mock_time.time += 1

    Model().decode()
    names = [r["name"] for r in uprofiler.results()]
    assert "test_profile_default_name_is_qualname.<locals>.Model.decode" in names


def test_profile_records_on_exception(mock_time):
    @uprofiler.profile(name="test.fails")
    def fails():
        mock_time.time += 3
        raise RuntimeError

    with pytest.raises(RuntimeError):
        fails()
    (row,) = [r for r in uprofiler.results() if r["name"] == "test.fails"]
    assert row["total_s"] == 3


def test_shared_name_shares_counter(mock_time):
    @uprofiler.profile(name="test.shared")
    def a():
        mock_time.time += 1

    @uprofiler.profile(name="test.shared")
    def b():
        mock_time.time += 2

    a()
    b()
    (row,) = [r for r in uprofiler.results() if r["name"] == "test.shared"]
    assert row["calls"] == 2 and row["total_s"] == 3


def test_disabled_records_nothing(mock_time, monkeypatch):
    monkeypatch.setattr(uprofiler, "enabled", False)

    @uprofiler.profile(name="test.disabled")
    def f():
        return 7

    assert f() == 7
    assert "test.disabled" not in [r["name"] for r in uprofiler.results()]


def test_format_results(mock_time):
    @uprofiler.profile(name="test.table")
    def f():
        mock_time.time += 0.25

    f()
    mock_time.time = 1.0
    table = uprofiler.format_results()
    assert table.startswith("Total-Time: 1000.000ms")
    (line,) = [line for line in table.splitlines() if line.startswith("test.table")]
    assert line.split()[1:] == ["1", "25.0", "250.0", "250.0"]


def test_reset_clears_counters(mock_time):
    @uprofiler.profile(name="test.reset")
    def f():
        mock_time.time += 1

    f()
    uprofiler.reset()
    assert "test.reset" not in [r["name"] for r in uprofiler.results()]
