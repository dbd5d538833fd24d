"""Call-count and wall-time profiler for hot paths.

Example::

    from uprofiler import profile, format_results

    @profile
    def forward(x): ...

    @profile(name="beam")
    def search(x): ...

    print(format_results())

Counters live in a process-wide registry keyed by name; ``reset`` clears them.
"""

import functools
import logging
import time

log = logging.getLogger(__name__)

perf_counter = time.perf_counter

_t_start = perf_counter()
enabled = True


class _Counter:
    registry = {}

    def __init__(self, name):
        self.name = name
        self.n = 0
        self.total_s = 0.0

        self.registry[name] = self

    def record(self, delta):
        self.n += 1
        self.total_s += delta

    @property
    def average(self):
        return self.total_s / self.n if self.n else 0.0

    def __str__(self):
        total_ms = self.total_s * 1000
        return f"{self.name:24.24} {self.n : >8} calls {total_ms:>12.3f}ms total {self.average * 1000:>12.3f}ms average"


def profile(f=None, *, name=None):
    """Function/Method decorator recording call count and elapsed wall time."""
    if f is None:
        return lambda x: profile(x, name=name)

    if name is None:
        name = f.__qualname__

    counter = _Counter.registry.get(name) or _Counter(name)

    @functools.wraps(f)
    def inner(*args, **kwargs):
        if not enabled:
            return f(*args, **kwargs)
        t_start = perf_counter()
        try:
            return f(*args, **kwargs)
        finally:
            counter.record(perf_counter() - t_start)

    return inner


def reset():
    """Zero every counter and restart the global clock."""
    global _t_start
    _t_start = perf_counter()
    for counter in _Counter.registry.values():
        counter.n = 0
        counter.total_s = 0.0


def results():
    """Rows ``{"name", "calls", "total_s", "average_s"}`` sorted by total time."""
    counters = sorted(_Counter.registry.values(), key=lambda c: c.total_s, reverse=True)
    return [
        {"name": c.name, "calls": c.n, "total_s": c.total_s, "average_s": c.average}
        for c in counters
        if c.n
    ]


def _table_formatter(name, calls, total_pct, total_ms, avg_ms):
    return f"{name:32.32} {calls: >8} {total_pct: >10} {total_ms: >13} {avg_ms: >13}"


def format_results():
    """Summary table of every counter that has been called."""
    t_total_ms = (perf_counter() - _t_start) * 1000

    header = _table_formatter("Name", "Calls", "Total (%)", "Total (ms)", "Average (ms)")
    lines = [f"Total-Time: {t_total_ms:6.3f}ms", header, "-" * len(header)]
    for row in results():
        total_ms = row["total_s"] * 1000
        lines.append(
            _table_formatter(
                name=row["name"],
                calls=row["calls"],
                total_pct=round(100 * total_ms / t_total_ms, 2) if t_total_ms else 0.0,
                total_ms=round(total_ms, 3),
                avg_ms=round(row["average_s"] * 1000, 3),
            )
        )
    return "\n".join(lines)
