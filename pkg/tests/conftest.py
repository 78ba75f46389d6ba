import numpy as np
import pytest

from wzlab import ad


def fd_mismatch(loss_fn, store: ad.ParamStore, step: float = 1e-5, coords=None):
    """Largest relative gap between recorded gradients and central differences.

    The gap at coordinate i is |g_i - fd_i| / (max(|g_i|, |fd_i|) + 1e-6); the
    small floor keeps coordinates with (near) zero gradient from dividing by
    zero while still flagging absolute errors above ~1e-10.
    """
    store.zero_grad()
    ad.backward(loss_fn())
    grads = store.grads.copy()
    store.zero_grad()
    coords = range(len(store)) if coords is None else coords
    worst = 0.0
    for i in coords:
        v = store.values[i]
        store.values[i] = v + step
        up = float(loss_fn().value)
        store.values[i] = v - step
        down = float(loss_fn().value)
        store.values[i] = v
        fd = (up - down) / (2 * step)
        gap = abs(grads[i] - fd) / (max(abs(grads[i]), abs(fd)) + 1e-6)
        worst = max(worst, gap)
    return worst


@pytest.fixture
def fd_check():
    return fd_mismatch


_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion; returns ``ok``."""
    lines = request.config.stash.setdefault(_CRITERIA, {})
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[number] = line
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
