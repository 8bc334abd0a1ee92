import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: takes more than a few seconds")
    config.addinivalue_line("markers", "criterion(k): acceptance criterion number")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance reporting: tests marked ``criterion(k)`` add notes through the
# ``acceptance_note`` fixture; one summary line per criterion is printed at the end
_ACCEPTANCE: dict[int, list] = {}


@pytest.fixture
def acceptance_note(request):
    notes: list[str] = []
    request.node._acceptance_notes = notes
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        notes = list(getattr(item, "_acceptance_notes", []))
        if rep.skipped and isinstance(rep.longrepr, tuple):
            notes.append(str(rep.longrepr[-1]).removeprefix("Skipped: "))
        elif rep.failed:
            notes.append(str(rep.longrepr).strip().splitlines()[-1][:200])
        status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
        _ACCEPTANCE.setdefault(marker.args[0], []).append((status, item.name, notes))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        results = _ACCEPTANCE[k]
        statuses = {s for s, _, _ in results}
        overall = "FAIL" if "FAIL" in statuses else "PASS" if "PASS" in statuses else "SKIP"
        parts = [f"{name} {s}" + (f" ({'; '.join(n)})" if n else "") for s, name, n in results]
        terminalreporter.write_line(f"criterion {k}: {overall} | " + " | ".join(parts))
