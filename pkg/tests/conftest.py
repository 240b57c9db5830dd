import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(int(os.environ.get("MUSEMASK_THREADS", "1") or 1))

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    from musemask.synth_dataset import SceneConfig, build_dataset, load_corpus

    root = tmp_path_factory.mktemp("corpus") / "c"
    build_dataset(40, SceneConfig(), root, seed=3)
    return load_corpus(root)


_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.skipped and rep.passed):
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.skipped:
        state, detail = "SKIP", str(rep.longrepr[-1]) if isinstance(rep.longrepr, tuple) else detail
    elif rep.failed:
        state = "FAIL"
        if not detail:
            detail = rep.longreprtext.strip().splitlines()[-1] if rep.longreprtext else ""
    else:
        state = "PASS"
    if rep.when == "call" or state != "PASS":
        _CRITERIA[marker.args[0]] = (state, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        state, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {state}  {detail}")
