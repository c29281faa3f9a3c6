import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from quicknet import arch as A  # noqa: E402
from quicknet.train import TrainConfig, train  # noqa: E402

OVERFIT_SEED = 7
# wall-clock seconds of the session-scoped training runs
RUN_SECONDS: dict = {}


def overfit_task(n=100, seed=OVERFIT_SEED, shape=(3, 32, 32)):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n,) + shape).astype(np.float32)
    y = np.arange(n) % 10
    rng.shuffle(y)
    return x, y


@pytest.fixture(scope="session")
def overfit_run():
    """The 100-sample memorization run on the 2-block desk model."""
    x, y = overfit_task()
    g = A.build_quicknet(A.desk_config(dropout_rate=0.0), OVERFIT_SEED)
    cfg = TrainConfig(lr=0.05, momentum=0.9, batch_size=20, max_epochs=300, patience=50,
                      dropout_rate=0.0, hflip=False, shift_px=0, seed=OVERFIT_SEED, lr_schedule="constant")
    t0 = time.perf_counter()
    best, history = train(g, (x, y), cfg, val_data=(x, y))
    RUN_SECONDS["overfit"] = time.perf_counter() - t0
    return best, history, (x, y)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: list = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id, title): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.failed and call.excinfo is not None:
        msg = str(call.excinfo.value).strip().splitlines()
        detail = (detail + "; " if detail else "") + (msg[0] if msg else call.excinfo.typename)
    _CRITERIA.append((mark.args[0], mark.args[1], "PASS" if rep.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid, title, status, detail in sorted(_CRITERIA):
        terminalreporter.write_line(f"[{status}] criterion {cid} {title}: {detail}")
