import logging

import numpy as np
import pytest

from tsds.store import EmbeddingSet


@pytest.fixture(autouse=True)
def _quiet_tsds_logs():
    # assumption-violation warnings are expected in randomized checks
    logger = logging.getLogger("tsds")
    old = logger.level
    logger.setLevel(logging.ERROR)
    yield
    logger.setLevel(old)


def make_set(vectors, ids=None, normalized=False):
    v = np.asarray(vectors, dtype=np.float64)
    if ids is None:
        ids = np.arange(len(v), dtype=np.uint64)
    return EmbeddingSet(np.asarray(ids, dtype=np.uint64), v, normalized)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
