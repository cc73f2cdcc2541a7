import sys

import numpy as np
import pytest

from detkit import DetectionSet, GroundTruthSet


def make_dets(rows, source_id="m", images=None):
    """rows: (image, label, score, (x0, y0, x1, y1))"""
    if not rows:
        return DetectionSet.empty(source_id, images or ())
    return DetectionSet([r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows],
                        [r[3] for r in rows], source_id=source_id, images=images)


def make_gts(rows, images=None):
    """rows: (image, label, (x0, y0, x1, y1), is_group_of)"""
    if not rows:
        return GroundTruthSet(np.array([], dtype="U1"), np.array([], dtype="U1"), np.zeros((0, 4)),
                              np.zeros(0, dtype=bool), images=images or ())
    return GroundTruthSet([r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows],
                          [r[3] for r in rows], images=images)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
