from __future__ import annotations

import pytest

from veritree.metrics import metrics


@pytest.fixture(autouse=True)
def _reset_metrics():
    metrics.reset()
    yield
