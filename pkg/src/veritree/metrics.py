"""Process-wide counters (drops, retries, clamps), dumped as JSON on CLI exit."""

from __future__ import annotations

import json
import threading


class MetricsRegistry:
    """Thread-safe named counters."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._counters: dict[str, int] = {}

    def increment(self, name: str, amount: int = 1) -> None:
        with self._lock:
            self._counters[name] = self._counters.get(name, 0) + amount

    def get(self, name: str) -> int:
        with self._lock:
            return self._counters.get(name, 0)

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return dict(sorted(self._counters.items()))

    def reset(self) -> None:
        with self._lock:
            self._counters.clear()

    def dump_json(self) -> str:
        return json.dumps(self.snapshot(), indent=2, sort_keys=True)


metrics = MetricsRegistry()
