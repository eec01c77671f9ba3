"""Sandbox clients: fresh-process local execution and the NDJSON worker-pool protocol.

Both clients run one snippet per fresh interpreter process (no state carries
over between requests). The worker pool speaks newline-delimited JSON over the
stdin/stdout of long-lived worker subprocesses; protocol version "1".
"""

from __future__ import annotations

import itertools
import json
import os
import queue
import select
import shutil
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass

from .metrics import metrics
from .verify import STATUS_ERROR, STATUS_OK, STATUS_TIMEOUT, ExecutionResult

PROTOCOL_VERSION = "1"
OUTPUT_CAP_BYTES = 64 * 1024


class SandboxTransportError(RuntimeError):
    """The sandbox itself failed (worker died, handshake failed); distinct from
    the executed program failing."""


@dataclass(frozen=True)
class ResourceLimits:
    timeout_ms: int = 10_000
    memory_mb: int = 512

    def __post_init__(self) -> None:
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")
        if self.memory_mb <= 0:
            raise ValueError("memory_mb must be positive")


def _truncate(text: str, counter: str) -> str:
    data = text.encode("utf-8", errors="replace")
    if len(data) <= OUTPUT_CAP_BYTES:
        return text
    metrics.increment(counter)
    return data[:OUTPUT_CAP_BYTES].decode("utf-8", errors="replace")


class LocalSandbox:
    """Runs each snippet in a fresh ``python -I`` subprocess under limits."""

    def __init__(self, python_bin: str | None = None, scratch_dir: str | None = None,
                 limits: ResourceLimits | None = None):
        self.python_bin = python_bin or sys.executable
        self._owns_scratch = scratch_dir is None
        self.scratch_dir = scratch_dir or tempfile.mkdtemp(prefix="veritree-sandbox-")
        os.makedirs(self.scratch_dir, exist_ok=True)
        self.default_limits = limits or ResourceLimits()
        self._seq = itertools.count()

    def execute(self, code: str, limits: ResourceLimits | None = None) -> ExecutionResult:
        limits = limits or self.default_limits
        path = os.path.join(self.scratch_dir, f"snippet_{next(self._seq)}.py")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(code)

        def _apply_rlimits():  # runs in the child before exec
            import resource

            cap = limits.memory_mb * 1024 * 1024
            resource.setrlimit(resource.RLIMIT_AS, (cap, cap))

        start = time.monotonic()
        try:
            proc = subprocess.run(
                [self.python_bin, "-I", path],
                capture_output=True,
                text=True,
                cwd=self.scratch_dir,
                timeout=limits.timeout_ms / 1000.0,
                preexec_fn=_apply_rlimits,
            )
        except subprocess.TimeoutExpired as exc:
            duration_ms = max(int((time.monotonic() - start) * 1000), limits.timeout_ms)
            stdout = exc.stdout or b""
            stderr = exc.stderr or b""
            if isinstance(stdout, bytes):
                stdout = stdout.decode("utf-8", errors="replace")
            if isinstance(stderr, bytes):
                stderr = stderr.decode("utf-8", errors="replace")
            return ExecutionResult(
                status=STATUS_TIMEOUT,
                stdout=_truncate(stdout, "sandbox.stdout_truncated"),
                stderr=_truncate(stderr, "sandbox.stderr_truncated"),
                duration_ms=duration_ms,
            )
        except OSError as exc:
            raise SandboxTransportError(f"failed to spawn sandbox process: {exc}") from exc
        finally:
            try:
                os.unlink(path)
            except OSError:
                pass

        duration_ms = int((time.monotonic() - start) * 1000)
        status = STATUS_OK if proc.returncode == 0 else STATUS_ERROR
        return ExecutionResult(
            status=status,
            stdout=_truncate(proc.stdout, "sandbox.stdout_truncated"),
            stderr=_truncate(proc.stderr, "sandbox.stderr_truncated"),
            duration_ms=duration_ms,
        )

    def close(self) -> None:
        if self._owns_scratch:
            shutil.rmtree(self.scratch_dir, ignore_errors=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class _Worker:
    """One long-lived worker subprocess; single request at a time."""

    def __init__(self, cmd: list[str]):
        self.cmd = cmd
        try:
            self.proc = subprocess.Popen(
                cmd,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise SandboxTransportError(f"failed to spawn worker {cmd!r}: {exc}") from exc
        hello = self._readline(deadline_s=30.0)
        try:
            handshake = json.loads(hello)
        except json.JSONDecodeError as exc:
            self.kill()
            raise SandboxTransportError(f"bad worker handshake line: {hello!r}") from exc
        version = str(handshake.get("protocol_version"))
        if version != PROTOCOL_VERSION:
            self.kill()
            raise SandboxTransportError(
                f"worker speaks protocol {version!r}, expected {PROTOCOL_VERSION!r}"
            )

    def _readline(self, deadline_s: float) -> str:
        end = time.monotonic() + deadline_s
        fd = self.proc.stdout.fileno()
        buf = []
        while True:
            remaining = end - time.monotonic()
            if remaining <= 0:
                self.kill()
                raise SandboxTransportError("worker response timed out")
            ready, _, _ = select.select([fd], [], [], remaining)
            if not ready:
                continue
            chunk = os.read(fd, 65536).decode("utf-8", errors="replace")
            if not chunk:
                self.kill()
                raise SandboxTransportError("worker closed its stdout")
            buf.append(chunk)
            if "\n" in chunk:
                break
        line, _, rest = "".join(buf).partition("\n")
        self._pending = rest
        return line

    def request(self, payload: dict, deadline_s: float) -> dict:
        try:
            self.proc.stdin.write(json.dumps(payload) + "\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            self.kill()
            raise SandboxTransportError("worker stdin closed") from exc
        line = self._readline(deadline_s)
        try:
            return json.loads(line)
        except json.JSONDecodeError as exc:
            self.kill()
            raise SandboxTransportError(f"unparseable worker response: {line!r}") from exc

    def kill(self) -> None:
        if self.proc.poll() is None:
            self.proc.kill()
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                pass


class WorkerPoolSandbox:
    """Pool of protocol-v1 workers; requests block until a worker is free."""

    def __init__(self, worker_cmd: list[str], pool_size: int | None = None,
                 limits: ResourceLimits | None = None):
        if not worker_cmd:
            raise ValueError("worker_cmd must be non-empty")
        self.worker_cmd = list(worker_cmd)
        self.pool_size = pool_size or os.cpu_count() or 1
        self.default_limits = limits or ResourceLimits()
        self._workers: queue.Queue[_Worker] = queue.Queue()
        self._all: list[_Worker] = []
        self._seq = itertools.count()
        self._lock = threading.Lock()
        for _ in range(self.pool_size):
            worker = _Worker(self.worker_cmd)
            self._all.append(worker)
            self._workers.put(worker)

    def execute(self, code: str, limits: ResourceLimits | None = None) -> ExecutionResult:
        limits = limits or self.default_limits
        with self._lock:
            request_id = f"req-{next(self._seq)}"
        worker = self._workers.get()
        try:
            payload = {
                "id": request_id,
                "code": code,
                "timeout_ms": limits.timeout_ms,
                "memory_mb": limits.memory_mb,
            }
            response = worker.request(payload, deadline_s=limits.timeout_ms / 1000.0 + 10.0)
        except SandboxTransportError:
            with self._lock:
                replacement = _Worker(self.worker_cmd)
                self._all.append(replacement)
            self._workers.put(replacement)
            raise
        self._workers.put(worker)
        if response.get("id") != request_id:
            raise SandboxTransportError(
                f"response id {response.get('id')!r} does not match request {request_id!r}"
            )
        status = response.get("status")
        if status not in (STATUS_OK, STATUS_ERROR, STATUS_TIMEOUT):
            raise SandboxTransportError(f"unknown worker status {status!r}")
        return ExecutionResult(
            status=status,
            stdout=_truncate(str(response.get("stdout", "")), "sandbox.stdout_truncated"),
            stderr=_truncate(str(response.get("stderr", "")), "sandbox.stderr_truncated"),
            duration_ms=int(response.get("duration_ms", 0)),
        )

    def close(self) -> None:
        for worker in self._all:
            try:
                if worker.proc.stdin:
                    worker.proc.stdin.close()
            except OSError:
                pass
            worker.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
