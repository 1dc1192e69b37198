"""Tester backed by an external process speaking newline-delimited JSON.

Each request is one line ``{"point": <WorkloadPoint>, "duration_s": <int>}`` on the
child's stdin; the child answers with one line on stdout, either
``{"measurement": <Measurement>}`` or ``{"error": "<message>"}``.  Only one request
is outstanding at a time.
"""

from __future__ import annotations

import json
import logging
import os
import select
import subprocess
import time
from typing import Sequence

from .monitor import TesterError
from .simulator import DIAG_COUNTERS, PERF_COUNTERS, Measurement
from .workload import ValidationError, WorkloadPoint

log = logging.getLogger(__name__)


class AdapterError(TesterError):
    pass


class AdapterTimeout(AdapterError):
    pass


class AdapterTester:
    """Callable tester that forwards each point to a child process.

    ``request_index`` counts requests sent so far, so error messages can name
    the evaluation that failed.
    """

    def __init__(self, command: Sequence[str], duration_s: int = 30, timeout_s: float = 120.0,
                 cwd: str | None = None):
        self.command = list(command)
        self.duration_s = duration_s
        self.timeout_s = timeout_s
        self.cwd = cwd
        self.request_index = 0
        self._proc: subprocess.Popen | None = None
        self._buf = b""

    def start(self) -> None:
        if self._proc is not None:
            return
        try:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, cwd=self.cwd,
            )
        except OSError as exc:
            raise AdapterError(f"cannot start adapter {self.command[0]!r}: {exc}") from exc

    def close(self) -> None:
        proc, self._proc = self._proc, None
        if proc is None:
            return
        try:
            proc.stdin.close()
        except OSError:
            pass
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()
        proc.stdout.close()

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.close()

    def _readline(self, deadline: float) -> bytes:
        fd = self._proc.stdout.fileno()
        while b"\n" not in self._buf:
            left = deadline - time.monotonic()
            if left <= 0:
                # a late reply would desynchronize the stream; the child is not reused
                self._proc.kill()
                self.close()
                raise AdapterTimeout(
                    f"adapter gave no response within {self.timeout_s:g} s to evaluation #{self.request_index}")
            ready, _, _ = select.select([fd], [], [], left)
            if not ready:
                continue
            chunk = os.read(fd, 65536)
            if not chunk:
                code = self._proc.poll()
                raise AdapterError(
                    f"adapter exited (status {code}) before answering evaluation #{self.request_index}")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line

    def __call__(self, point: WorkloadPoint, seed=None) -> Measurement:
        self.start()
        self.request_index += 1
        request = json.dumps({"point": point.to_dict(), "duration_s": self.duration_s}) + "\n"
        try:
            self._proc.stdin.write(request.encode())
            self._proc.stdin.flush()
        except OSError as exc:
            raise AdapterError(f"adapter closed its input at evaluation #{self.request_index}: {exc}") from exc
        line = self._readline(time.monotonic() + self.timeout_s)
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise AdapterError(f"evaluation #{self.request_index}: adapter sent invalid JSON: {exc}") from exc
        if not isinstance(reply, dict):
            raise AdapterError(f"evaluation #{self.request_index}: adapter reply is not an object")
        if "error" in reply:
            raise AdapterError(f"evaluation #{self.request_index}: adapter reported: {reply['error']}")
        if "measurement" not in reply:
            raise AdapterError(f"evaluation #{self.request_index}: reply has neither 'measurement' nor 'error'")
        try:
            m = Measurement.from_dict(reply["measurement"])
        except ValidationError as exc:
            raise AdapterError(f"evaluation #{self.request_index}: {exc}") from exc
        missing = [c for c in PERF_COUNTERS if c not in m.perf_counters]
        missing += [c for c in DIAG_COUNTERS if c not in m.diag_counters]
        if missing:
            raise AdapterError(f"evaluation #{self.request_index}: measurement lacks counter(s) {missing}")
        return m
