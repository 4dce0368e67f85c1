"""Line-delimited JSON transport to external candidate providers and victim
oracles running as subprocesses.

Requests and responses are single JSON objects, one per line::

    -> {"kind": "candidates", "tokens": [...], "mask_index": 3, "max": 50}
    <- {"candidates": ["w1", "w2"]}
    -> {"kind": "score", "tokens": [...]}
    <- {"scores": [0.1, 0.9]}

A response of ``{"error": "..."}``, a timeout, malformed output or an exited
process all raise TransportError.
"""

from __future__ import annotations

import json
import queue
import shlex
import subprocess
import threading

import numpy as np

from .attack import AttackError


class TransportError(AttackError):
    pass


class SubprocessTransport:
    def __init__(self, command, timeout: float = 30.0):
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self._lock = threading.Lock()
        try:
            self.proc = subprocess.Popen(
                self.argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise TransportError(f"cannot start {self.argv!r}: {exc}") from exc
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self):
        for line in self.proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def _dead(self, what: str) -> TransportError:
        code = self.proc.poll()
        err = ""
        if code is not None and self.proc.stderr is not None:
            err = self.proc.stderr.read().strip()[-500:]
        return TransportError(f"{what} (exit code {code}){': ' + err if err else ''}")

    def request(self, message: dict) -> dict:
        with self._lock:
            if self.proc.poll() is not None:
                raise self._dead("provider process has exited")
            try:
                self.proc.stdin.write(json.dumps(message) + "\n")
                self.proc.stdin.flush()
            except (BrokenPipeError, OSError):
                raise self._dead("provider process closed its input") from None
            try:
                line = self._lines.get(timeout=self.timeout)
            except queue.Empty:
                raise TransportError(f"no response within {self.timeout}s") from None
            if line is None:
                self.proc.wait(timeout=self.timeout)
                raise self._dead("provider process ended without a response")
        try:
            reply = json.loads(line)
        except json.JSONDecodeError:
            raise TransportError(f"malformed response {line[:200]!r}") from None
        if not isinstance(reply, dict):
            raise TransportError("response is not a JSON object")
        if "error" in reply:
            raise TransportError(f"provider error: {reply['error']}")
        return reply

    def close(self):
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
                self.proc.wait(timeout=5)
            except (OSError, subprocess.TimeoutExpired):
                self.proc.kill()
                self.proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class SubprocessProvider:
    """Candidate provider speaking the ``candidates`` message."""

    def __init__(self, transport: SubprocessTransport, M: int = 50):
        self.transport = transport
        self.M = M

    def __call__(self, tokens, position, max_candidates=None):
        m = self.M if max_candidates is None else min(self.M, max_candidates)
        reply = self.transport.request(
            {"kind": "candidates", "tokens": list(tokens), "mask_index": int(position), "max": int(m)}
        )
        cands = reply.get("candidates")
        if not isinstance(cands, list) or not all(isinstance(c, str) for c in cands):
            raise TransportError("response lacks a 'candidates' string list")
        return cands[:m]


class SubprocessOracle:
    """Victim oracle speaking the ``score`` message."""

    concurrency_safe = False

    def __init__(self, transport: SubprocessTransport, num_labels: int | None = None):
        self.transport = transport
        self.num_labels = num_labels

    def __call__(self, tokens) -> np.ndarray:
        reply = self.transport.request({"kind": "score", "tokens": list(tokens)})
        scores = reply.get("scores")
        if not isinstance(scores, list):
            raise TransportError("response lacks a 'scores' list")
        try:
            out = np.asarray(scores, dtype=np.float64)
        except (TypeError, ValueError):
            raise TransportError("scores must be numbers") from None
        if out.ndim != 1 or not np.all(np.isfinite(out)):
            raise TransportError("scores must be a flat list of finite numbers")
        if self.num_labels is None:
            self.num_labels = len(out)
        elif len(out) != self.num_labels:
            raise TransportError(f"expected {self.num_labels} scores, got {len(out)}")
        return out


def serve(handler, stdin, stdout):
    """Run a provider/oracle loop: ``handler(request) -> reply`` per line.

    ``python -m advxmtc.serve`` uses this to expose the built-in provider
    and saved models.
    """
    for line in stdin:
        if not line.strip():
            continue
        try:
            reply = handler(json.loads(line))
        except Exception as exc:
            reply = {"error": f"{type(exc).__name__}: {exc}"}
        stdout.write(json.dumps(reply) + "\n")
        stdout.flush()
