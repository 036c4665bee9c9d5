"""Classifiers living in another process, spoken to over newline-delimited JSON.

Requests and replies, one JSON object per line::

    -> {"op": "info"}                     <- {"classes": K, "input_shape": [...]}
    -> {"op": "predict", "id": n,         <- {"id": n, "probs": [[...], ...]}
        "shape": [B, ...], "data": [...]}
                                          <- {"id": n, "error": "message"}

``data`` is the row-major float32 batch; ``shape[0]`` is the batch size.
:func:`serve` is the matching server loop, usable to expose any in-process
:class:`Classifier`.
"""

from __future__ import annotations

import json
import queue
import shlex
import subprocess
import sys
import threading
from typing import IO

import numpy as np

from .base import Classifier, ClassifierError


class ProtocolError(ClassifierError):
    """The peer sent something that is not a valid reply."""


class ClassifierTimeout(ClassifierError):
    pass


class ClassifierExited(ClassifierError):
    pass


class RemoteError(ClassifierError):
    """The peer answered a request with an error message."""


_EOF = object()


class ExternalClassifier(Classifier):
    """Handle for a model served by a subprocess.

    Access is serialised with a lock so the handle can be shared between
    engine workers; every request carries a fresh id which the reply must echo.
    """

    hidden_taps = False
    differentiable = False

    def __init__(self, command, timeout: float = 60.0, training_size: int | None = None, env=None):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self.training_size = training_size
        self._lock = threading.Lock()
        self._next_id = 0
        try:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                stderr=None, text=True, bufsize=1, env=env,
            )
        except OSError as exc:
            raise ClassifierExited(f"cannot start {self.command!r}: {exc}") from exc
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()
        info = self._request({"op": "info"})
        try:
            self.num_classes = int(info["classes"])
            self.input_shape = tuple(int(s) for s in info["input_shape"])
        except (KeyError, TypeError, ValueError) as exc:
            self.close()
            raise ProtocolError(f"bad info reply {info!r}") from exc
        if self.num_classes < 2:
            self.close()
            raise ProtocolError(f"peer reports {self.num_classes} classes")

    def _pump(self):
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(_EOF)

    def _request(self, message: dict) -> dict:
        if self._proc.poll() is not None:
            raise ClassifierExited(f"model process exited with code {self._proc.returncode}")
        try:
            self._proc.stdin.write(json.dumps(message) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise ClassifierExited(f"model process closed its input: {exc}") from exc
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            raise ClassifierTimeout(f"no reply within {self.timeout}s to {message.get('op')}") from None
        if line is _EOF:
            self._proc.wait(timeout=self.timeout)
            raise ClassifierExited(f"model process exited with code {self._proc.returncode}")
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"malformed reply line {line[:80]!r}") from exc
        if not isinstance(reply, dict):
            raise ProtocolError(f"reply is not an object: {line[:80]!r}")
        return reply

    def predict_proba(self, batch) -> np.ndarray:
        batch = self.check_batch(batch)
        data = batch.astype(np.float32)
        with self._lock:
            self._next_id += 1
            rid = self._next_id
            reply = self._request({
                "op": "predict", "id": rid, "shape": list(data.shape),
                "data": data.ravel().tolist(),
            })
        if reply.get("id") != rid:
            raise ProtocolError(f"reply id {reply.get('id')!r} does not match request {rid}")
        if "error" in reply:
            raise RemoteError(str(reply["error"]))
        try:
            probs = np.asarray(reply["probs"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError("reply has no usable probs") from exc
        if probs.ndim == 1 and len(batch) == 1:
            probs = probs[None]
        if probs.shape != (len(batch), self.num_classes):
            raise ProtocolError(f"probs of shape {probs.shape}, expected {(len(batch), self.num_classes)}")
        if not np.all(np.isfinite(probs)) or probs.min() < 0 or np.abs(probs.sum(axis=1) - 1).max() > 1e-4:
            raise ProtocolError("probs are not probability vectors")
        return probs

    def fingerprint(self) -> str:
        return "exec:" + " ".join(self.command)

    def close(self):
        proc = getattr(self, "_proc", None)
        if proc is None or proc.poll() is not None:
            return
        try:
            proc.stdin.close()
            proc.wait(timeout=5)
        except (OSError, subprocess.TimeoutExpired):
            proc.kill()
            proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def external_classifier(command, **kwargs) -> ExternalClassifier:
    return ExternalClassifier(command, **kwargs)


def handle_request(model: Classifier, message: dict) -> dict:
    op = message.get("op")
    if op == "info":
        return {"classes": int(model.num_classes), "input_shape": list(model.input_shape)}
    rid = message.get("id")
    if op != "predict":
        return {"id": rid, "error": f"unknown op {op!r}"}
    try:
        shape = [int(s) for s in message["shape"]]
        data = np.asarray(message["data"], dtype=np.float32).astype(np.float64).reshape(shape)
        probs = model.predict_proba(data)
    except Exception as exc:  # report, keep serving
        return {"id": rid, "error": f"{type(exc).__name__}: {exc}"}
    return {"id": rid, "probs": probs.tolist()}


def serve(model: Classifier, infile: IO[str] | None = None, outfile: IO[str] | None = None) -> None:
    """Answer protocol requests from ``infile`` until it closes."""
    infile = sys.stdin if infile is None else infile
    outfile = sys.stdout if outfile is None else outfile
    for line in infile:
        line = line.strip()
        if not line:
            continue
        try:
            message = json.loads(line)
            if not isinstance(message, dict):
                raise ValueError("request is not an object")
        except ValueError as exc:
            reply = {"id": None, "error": f"bad request: {exc}"}
        else:
            reply = handle_request(model, message)
        outfile.write(json.dumps(reply) + "\n")
        outfile.flush()
