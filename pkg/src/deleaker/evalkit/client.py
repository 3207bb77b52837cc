"""VLM clients behind one narrow interface, plus a thread-safe response cache."""
from __future__ import annotations

import base64
import json
import os
import threading
import time
import urllib.error
import urllib.request
from pathlib import Path
from typing import Callable, Optional, Protocol

from .prompts import Request


class ClientError(RuntimeError):
    pass


class VLMClient(Protocol):
    """``complete`` must be safe to call from several threads at once."""

    def complete(self, request: Request) -> str: ...


class MockClient:
    """Deterministic scripted client.

    Without a ``script`` it answers from the handle ``quality`` table: step
    texts are canned, and the ranking compares the two images' qualities
    (difference >= 2 is a major preference, >= 1 minor, else a tie). The answer
    therefore depends only on what is shown, not on which side it is shown.

    ``script(request) -> str`` replaces the built-in behaviour entirely;
    ``fail_stages`` makes matching stages raise :class:`ClientError`.
    """

    def __init__(self, quality: Optional[dict] = None,
                 script: Optional[Callable[[Request], str]] = None,
                 fail_stages: tuple[str, ...] = ()):
        self.quality = dict(quality or {})
        self.script = script
        self.fail_stages = tuple(fail_stages)
        self.calls = 0
        self.stage_calls: dict[str, int] = {}
        self._lock = threading.Lock()

    def _key(self, handle) -> str:
        return handle.decode("utf-8", "replace") if isinstance(handle, bytes) else str(handle)

    def complete(self, request: Request) -> str:
        with self._lock:
            self.calls += 1
            self.stage_calls[request.stage] = self.stage_calls.get(request.stage, 0) + 1
        if any(request.stage.startswith(s) for s in self.fail_stages):
            raise ClientError(f"scripted failure at {request.stage}")
        if self.script is not None:
            return self.script(request)
        return self._default(request)

    def _default(self, request: Request) -> str:
        stage = request.stage
        if stage == "step1.1":
            return "coat pattern, mane, ear shape"
        if stage == "step1.2":
            return "stripes versus solid coat; shorter mane"
        if stage == "step1.3":
            return "- **Coat:** striped vs solid"
        if stage.startswith("step2"):
            q = self.quality.get(self._key(request.images()[0]), 0.0)
            return f"typicality score {q:g}"
        if stage == "step3":
            first, second = (self.quality.get(self._key(h), 0.0) for h in request.images())
            d = second - first
            if abs(d) >= 2:
                tok = "2maj" if d > 0 else "1maj"
            elif abs(d) >= 1:
                tok = "2min" if d > 0 else "1min"
            else:
                tok = "3"
            return f"Both images were inspected step by step. Rank: {tok}"
        if stage == "leak_check":
            return "no"
        raise ClientError(f"mock has no answer for stage {stage!r}")


class HttpClient:
    """JSON-over-HTTP client with exponential backoff.

    POSTs ``{"model", "system", "parts": [{"type": "text"|"image", ...}]}`` to
    ``endpoint`` and reads ``{"text": ...}`` back. Images are sent as base64 of
    the handle bytes, or of the file at a path handle. The bearer token comes
    from the environment variable ``api_key_env``.
    """

    def __init__(self, endpoint: str, model: str = "", api_key_env: str = "DELEAKER_VLM_API_KEY",
                 attempts: int = 3, backoff: float = 1.0, timeout: float = 60.0,
                 sleep: Callable[[float], None] = time.sleep,
                 opener: Optional[Callable] = None):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.attempts = attempts
        self.backoff = backoff
        self.timeout = timeout
        self.sleep = sleep
        self.opener = opener or urllib.request.urlopen

    @staticmethod
    def _image(handle) -> str:
        data = handle if isinstance(handle, bytes) else Path(handle).read_bytes()
        return base64.b64encode(data).decode("ascii")

    def payload(self, request: Request) -> bytes:
        parts = [{"type": "text", "text": p} if kind == "text" else {"type": "image", "data": self._image(p)}
                 for kind, p in request.parts]
        return json.dumps({"model": self.model, "system": request.system, "parts": parts}).encode()

    def complete(self, request: Request) -> str:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = self.payload(request)
        last: Optional[Exception] = None
        for attempt in range(self.attempts):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
                with self.opener(req, timeout=self.timeout) as resp:
                    return str(json.loads(resp.read().decode("utf-8"))["text"])
            except (urllib.error.URLError, OSError, ValueError, KeyError) as e:
                last = e
        raise ClientError(f"request failed after {self.attempts} attempts: {last}")


class ResponseCache:
    """Request-digest -> response text, with atomic get-or-insert.

    Concurrent callers asking for the same digest wait for a single client
    call. With ``path`` set, entries are appended to a JSON-lines file and
    reloaded on construction.
    """

    def __init__(self, path: Optional[str | Path] = None):
        self.path = Path(path) if path else None
        self._data: dict[str, str] = {}
        self._lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}
        if self.path and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    rec = json.loads(line)
                    self._data[rec["digest"]] = rec["response"]

    def __len__(self):
        return len(self._data)

    def __contains__(self, digest: str) -> bool:
        return digest in self._data

    def get_or_insert(self, digest: str, compute: Callable[[], str]) -> str:
        with self._lock:
            if digest in self._data:
                return self._data[digest]
            klock = self._key_locks.setdefault(digest, threading.Lock())
        with klock:
            with self._lock:
                if digest in self._data:
                    return self._data[digest]
            value = compute()
            with self._lock:
                self._data[digest] = value
                if self.path:
                    with self.path.open("a", encoding="utf-8") as f:
                        f.write(json.dumps({"digest": digest, "response": value}) + "\n")
                self._key_locks.pop(digest, None)
            return value
