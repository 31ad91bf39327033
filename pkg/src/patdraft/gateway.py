"""Model access with deterministic record/replay.

Every stage talks to a model through :class:`Gateway`. In ``replay`` mode
completions come from a :class:`ReplayStore` keyed by :func:`canonical_hash`,
so pipeline runs are reproducible offline.

Hash canonicalization (stable across processes and platforms):

1. Text fields have CRLF and lone CR normalized to LF.
2. The request becomes a JSON object with keys ``few_shot``, ``system_text``,
   ``tag``, ``temperature``, ``top_k``, ``user_text`` (sorted), ``few_shot``
   as a list of ``[input, output]`` pairs in their given order.
3. Serialized with ``sort_keys=True``, separators ``(",", ":")``, non-ASCII
   kept literal, encoded as UTF-8.
4. SHA-256 hex digest of those bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

log = logging.getLogger(__name__)

TAGS = ("induction", "graph", "merge", "plan", "generate", "judge")
MODES = ("live", "record", "replay")

DEFAULT_TEMPERATURE = 0.2
DEFAULT_TOP_K = 10

ENV_ENDPOINT = "PATDRAFT_ENDPOINT"
ENV_API_KEY = "PATDRAFT_API_KEY"
ENV_MODEL = "PATDRAFT_MODEL"


class GatewayError(RuntimeError):
    """A model call could not be completed."""

    def __init__(self, message: str, *, tag: str | None = None):
        super().__init__(message)
        self.tag = tag


class ReplayMiss(GatewayError):
    def __init__(self, request_hash: str, tag: str):
        super().__init__(f"replay miss for {tag} request {request_hash}", tag=tag)
        self.request_hash = request_hash


class TransportError(GatewayError):
    """Retriable failure talking to a live backend."""


def _lf(text: str) -> str:
    return text.replace("\r\n", "\n").replace("\r", "\n")


@dataclass(frozen=True)
class PromptRequest:
    system_text: str
    user_text: str
    few_shot: tuple[tuple[str, str], ...] = ()
    temperature: float = DEFAULT_TEMPERATURE
    top_k: int = DEFAULT_TOP_K
    tag: str = "generate"

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 1.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 1]")
        if self.top_k < 1:
            raise ValueError(f"top_k must be positive, got {self.top_k}")
        if self.tag not in TAGS:
            raise ValueError(f"unknown tag {self.tag!r}")
        object.__setattr__(self, "few_shot", tuple((str(a), str(b)) for a, b in self.few_shot))

    def canonical_bytes(self) -> bytes:
        payload = {
            "few_shot": [[_lf(a), _lf(b)] for a, b in self.few_shot],
            "system_text": _lf(self.system_text),
            "tag": self.tag,
            "temperature": float(self.temperature),
            "top_k": int(self.top_k),
            "user_text": _lf(self.user_text),
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def canonical_hash(request: PromptRequest) -> str:
    return hashlib.sha256(request.canonical_bytes()).hexdigest()


@dataclass(frozen=True)
class Completion:
    text: str
    request_hash: str
    source: str  # "live" | "replay"


class ReplayStore:
    """Directory of recorded completions: ``<root>/<tag>/<hash>.txt`` plus ``manifest.json``.

    Reads go straight to the file and take no lock; writes are serialized.
    """

    def __init__(self, root: str | os.PathLike[str]):
        self.root = Path(root)
        self._lock = threading.Lock()

    def path_for(self, tag: str, request_hash: str) -> Path:
        return self.root / tag / f"{request_hash}.txt"

    def get(self, tag: str, request_hash: str) -> str | None:
        path = self.path_for(tag, request_hash)
        try:
            with open(path, encoding="utf-8", newline="") as fh:
                return fh.read()
        except FileNotFoundError:
            return None

    def put(self, tag: str, request_hash: str, text: str) -> None:
        with self._lock:
            path = self.path_for(tag, request_hash)
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            manifest = self._read_manifest()
            manifest[request_hash] = {"tag": tag, "path": f"{tag}/{request_hash}.txt"}
            self._write_manifest(manifest)

    def _read_manifest(self) -> dict[str, dict[str, str]]:
        path = self.root / "manifest.json"
        if not path.exists():
            return {}
        return json.loads(path.read_text(encoding="utf-8"))

    def _write_manifest(self, manifest: dict[str, dict[str, str]]) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        text = json.dumps(dict(sorted(manifest.items())), indent=2, sort_keys=True) + "\n"
        (self.root / "manifest.json").write_text(text, encoding="utf-8")

    def manifest(self) -> dict[str, dict[str, str]]:
        return self._read_manifest()


Backend = Callable[[PromptRequest], str]


class HttpBackend:
    """OpenAI-compatible chat-completions client built on urllib."""

    def __init__(self, endpoint: str, model: str, api_key: str | None = None, timeout: float = 120.0):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.timeout = timeout

    @classmethod
    def from_env(cls) -> "HttpBackend":
        endpoint = os.environ.get(ENV_ENDPOINT)
        model = os.environ.get(ENV_MODEL)
        if not endpoint or not model:
            raise GatewayError(f"live mode needs {ENV_ENDPOINT} and {ENV_MODEL} set")
        return cls(endpoint, model, os.environ.get(ENV_API_KEY))

    def __call__(self, request: PromptRequest) -> str:
        messages = [{"role": "system", "content": request.system_text}]
        for shot_in, shot_out in request.few_shot:
            messages.append({"role": "user", "content": shot_in})
            messages.append({"role": "assistant", "content": shot_out})
        messages.append({"role": "user", "content": request.user_text})
        body = json.dumps(
            {
                "model": self.model,
                "messages": messages,
                "temperature": request.temperature,
                "top_k": request.top_k,
            }
        ).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            if exc.code == 429 or exc.code >= 500:
                raise TransportError(f"{request.tag}: HTTP {exc.code}", tag=request.tag) from exc
            raise GatewayError(f"{request.tag}: HTTP {exc.code}", tag=request.tag) from exc
        except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
            raise TransportError(f"{request.tag}: transport failure: {exc}", tag=request.tag) from exc
        try:
            return payload["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"{request.tag}: unexpected response shape", tag=request.tag) from exc


@dataclass
class CallRecord:
    tag: str
    request_hash: str
    source: str


@dataclass
class Gateway:
    """Single entry point for model calls.

    ``mode`` is ``live`` (backend only), ``record`` (backend, then persist to
    ``store``) or ``replay`` (``store`` only). Per-tag decoding overrides are
    given as ``{"generate": {"temperature": 0.1}}``.
    """

    backend: Backend | None = None
    store: ReplayStore | None = None
    mode: str = "replay"
    temperature: float = DEFAULT_TEMPERATURE
    top_k: int = DEFAULT_TOP_K
    overrides: dict[str, dict[str, float]] = field(default_factory=dict)
    max_retries: int = 3
    backoff: float = 0.5
    sleep: Callable[[float], None] = time.sleep
    calls: list[CallRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown gateway mode {self.mode!r}")
        if self.mode in ("record", "replay") and self.store is None:
            raise ValueError(f"{self.mode} mode requires a replay store")
        if self.mode in ("live", "record") and self.backend is None:
            raise ValueError(f"{self.mode} mode requires a backend")
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")
        self._lock = threading.Lock()

    def request(
        self,
        tag: str,
        system_text: str,
        user_text: str,
        few_shot: Iterable[tuple[str, str]] = (),
    ) -> PromptRequest:
        """Build a request carrying this gateway's decoding settings for ``tag``."""
        override = self.overrides.get(tag, {})
        return PromptRequest(
            system_text=system_text,
            user_text=user_text,
            few_shot=tuple(few_shot),
            temperature=float(override.get("temperature", self.temperature)),
            top_k=int(override.get("top_k", self.top_k)),
            tag=tag,
        )

    def complete(self, request: PromptRequest) -> Completion:
        digest = canonical_hash(request)
        if self.mode == "replay":
            assert self.store is not None
            text = self.store.get(request.tag, digest)
            if text is None:
                raise ReplayMiss(digest, request.tag)
            self._log(request.tag, digest, "replay")
            return Completion(text, digest, "replay")

        text = self._call_live(request)
        if self.mode == "record":
            assert self.store is not None
            self.store.put(request.tag, digest, text)
        self._log(request.tag, digest, "live")
        return Completion(text, digest, "live")

    def _call_live(self, request: PromptRequest) -> str:
        assert self.backend is not None
        last: Exception | None = None
        for attempt in range(1, self.max_retries + 1):
            try:
                return self.backend(request)
            except TransportError as exc:
                last = exc
                log.warning("%s call failed (attempt %d/%d): %s", request.tag, attempt, self.max_retries, exc)
                if attempt < self.max_retries:
                    self.sleep(self.backoff * 2 ** (attempt - 1))
        raise GatewayError(
            f"{request.tag} call failed after {self.max_retries} attempts: {last}", tag=request.tag
        )

    def _log(self, tag: str, digest: str, source: str) -> None:
        with self._lock:
            self.calls.append(CallRecord(tag, digest, source))

    def call_counts(self) -> dict[str, int]:
        return dict(sorted(Counter(c.tag for c in self.calls).items()))

    def calls_for(self, tag: str) -> list[CallRecord]:
        return [c for c in self.calls if c.tag == tag]
