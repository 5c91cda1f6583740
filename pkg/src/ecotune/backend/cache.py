from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from pathlib import Path

from .base import CompletionRequest, ResponseSet

logger = logging.getLogger(__name__)


def request_key(request: CompletionRequest, backend: str) -> str:
    canonical = json.dumps(
        {"backend": backend, "request": request.to_dict()},
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class ResponseCache:
    """Content-addressed response files: ``<root>/<key[:2]>/<key>.json``."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def lookup(self, key: str) -> ResponseSet | None:
        path = self._path(key)
        try:
            raw = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            return None
        try:
            return ResponseSet.from_dict(json.loads(raw))
        except (ValueError, KeyError, TypeError):
            logger.warning("evicting corrupt cache entry %s", path)
            path.unlink(missing_ok=True)
            return None

    def store(self, key: str, responses: ResponseSet) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(responses.to_dict(), fh)
        os.replace(tmp, path)


class CachedBackend:
    """Serve repeated requests from a ``ResponseCache``; usage is still reported as recorded."""

    def __init__(self, backend, cache: ResponseCache):
        self.backend = backend
        self.cache = cache
        self.name = backend.name
        self.identity = getattr(backend, "identity", backend.name)
        self.hits = 0
        self.misses = 0

    def complete(self, request: CompletionRequest) -> ResponseSet:
        key = request_key(request, self.identity)
        found = self.cache.lookup(key)
        if found is not None:
            self.hits += 1
            return found
        self.misses += 1
        responses = self.backend.complete(request)
        self.cache.store(key, responses)
        return responses
