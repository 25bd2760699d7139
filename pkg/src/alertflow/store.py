"""Persistent storage: size-capped document store, blob object store, and
the claim-check wrapper that keeps oversized payloads off the broker.

The document store caps each document at 1 MiB of canonical serialization
(minified, key-sorted JSON, UTF-8) and assigns gapless per-key revisions.
The object store accepts blobs of any size and returns a content digest.
Both can be filesystem-backed so state survives a process restart.
"""

from __future__ import annotations

import base64
import bisect
import hashlib
import json
import threading
import time
import urllib.parse
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .broker import MAX_MESSAGE_BYTES
from .errors import DigestMismatch, DocTooLarge, NotFound, StorageFailure

DEFAULT_CLAIM_THRESHOLD = 900_000  # headroom under the 1 MiB message cap


def canonical_bytes(body: Any) -> bytes:
    """Canonical serialization used for the document size check."""
    return json.dumps(body, separators=(",", ":"), sort_keys=True, ensure_ascii=False).encode(
        "utf-8"
    )


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class Document:
    key: str
    revision: int
    body: Any
    created_at: float


@dataclass(frozen=True)
class QueryResult:
    documents: list[Document]
    continuation: str | None


class DocumentStore:
    """JSON document store with a 1 MiB per-document cap and revisions."""

    def __init__(
        self,
        data_dir: str | Path | None = None,
        max_doc_bytes: int = MAX_MESSAGE_BYTES,
        now: Callable[[], float] = time.time,
    ):
        self.max_doc_bytes = max_doc_bytes
        self._now = now
        self._docs: dict[str, Document] = {}
        self._keys: list[str] = []
        self._lock = threading.RLock()
        self._file = None
        if data_dir is not None:
            self._open(Path(data_dir))

    def doc_put(self, key: str, body: Any, created_at: float | None = None) -> int:
        """Store body under key; returns the new revision (1 for a new key).

        Raises DocTooLarge without touching prior state when the canonical
        serialization exceeds the cap.
        """
        if not key:
            raise ValueError("document key must be non-empty")
        data = canonical_bytes(body)
        if len(data) > self.max_doc_bytes:
            raise DocTooLarge(
                f"document {key!r} serializes to {len(data)} bytes "
                f"(cap {self.max_doc_bytes})"
            )
        with self._lock:
            prev = self._docs.get(key)
            rev = 1 if prev is None else prev.revision + 1
            ts = created_at if created_at is not None else (
                prev.created_at if prev is not None else self._now()
            )
            doc = Document(key=key, revision=rev, body=body, created_at=ts)
            if prev is None:
                bisect.insort(self._keys, key)
            self._docs[key] = doc
            self._persist(doc, data)
            return rev

    def doc_get(self, key: str) -> Any:
        with self._lock:
            doc = self._docs.get(key)
            if doc is None:
                raise NotFound(f"no document under key {key!r}")
            return doc.body

    def doc_get_document(self, key: str) -> Document:
        with self._lock:
            doc = self._docs.get(key)
            if doc is None:
                raise NotFound(f"no document under key {key!r}")
            return doc

    def doc_exists(self, key: str) -> bool:
        with self._lock:
            return key in self._docs

    def doc_query(
        self,
        key_prefix: str,
        time_window: tuple[float, float],
        limit: int,
        continuation: str | None = None,
    ) -> QueryResult:
        """Documents under key_prefix with created_at in [start, end].

        Results are sorted by (created_at, key) ascending. When more than
        `limit` documents match, a continuation token is returned; passing it
        back resumes the enumeration, yielding each match exactly once.
        """
        if limit < 1:
            raise ValueError("limit must be >= 1")
        start, end = time_window
        after: tuple[float, str] | None = None
        if continuation is not None:
            raw = json.loads(base64.urlsafe_b64decode(continuation.encode("ascii")))
            after = (float(raw[0]), str(raw[1]))
        with self._lock:
            lo = bisect.bisect_left(self._keys, key_prefix)
            matches: list[tuple[float, str]] = []
            for i in range(lo, len(self._keys)):
                key = self._keys[i]
                if not key.startswith(key_prefix):
                    break
                doc = self._docs[key]
                if start <= doc.created_at <= end:
                    sort_key = (doc.created_at, key)
                    if after is None or sort_key > after:
                        matches.append(sort_key)
            matches.sort()
            page = matches[:limit]
            docs = [self._docs[k] for _, k in page]
            token = None
            if len(matches) > limit:
                last = page[-1]
                token = base64.urlsafe_b64encode(
                    json.dumps([last[0], last[1]]).encode("utf-8")
                ).decode("ascii")
            return QueryResult(documents=docs, continuation=token)

    def doc_count(self) -> int:
        with self._lock:
            return len(self._docs)

    # -- persistence ----------------------------------------------------------

    def _open(self, data_dir: Path) -> None:
        try:
            data_dir.mkdir(parents=True, exist_ok=True)
            path = data_dir / "documents.jsonl"
            if path.is_file():
                with path.open(encoding="utf-8") as f:
                    for line in f:
                        line = line.strip()
                        if not line:
                            continue
                        rec = json.loads(line)
                        doc = Document(
                            key=rec["k"],
                            revision=rec["r"],
                            body=rec["b"],
                            created_at=rec["c"],
                        )
                        if rec["k"] not in self._docs:
                            bisect.insort(self._keys, rec["k"])
                        self._docs[rec["k"]] = doc
            self._file = path.open("a", encoding="utf-8")
        except OSError as e:
            raise StorageFailure(f"cannot open document store in {data_dir}: {e}") from e

    def _persist(self, doc: Document, canonical: bytes) -> None:
        if self._file is None:
            return
        rec = {"k": doc.key, "r": doc.revision, "c": doc.created_at, "b": doc.body}
        try:
            self._file.write(json.dumps(rec, separators=(",", ":"), ensure_ascii=False) + "\n")
            self._file.flush()
        except OSError as e:
            raise StorageFailure(f"cannot persist document {doc.key!r}: {e}") from e

    def close(self) -> None:
        with self._lock:
            if self._file is not None:
                self._file.close()
                self._file = None


class ObjectStore:
    """Unbounded blob store; get-after-put is bit-exact."""

    def __init__(self, data_dir: str | Path | None = None):
        self._blobs: dict[str, bytes] = {}
        self._digests: dict[str, str] = {}
        self._lock = threading.RLock()
        self._dir: Path | None = None
        if data_dir is not None:
            self._open(Path(data_dir))

    def obj_put(self, key: str, data: bytes) -> str:
        """Store bytes under key, replacing prior content. Returns the digest."""
        if not key:
            raise ValueError("object key must be non-empty")
        digest = sha256_hex(data)
        with self._lock:
            self._blobs[key] = bytes(data)
            self._digests[key] = digest
            if self._dir is not None:
                path = self._path(key)
                try:
                    tmp = path.with_suffix(path.suffix + ".tmp")
                    tmp.write_bytes(data)
                    tmp.replace(path)
                except OSError as e:
                    raise StorageFailure(f"cannot write object {key!r}: {e}") from e
        return digest

    def obj_get(self, key: str) -> bytes:
        with self._lock:
            data = self._blobs.get(key)
            if data is None:
                raise NotFound(f"no object under key {key!r}")
            return data

    def obj_digest(self, key: str) -> str:
        with self._lock:
            digest = self._digests.get(key)
            if digest is None:
                raise NotFound(f"no object under key {key!r}")
            return digest

    def obj_exists(self, key: str) -> bool:
        with self._lock:
            return key in self._blobs

    def obj_delete(self, key: str) -> None:
        with self._lock:
            if key not in self._blobs:
                raise NotFound(f"no object under key {key!r}")
            del self._blobs[key]
            del self._digests[key]
            if self._dir is not None:
                try:
                    self._path(key).unlink(missing_ok=True)
                except OSError as e:
                    raise StorageFailure(f"cannot delete object {key!r}: {e}") from e

    def obj_keys(self) -> list[str]:
        with self._lock:
            return sorted(self._blobs)

    def _path(self, key: str) -> Path:
        return self._dir / urllib.parse.quote(key, safe="")

    def _open(self, data_dir: Path) -> None:
        self._dir = data_dir / "objects"
        try:
            self._dir.mkdir(parents=True, exist_ok=True)
            for path in self._dir.iterdir():
                if path.suffix == ".tmp" or not path.is_file():
                    continue
                key = urllib.parse.unquote(path.name)
                data = path.read_bytes()
                self._blobs[key] = data
                self._digests[key] = sha256_hex(data)
        except OSError as e:
            raise StorageFailure(f"cannot open object store in {data_dir}: {e}") from e


@dataclass(frozen=True)
class ClaimTicket:
    """Reference to an object-store payload carried in place of the bytes."""

    object_key: str
    digest: str
    size: int

    def to_json(self) -> dict[str, Any]:
        return {"object_key": self.object_key, "digest": self.digest, "size": self.size}

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "ClaimTicket":
        return cls(object_key=obj["object_key"], digest=obj["digest"], size=int(obj["size"]))


class ClaimCheck:
    """Replaces payloads above a threshold with object-store tickets."""

    def __init__(
        self,
        objects: ObjectStore,
        threshold: int = DEFAULT_CLAIM_THRESHOLD,
        key_prefix: str = "claim/",
    ):
        if threshold > MAX_MESSAGE_BYTES:
            raise ValueError(
                f"claim-check threshold {threshold} exceeds the message cap {MAX_MESSAGE_BYTES}"
            )
        self.objects = objects
        self.threshold = threshold
        self.key_prefix = key_prefix

    def wrap(self, payload: bytes, key_hint: str | None = None) -> bytes | ClaimTicket:
        """Return the payload inline when it fits (boundary inclusive),
        otherwise store it and return a ticket.

        A key_hint makes the stored key stable so redelivered work rewrites
        the same object instead of leaking fresh ones.
        """
        if len(payload) <= self.threshold:
            return payload
        return self.store(payload, key_hint=key_hint)

    def store(self, payload: bytes, key_hint: str | None = None) -> ClaimTicket:
        """Check a payload in unconditionally, regardless of size."""
        key = f"{self.key_prefix}{key_hint if key_hint else uuid.uuid4().hex}"
        digest = self.objects.obj_put(key, payload)
        return ClaimTicket(object_key=key, digest=digest, size=len(payload))

    def resolve(self, wrapped: bytes | ClaimTicket) -> bytes:
        """Original payload bytes; ticket digests are verified."""
        if isinstance(wrapped, (bytes, bytearray)):
            return bytes(wrapped)
        data = self.objects.obj_get(wrapped.object_key)
        if len(data) != wrapped.size or sha256_hex(data) != wrapped.digest:
            raise DigestMismatch(
                f"object {wrapped.object_key!r} does not match its claim ticket"
            )
        return data
