"""A small certificate log: accepts GeoCerts and revocations, issues SCTs and STHs."""

from __future__ import annotations

import enum
import logging
import os
import threading
from dataclasses import dataclass
from typing import Callable, Mapping, Protocol

from .cert import CertificateError, GeoCert, RevocationRecord, precert_hash
from .crypto import Signer, now_us
from .ctlog import SCT, STH, MerkleLog
from .wire import Reader, Writer

log = logging.getLogger(__name__)

DEFAULT_MMD_US = 3600 * 1_000_000


class EntryType(enum.IntEnum):
    CERT = 0
    REVOCATION = 1
    PRECERT = 2


@dataclass(frozen=True)
class LogEntry:
    kind: EntryType
    payload: bytes

    def encode(self) -> bytes:
        return bytes((int(self.kind),)) + self.payload

    @classmethod
    def decode(cls, data: bytes) -> LogEntry:
        if not data:
            raise ValueError("empty log entry")
        return cls(EntryType(data[0]), bytes(data[1:]))


class SubmissionError(ValueError):
    pass


class LogSource(Protocol):
    """What a map server needs from a log, in-process or remote."""

    log_id: str

    def get_sth(self) -> STH: ...

    def get_entries(self, start: int, end: int) -> list[bytes]: ...

    def get_consistency(self, size_a: int, size_b: int) -> list[bytes]: ...


class LogStub:
    """Append-only certificate log.

    ``issuers`` maps CA identifiers to their public keys; submissions from
    other issuers are refused, like a CT log restricting accepted roots.
    Entries are written before the SCT is returned, so every SCT is honoured
    by the next STH, well inside the merge delay.
    """

    def __init__(self, log_id: str, signer: Signer, issuers: Mapping[str, bytes],
                 mmd_us: int = DEFAULT_MMD_US, clock: Callable[[], int] = now_us,
                 path: str | os.PathLike | None = None) -> None:
        self.log_id = log_id
        self.signer = signer
        self.issuers = dict(issuers)
        self.mmd_us = mmd_us
        self.clock = clock
        self.tree = MerkleLog()
        self._lock = threading.Lock()
        self._path = path
        self._file = None
        if path is not None:
            self._load(path)
            self._file = open(path, "ab")

    @property
    def public_key(self) -> bytes:
        return self.signer.public_key

    def _load(self, path) -> None:
        if not os.path.exists(path):
            return
        with open(path, "rb") as fh:
            data = fh.read()
        r = Reader(data)
        while r.remaining:
            self.tree.append(r.blob())
        log.info("log %s: restored %d entries", self.log_id, self.tree.size)

    def _append(self, entry: LogEntry) -> int:
        raw = entry.encode()
        with self._lock:
            if self._file is not None:
                self._file.write(Writer().blob(raw).getvalue())
                self._file.flush()
                os.fsync(self._file.fileno())
            return self.tree.append(raw)

    def _check_cert(self, cert: GeoCert) -> None:
        key = self.issuers.get(cert.issuer_id)
        if key is None:
            raise SubmissionError(f"unknown issuer {cert.issuer_id!r}")
        if not cert.verify_signature(key):
            raise SubmissionError("certificate signature does not verify")

    def submit(self, cert: GeoCert | bytes, precert: bool = False) -> SCT:
        if isinstance(cert, (bytes, bytearray)):
            try:
                cert = GeoCert.decode(bytes(cert))
            except CertificateError as exc:
                raise SubmissionError(str(exc)) from exc
        self._check_cert(cert)
        kind = EntryType.PRECERT if precert else EntryType.CERT
        self._append(LogEntry(kind, cert.encode()))
        return SCT(self.log_id, self.clock(), precert_hash(cert)).sign(self.signer)

    def submit_revocation(self, rec: RevocationRecord) -> int:
        key = self.issuers.get(rec.issuer_id)
        if key is None or not rec.verify(key):
            raise SubmissionError("revocation signature does not verify")
        return self._append(LogEntry(EntryType.REVOCATION, rec.encode()))

    def get_sth(self) -> STH:
        size = self.tree.size
        return STH(self.log_id, self.clock(), size, self.tree.root(size)).sign(self.signer)

    def get_entries(self, start: int, end: int) -> list[bytes]:
        end = min(end, self.tree.size)
        if not 0 <= start <= end:
            raise IndexError(f"bad entry range [{start}, {end})")
        return self.tree.leaves(start, end)

    def get_inclusion(self, index: int, size: int) -> list[bytes]:
        return self.tree.inclusion_proof(index, size)

    def get_consistency(self, size_a: int, size_b: int) -> list[bytes]:
        return self.tree.consistency_proof(size_a, size_b)

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None
