"""Storage wrapper and the two repositories behind it.

``open_store`` turns a :class:`BackendDescriptor` into a :class:`Store`.
The registry only ever talks to that interface, so the memory and the
persistent repository are interchangeable.

The persistent repository is an append-only log at ``<location>/registry.log``.
Each entry is::

    u32 length | u32 CRC32C(body) | body

where ``body`` is a u32 entry kind followed by either an XDR record (PUT) or an
XDR service_id string (DELETE). An in-memory index maps service_id to the
offset of its latest PUT; reads go to the file. The log is rewritten once more
than half of its entries are garbage.
"""

from __future__ import annotations

import enum
import logging
import os
import struct
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

from crc32c import crc32c

from griddisc.errors import CapacityExceeded, CorruptStore, DecodeError, IoFailure
from griddisc.model import ServiceRecord
from griddisc.wire import _Reader, _Writer, decode_record, encode_record

logger = logging.getLogger(__name__)

LOG_NAME = "registry.log"
TMP_NAME = "registry.log.tmp"

_ENTRY_HEADER = struct.Struct(">II")
_KIND = struct.Struct(">I")
ENTRY_PUT = 0
ENTRY_DELETE = 1
# guards recovery against a garbage length word
MAX_ENTRY = 1 << 20
COMPACT_MIN_ENTRIES = 64


class BackendKind(str, enum.Enum):
    MEMORY = "memory"
    PERSISTENT = "persistent"


@dataclass(frozen=True)
class BackendDescriptor:
    kind: BackendKind = BackendKind.MEMORY
    location: Optional[str] = None
    capacity_limit: Optional[int] = None
    # fsync each entry; off by default, a flushed write already survives a process kill
    sync: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", BackendKind(self.kind))
        if self.kind is BackendKind.PERSISTENT and not self.location:
            raise ValueError("persistent backend requires a location")
        if self.capacity_limit is not None and self.capacity_limit < 0:
            raise ValueError("capacity_limit must be non-negative")


class Store(ABC):
    """Records keyed by service_id. Implementations are thread-safe."""

    @abstractmethod
    def put(self, record: ServiceRecord) -> None: ...

    @abstractmethod
    def get(self, service_id: str) -> Optional[ServiceRecord]: ...

    @abstractmethod
    def delete(self, service_id: str) -> bool: ...

    @abstractmethod
    def scan(self) -> Iterator[ServiceRecord]:
        """Every record exactly once, in service_id order, as of the call."""

    @abstractmethod
    def __len__(self) -> int: ...

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class MemoryStore(Store):
    def __init__(self, capacity_limit: Optional[int] = None):
        self.capacity_limit = capacity_limit
        self._records: dict[str, ServiceRecord] = {}
        self._lock = threading.Lock()

    def put(self, record: ServiceRecord) -> None:
        with self._lock:
            if (
                self.capacity_limit is not None
                and record.service_id not in self._records
                and len(self._records) >= self.capacity_limit
            ):
                raise CapacityExceeded(f"memory backend is full ({self.capacity_limit} records)")
            self._records[record.service_id] = record

    def get(self, service_id: str) -> Optional[ServiceRecord]:
        return self._records.get(service_id)

    def delete(self, service_id: str) -> bool:
        with self._lock:
            return self._records.pop(service_id, None) is not None

    def scan(self) -> Iterator[ServiceRecord]:
        with self._lock:
            snapshot = sorted(self._records.items())
        return (record for _, record in snapshot)

    def __len__(self) -> int:
        return len(self._records)


@dataclass(frozen=True)
class RecoveryReport:
    entries: int
    records: int
    truncated_bytes: int

    @property
    def clean(self) -> bool:
        return self.truncated_bytes == 0


def _entry(kind: int, body: bytes) -> bytes:
    payload = _KIND.pack(kind) + body
    return _ENTRY_HEADER.pack(len(payload), crc32c(payload)) + payload


def _delete_body(service_id: str) -> bytes:
    w = _Writer()
    w.string(service_id)
    return w.getvalue()


class LogStore(Store):
    """Append-only log repository with a rebuilt-on-open offset index.

    A torn or corrupt tail is cut off on open. ``recovery`` says how much
    survived; with ``strict=True`` the open fails with :class:`CorruptStore`
    instead of truncating.
    """

    def __init__(self, location: str | os.PathLike, sync: bool = False, strict: bool = False):
        self.dir = Path(location)
        self.path = self.dir / LOG_NAME
        self.sync = sync
        self._lock = threading.RLock()
        # service_id -> (offset of entry payload, payload length)
        self._index: dict[str, tuple[int, int]] = {}
        self._entries = 0
        self._end = 0
        self._fd = -1
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
            tmp = self.dir / TMP_NAME
            if tmp.exists():
                # compaction never finished; the original log is still authoritative
                tmp.unlink()
            self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
            self.recovery = self._recover(strict)
        except OSError as exc:
            self._close_fd()
            raise IoFailure(f"cannot open {self.path}: {exc}") from exc
        except CorruptStore:
            self._close_fd()
            raise

    def _recover(self, strict: bool) -> RecoveryReport:
        size = os.fstat(self._fd).st_size
        data = os.pread(self._fd, size, 0) if size else b""
        pos = 0
        while pos < len(data):
            good = self._replay_entry(data, pos)
            if good is None:
                break
            pos = good
        truncated = len(data) - pos
        report = RecoveryReport(self._entries, len(self._index), truncated)
        if truncated:
            message = (
                f"{self.path}: corrupt entry at byte {pos}, {truncated} bytes dropped, "
                f"{report.records} records recovered"
            )
            if strict:
                raise CorruptStore(message, report.records)
            logger.warning(message)
            os.ftruncate(self._fd, pos)
            os.fsync(self._fd)
        self._end = pos
        return report

    def _replay_entry(self, data: bytes, pos: int) -> Optional[int]:
        """Apply the entry at ``pos`` to the index; None when it is torn or corrupt."""
        if pos + _ENTRY_HEADER.size > len(data):
            return None
        length, checksum = _ENTRY_HEADER.unpack_from(data, pos)
        start = pos + _ENTRY_HEADER.size
        if length < _KIND.size or length > MAX_ENTRY or start + length > len(data):
            return None
        payload = data[start:start + length]
        if crc32c(payload) != checksum:
            return None
        kind = _KIND.unpack_from(payload)[0]
        try:
            if kind == ENTRY_PUT:
                record = decode_record(payload[_KIND.size:])
                self._index[record.service_id] = (start, length)
            elif kind == ENTRY_DELETE:
                r = _Reader(payload, _KIND.size)
                service_id = r.string()
                if not r.at_end():
                    return None
                self._index.pop(service_id, None)
            else:
                return None
        except DecodeError:
            return None
        self._entries += 1
        return start + length

    def _append(self, entry: bytes) -> int:
        offset = self._end
        try:
            written = os.pwrite(self._fd, entry, offset)
            if written != len(entry):
                raise OSError(f"short write ({written} of {len(entry)} bytes)")
            if self.sync:
                os.fsync(self._fd)
        except OSError as exc:
            raise IoFailure(f"write to {self.path} failed: {exc}") from exc
        self._end = offset + len(entry)
        self._entries += 1
        return offset

    def _check_open(self):
        if self._fd < 0:
            raise IoFailure(f"{self.path} is closed")

    def put(self, record: ServiceRecord) -> None:
        entry = _entry(ENTRY_PUT, encode_record(record))
        with self._lock:
            self._check_open()
            offset = self._append(entry)
            self._index[record.service_id] = (offset + _ENTRY_HEADER.size, len(entry) - _ENTRY_HEADER.size)
            self._maybe_compact()

    def _read(self, location: tuple[int, int]) -> ServiceRecord:
        offset, length = location
        try:
            payload = os.pread(self._fd, length, offset)
        except OSError as exc:
            raise IoFailure(f"read from {self.path} failed: {exc}") from exc
        if len(payload) != length:
            raise IoFailure(f"short read at {offset} in {self.path}")
        return decode_record(payload[_KIND.size:])

    def get(self, service_id: str) -> Optional[ServiceRecord]:
        with self._lock:
            self._check_open()
            location = self._index.get(service_id)
            return None if location is None else self._read(location)

    def delete(self, service_id: str) -> bool:
        with self._lock:
            self._check_open()
            if service_id not in self._index:
                return False
            self._append(_entry(ENTRY_DELETE, _delete_body(service_id)))
            del self._index[service_id]
            self._maybe_compact()
            return True

    def scan(self) -> Iterator[ServiceRecord]:
        with self._lock:
            self._check_open()
            snapshot = [self._read(self._index[sid]) for sid in sorted(self._index)]
        return iter(snapshot)

    def __len__(self) -> int:
        return len(self._index)

    @property
    def garbage_ratio(self) -> float:
        if not self._entries:
            return 0.0
        return 1.0 - len(self._index) / self._entries

    def _maybe_compact(self):
        if self._entries >= COMPACT_MIN_ENTRIES and self.garbage_ratio > 0.5:
            self.compact()

    def compact(self) -> None:
        """Rewrite the log with only live PUT entries, then swap it in atomically."""
        with self._lock:
            self._check_open()
            tmp = self.dir / TMP_NAME
            index: dict[str, tuple[int, int]] = {}
            try:
                with open(tmp, "wb") as out:
                    pos = 0
                    for sid in sorted(self._index):
                        offset, length = self._index[sid]
                        payload = os.pread(self._fd, length, offset)
                        header = _ENTRY_HEADER.pack(length, crc32c(payload))
                        out.write(header)
                        out.write(payload)
                        index[sid] = (pos + _ENTRY_HEADER.size, length)
                        pos += _ENTRY_HEADER.size + length
                    out.flush()
                    os.fsync(out.fileno())
                os.replace(tmp, self.path)
                new_fd = os.open(self.path, os.O_RDWR)
            except OSError as exc:
                raise IoFailure(f"compaction of {self.path} failed: {exc}") from exc
            os.close(self._fd)
            self._fd = new_fd
            self._index = index
            self._entries = len(index)
            self._end = pos
            logger.debug("compacted %s to %d entries", self.path, len(index))

    def _close_fd(self):
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    def close(self) -> None:
        with self._lock:
            if self._fd >= 0:
                os.fsync(self._fd)
            self._close_fd()

    def abandon(self) -> None:
        """Drop the handle without the closing fsync, as a killed process would."""
        with self._lock:
            self._close_fd()


def open_store(descriptor: BackendDescriptor) -> Store:
    if descriptor.kind is BackendKind.MEMORY:
        return MemoryStore(descriptor.capacity_limit)
    return LogStore(descriptor.location, sync=descriptor.sync)
