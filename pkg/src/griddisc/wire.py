"""XDR encoding of replication datagrams and service records.

Layout (big-endian, every item padded to a 4-byte boundary)::

    0   magic        u32 = 0x47444953 ("GDIS")
    4   version      u32 = 1
    8   op           u32 (0=UPSERT, 1=DELETE, 2=HEARTBEAT)
    12  origin_node  16 raw bytes
    28  sequence     u64
    36  payload

UPSERT carries a full record, DELETE a (service_id, stamp) pair and
HEARTBEAT nothing. The record encoding is also the payload of persistent
store log entries.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Optional, Union

from griddisc.errors import (
    BadMagic,
    DiscoveryError,
    MalformedPayload,
    PayloadTooLarge,
    TruncatedPacket,
    UnsupportedVersion,
)
from griddisc.model import Lease, ServiceRecord, VersionStamp, is_canonical_id

MAGIC = 0x47444953
VERSION = 1
MAX_DATAGRAM = 8192
HEADER_SIZE = 36

_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_HEADER = struct.Struct(">III16sQ")
_LEASE = struct.Struct(">QIQ")
_STAMP = struct.Struct(">Q16s")


class Op(enum.IntEnum):
    UPSERT = 0
    DELETE = 1
    HEARTBEAT = 2


@dataclass(frozen=True)
class DeletePayload:
    service_id: str
    stamp: VersionStamp


@dataclass(frozen=True)
class Datagram:
    op: Op
    origin_node: bytes
    sequence: int
    payload: Union[ServiceRecord, DeletePayload, None] = None

    def __post_init__(self):
        expected = {Op.UPSERT: ServiceRecord, Op.DELETE: DeletePayload, Op.HEARTBEAT: type(None)}[self.op]
        if not isinstance(self.payload, expected):
            raise TypeError(f"{self.op.name} datagram needs a {expected.__name__} payload")
        if len(self.origin_node) != 16:
            raise ValueError("origin_node must be 16 bytes")


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def u32(self, value: int):
        self.parts.append(_U32.pack(value))

    def u64(self, value: int):
        self.parts.append(_U64.pack(value))

    def string(self, text: str):
        data = text.encode("utf-8")
        self.parts.append(_U32.pack(len(data)))
        self.parts.append(data)
        pad = -len(data) % 4
        if pad:
            self.parts.append(b"\0" * pad)

    def stamp(self, stamp: VersionStamp):
        self.parts.append(_STAMP.pack(stamp.wall_micros, stamp.origin_node))

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise TruncatedPacket(f"needed {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt: struct.Struct) -> tuple:
        return fmt.unpack(self.take(fmt.size))

    def u32(self) -> int:
        return self.unpack(_U32)[0]

    def u64(self) -> int:
        return self.unpack(_U64)[0]

    def string(self) -> str:
        n = self.u32()
        data = self.take(n)
        pad = self.take(-n % 4)
        if pad.strip(b"\0"):
            raise MalformedPayload("non-zero string padding")
        try:
            return data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedPayload(f"invalid UTF-8: {exc}") from exc

    def stamp(self) -> VersionStamp:
        wall, origin = self.unpack(_STAMP)
        return VersionStamp(wall, origin)

    def at_end(self) -> bool:
        return self.pos == len(self.data)


def _write_record(w: _Writer, record: ServiceRecord):
    w.string(record.service_id)
    w.string(record.name)
    w.string(record.server_url)
    w.u32(len(record.methods))
    for method in record.methods:
        w.string(method)
    w.u32(len(record.attributes))
    for key, value in record.attributes:
        w.string(key)
        w.string(value)
    lease = record.lease
    w.parts.append(_LEASE.pack(lease.granted_at, lease.duration, lease.expires_at))
    w.stamp(record.stamp)
    w.u32(1 if record.tombstone else 0)


def _read_service_id(r: _Reader) -> str:
    service_id = r.string()
    if not is_canonical_id(service_id):
        raise MalformedPayload(f"service_id is not a canonical identifier: {service_id!r}")
    return service_id


def _read_record(r: _Reader) -> ServiceRecord:
    service_id = _read_service_id(r)
    name = r.string()
    server_url = r.string()
    methods = tuple(r.string() for _ in range(r.u32()))
    attributes = tuple((r.string(), r.string()) for _ in range(r.u32()))
    granted_at, duration, expires_at = r.unpack(_LEASE)
    stamp = r.stamp()
    flag = r.u32()
    if flag not in (0, 1):
        raise MalformedPayload(f"tombstone flag must be 0 or 1, got {flag}")
    if not name and not flag:
        raise MalformedPayload("live record with empty name")
    try:
        lease = Lease(granted_at, duration, expires_at)
        return ServiceRecord(service_id, name, server_url, methods, attributes, lease, stamp, bool(flag))
    except DiscoveryError as exc:
        raise MalformedPayload(str(exc)) from exc


def encode_record(record: ServiceRecord) -> bytes:
    w = _Writer()
    try:
        _write_record(w, record)
    except struct.error as exc:
        raise ValueError(f"record field out of range: {exc}") from exc
    return w.getvalue()


def decode_record(data: bytes) -> ServiceRecord:
    """Decode a standalone record encoding; trailing bytes are an error."""
    r = _Reader(data)
    record = _read_record(r)
    if not r.at_end():
        raise MalformedPayload(f"{len(data) - r.pos} trailing bytes after record")
    return record


def record_wire_size(record: ServiceRecord) -> int:
    """Size of the UPSERT datagram that would carry this record."""
    return HEADER_SIZE + len(encode_record(record))


def encode_datagram(d: Datagram) -> bytes:
    w = _Writer()
    try:
        w.parts.append(_HEADER.pack(MAGIC, VERSION, int(d.op), d.origin_node, d.sequence))
        if d.op is Op.UPSERT:
            _write_record(w, d.payload)
        elif d.op is Op.DELETE:
            w.string(d.payload.service_id)
            w.stamp(d.payload.stamp)
    except struct.error as exc:
        raise ValueError(f"datagram field out of range: {exc}") from exc
    data = w.getvalue()
    if len(data) > MAX_DATAGRAM:
        raise PayloadTooLarge(f"datagram is {len(data)} bytes, limit {MAX_DATAGRAM}")
    return data


def decode_datagram(data: bytes) -> Datagram:
    """Decode one datagram. Any malformed input raises a DecodeError subclass."""
    if len(data) > MAX_DATAGRAM:
        raise MalformedPayload(f"datagram is {len(data)} bytes, limit {MAX_DATAGRAM}")
    r = _Reader(bytes(data))
    if r.u32() != MAGIC:
        raise BadMagic("bad magic")
    version = r.u32()
    if version != VERSION:
        raise UnsupportedVersion(f"protocol version {version}")
    raw_op = r.u32()
    origin = r.take(16)
    sequence = r.u64()
    try:
        op = Op(raw_op)
    except ValueError:
        raise MalformedPayload(f"unknown op {raw_op}") from None
    payload: Optional[Union[ServiceRecord, DeletePayload]] = None
    if op is Op.UPSERT:
        payload = _read_record(r)
    elif op is Op.DELETE:
        payload = DeletePayload(_read_service_id(r), r.stamp())
    if not r.at_end():
        raise MalformedPayload(f"{len(data) - r.pos} trailing bytes after payload")
    return Datagram(op, origin, sequence, payload)
