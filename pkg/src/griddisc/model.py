"""Domain values: service records, leases, version stamps and query filters.

All values are frozen dataclasses. A mutation of a record produces a new
record; nothing here is ever changed in place, so records may be shared
between threads freely.

Times are integer microseconds since the Unix epoch throughout.
"""

from __future__ import annotations

import time
import uuid
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Optional

from griddisc.errors import InvalidRecord, LeaseOutOfRange

MICROS = 1_000_000
MAX_LEASE_SECS = 2**31 - 1


def now_micros() -> int:
    return time.time_ns() // 1000


def canonical_id(value: str) -> str:
    """Return the canonical lowercase dashed form of a 128-bit identifier."""
    try:
        parsed = uuid.UUID(value)
    except (ValueError, AttributeError, TypeError) as exc:
        raise InvalidRecord(f"not a 128-bit identifier: {value!r}") from exc
    return str(parsed)


def is_canonical_id(value: str) -> bool:
    try:
        return canonical_id(value) == value
    except InvalidRecord:
        return False


@dataclass(frozen=True)
class Lease:
    granted_at: int
    duration: int
    expires_at: int

    def __post_init__(self):
        check_lease_secs(self.duration)
        if self.expires_at != self.granted_at + self.duration * MICROS:
            raise LeaseOutOfRange("expires_at must equal granted_at + duration")

    @classmethod
    def grant(cls, now: int, duration: int) -> "Lease":
        check_lease_secs(duration)
        return cls(now, duration, now + duration * MICROS)

    def expired(self, now: int) -> bool:
        return self.expires_at <= now


def check_lease_secs(duration: Any) -> int:
    if isinstance(duration, bool) or not isinstance(duration, int):
        raise LeaseOutOfRange(f"lease duration must be an integer, got {duration!r}")
    if not 1 <= duration <= MAX_LEASE_SECS:
        raise LeaseOutOfRange(f"lease duration {duration} outside [1, {MAX_LEASE_SECS}]")
    return duration


@dataclass(frozen=True, order=True)
class VersionStamp:
    """Orders replicated mutations: wall clock first, then origin node bytes."""

    wall_micros: int
    origin_node: bytes

    def __post_init__(self):
        if len(self.origin_node) != 16:
            raise ValueError("origin_node must be 16 bytes")

    def successor_of(self, current: Optional["VersionStamp"]) -> "VersionStamp":
        """This stamp, bumped past ``current`` when the clock has not moved on."""
        if current is None or self > current:
            return self
        return VersionStamp(current.wall_micros + 1, self.origin_node)


@dataclass(frozen=True)
class ServiceRecord:
    service_id: str
    name: str
    server_url: str
    methods: tuple[str, ...]
    # sorted by key, keys unique
    attributes: tuple[tuple[str, str], ...]
    lease: Lease
    stamp: VersionStamp
    tombstone: bool = False

    def __post_init__(self):
        keys = [k for k, _ in self.attributes]
        if len(set(keys)) != len(keys):
            raise InvalidRecord("duplicate attribute key")
        if list(self.attributes) != sorted(self.attributes):
            raise InvalidRecord("attributes must be sorted by key")
        if self.tombstone and (self.methods or self.attributes):
            raise InvalidRecord("a tombstone carries no methods or attributes")

    @property
    def attrs(self) -> dict[str, str]:
        return dict(self.attributes)

    def live(self, now: int) -> bool:
        return not self.tombstone and not self.lease.expired(now)

    def as_tombstone(self, stamp: VersionStamp) -> "ServiceRecord":
        return replace(self, methods=(), attributes=(), stamp=stamp, tombstone=True)


def normalize_attributes(attributes: Mapping[str, str] | Iterable[tuple[str, str]] | None) -> tuple[tuple[str, str], ...]:
    """Validate attribute pairs and return them sorted by key.

    A mapping or an iterable of pairs is accepted; the latter is how duplicate
    keys can reach us at all.
    """
    if attributes is None:
        return ()
    pairs = list(attributes.items()) if isinstance(attributes, Mapping) else list(attributes)
    seen = set()
    for pair in pairs:
        if not isinstance(pair, (tuple, list)) or len(pair) != 2:
            raise InvalidRecord(f"attribute must be a (key, value) pair: {pair!r}")
        key, value = pair
        if not isinstance(key, str) or not isinstance(value, str):
            raise InvalidRecord("attribute keys and values must be text")
        if not key:
            raise InvalidRecord("attribute key must be non-empty")
        if key in seen:
            raise InvalidRecord(f"duplicate attribute key {key!r}")
        seen.add(key)
    return tuple(sorted((k, v) for k, v in pairs))


@dataclass(frozen=True)
class QueryFilter:
    name_pattern: Optional[str] = None
    server_url: Optional[str] = None
    required_attrs: tuple[tuple[str, Optional[str]], ...] = field(default=())

    def matches(self, record: ServiceRecord) -> bool:
        if self.name_pattern is not None:
            if self.name_pattern.endswith("*"):
                if not record.name.startswith(self.name_pattern[:-1]):
                    return False
            elif record.name != self.name_pattern:
                return False
        if self.server_url is not None and record.server_url != self.server_url:
            return False
        if self.required_attrs:
            attrs = record.attrs
            for key, value in self.required_attrs:
                if key not in attrs:
                    return False
                if value is not None and attrs[key] != value:
                    return False
        return True


def sort_key(record: ServiceRecord) -> tuple[str, str]:
    return (record.name, record.service_id)


# JSON shape used on the RPC wire. Times are integer microseconds.


def node_text(node: bytes) -> str:
    return str(uuid.UUID(bytes=node))


def lease_to_json(lease: Lease) -> dict:
    return {"granted_at": lease.granted_at, "duration": lease.duration, "expires_at": lease.expires_at}


def lease_from_json(obj: Mapping) -> Lease:
    return Lease(int(obj["granted_at"]), int(obj["duration"]), int(obj["expires_at"]))


def record_to_json(record: ServiceRecord) -> dict:
    return {
        "service_id": record.service_id,
        "name": record.name,
        "server_url": record.server_url,
        "methods": list(record.methods),
        "attributes": dict(record.attributes),
        "lease": lease_to_json(record.lease),
        "stamp": {"wall_micros": record.stamp.wall_micros, "origin_node": node_text(record.stamp.origin_node)},
        "tombstone": record.tombstone,
    }


def record_from_json(obj: Mapping) -> ServiceRecord:
    stamp = obj["stamp"]
    return ServiceRecord(
        service_id=obj["service_id"],
        name=obj["name"],
        server_url=obj["server_url"],
        methods=tuple(obj["methods"]),
        attributes=normalize_attributes(obj["attributes"]),
        lease=lease_from_json(obj["lease"]),
        stamp=VersionStamp(int(stamp["wall_micros"]), uuid.UUID(stamp["origin_node"]).bytes),
        tombstone=bool(obj["tombstone"]),
    )
